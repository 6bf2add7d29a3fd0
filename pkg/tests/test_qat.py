import numpy as np
import pytest

from potaccel.qat import (
    LAYER_DIMS,
    DivergenceError,
    ToyNet,
    TrainConfig,
    _permutation,
    accuracy,
    effective_weights,
    forward,
    gen_dataset,
    init_net,
    initial_sparsity,
    loss_and_grads,
    ste_train_step,
    train,
    train_and_evaluate,
)
from potaccel.quantizer import QuantConfig, dequantize, quantize_layer
from potaccel.tensor_io import Tensor, XorShift64Star

POT4 = QuantConfig(bitwidth=4)


def test_dataset_shape_and_origin():
    x, y = gen_dataset(0, 256)
    assert x.shape == (512, 2) and x.dtype == np.float32
    assert np.array_equal(x[0], [0, 0])
    assert np.sum(y == 0) == np.sum(y == 1) == 256


def test_dataset_classes_disjoint():
    x, y = gen_dataset(0, 256)
    a = {tuple(p) for p in x[y == 0].tolist()}
    b = {tuple(p) for p in x[y == 1].tolist()}
    # both spirals start at radius 0; that shared origin is the only overlap
    assert a & b == {(0.0, 0.0)}
    assert len(a) == len(b) == 256


def test_dataset_shuffle_is_a_seeded_permutation():
    x0, y0 = gen_dataset(0, 64)
    x1, y1 = gen_dataset(3, 64, shuffle=True)
    x2, _ = gen_dataset(3, 64, shuffle=True)
    assert np.array_equal(x1, x2)
    assert sorted(map(tuple, x1.tolist())) == sorted(map(tuple, x0.tolist()))
    assert np.bincount(y1).tolist() == [64, 64]


def test_dataset_minimum_size():
    with pytest.raises(ValueError):
        gen_dataset(0, 7)


def test_permutation_is_bijective():
    p = _permutation(100, XorShift64Star(1))
    assert sorted(p.tolist()) == list(range(100))


def test_init_net_shapes_and_bounds():
    net = init_net(1)
    assert [w.shape for w in net.weights] == list(zip(LAYER_DIMS[:-1], LAYER_DIMS[1:]))
    for w, b in zip(net.weights, net.biases):
        assert w.dtype == np.float32 and not b.any()
        assert np.abs(w).max() <= np.sqrt(6 / w.shape[0])
    assert init_net(1).same_as(net) and not init_net(2).same_as(net)


def test_forward_zero_weights_gives_biases():
    net = init_net(1)
    zero = ToyNet(
        tuple(np.zeros_like(w) for w in net.weights),
        (np.zeros(32, np.float32), np.zeros(32, np.float32), np.array([0.5, -2.0], np.float32)),
    )
    out = forward(zero, [[0.3, -0.7], [1.0, 1.0]])
    assert np.array_equal(out, [[0.5, -2.0], [0.5, -2.0]])


def test_forward_quant_none_is_plain():
    net = init_net(4)
    x, _ = gen_dataset(0, 16)
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < 2:
            h = np.maximum(h, 0)
    assert np.array_equal(forward(net, x), h)


@pytest.mark.parametrize("pf", [0.0, 0.1])
def test_quantised_forward_equals_dequantized_weights(pf):
    net = init_net(5)
    x, _ = gen_dataset(0, 16)
    wq = effective_weights(net, POT4, pf)
    explicit = ToyNet(tuple(wq), net.biases)
    assert np.array_equal(forward(net, x, POT4, pf), forward(explicit, x))
    if pf == 0:
        direct = dequantize(quantize_layer(Tensor.from_array(net.weights[1]), POT4)).array
        assert np.array_equal(wq[1], direct.astype(np.float32))


def test_ste_identity_is_plain_gradient_descent():
    net = init_net(2)
    x, y = gen_dataset(0, 32)
    cfg = TrainConfig(learning_rate=0.1)
    stepped, loss = ste_train_step(net, (x, y), cfg)
    ref_loss, gw, gb = loss_and_grads(list(net.weights), list(net.biases), x, y)
    lr = np.float32(0.1)
    assert loss == ref_loss
    for new, old, g in zip(stepped.weights, net.weights, gw):
        assert np.array_equal(new, old - lr * g)
    for new, old, g in zip(stepped.biases, net.biases, gb):
        assert np.array_equal(new, old - lr * g)


def test_ste_trajectory_identity_matches_manual_loop():
    cfg = TrainConfig(epochs=3, seed=6, n_per_class=32)
    trained, _ = train(cfg)
    x, y = gen_dataset(cfg.seed, cfg.n_per_class)
    w = list(init_net(cfg.seed).weights)
    b = list(init_net(cfg.seed).biases)
    rng = XorShift64Star(cfg.seed ^ 0x5EED)
    lr = np.float32(cfg.learning_rate)
    for _ in range(cfg.epochs):
        order = _permutation(len(y), rng)
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, gw, gb = loss_and_grads(w, b, x[idx], y[idx])
            w = [wi - lr * g for wi, g in zip(w, gw)]
            b = [bi - lr * g for bi, g in zip(b, gb)]
    assert trained.same_as(ToyNet(tuple(w), tuple(b)))


def test_ste_master_weights_move_while_levels_stay():
    net = init_net(3)
    x, y = gen_dataset(0, 32)
    cfg = TrainConfig(learning_rate=1e-6, quant=POT4)
    stepped, _ = ste_train_step(net, (x, y), cfg)
    before = effective_weights(net, POT4)
    after = effective_weights(stepped, POT4)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert not stepped.same_as(net)


def test_ste_gradient_uses_quantised_weights():
    net = init_net(3)
    x, y = gen_dataset(0, 32)
    stepped, _ = ste_train_step(net, (x, y), TrainConfig(quant=POT4))
    _, gw, _ = loss_and_grads(effective_weights(net, POT4), list(net.biases), x, y)
    lr = np.float32(0.05)
    assert np.array_equal(stepped.weights[0], net.weights[0] - lr * gw[0].astype(np.float32))


def test_finite_difference_gradients():
    net = init_net(7).astype(np.float64)
    x, y = gen_dataset(0, 64)
    x = x.astype(np.float64)
    rng = np.random.default_rng(0)
    # zero biases put the origin samples exactly on every ReLU kink
    w, b = list(net.weights), [rng.normal(0, 0.1, v.shape) for v in net.biases]
    _, gw, gb = loss_and_grads(w, b, x, y)
    params, grads = w + b, gw + gb
    h = 1e-4
    for _ in range(10):
        li = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(n)) for n in params[li].shape)
        orig = params[li][idx]
        params[li][idx] = orig + h
        up, _, _ = loss_and_grads(w, b, x, y)
        params[li][idx] = orig - h
        down, _, _ = loss_and_grads(w, b, x, y)
        params[li][idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[li][idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        assert rel < 1e-4, (li, idx, analytic, numeric)


def test_divergence_is_reported():
    net = init_net(1)
    bad = ToyNet((np.full((2, 32), np.inf, np.float32),) + net.weights[1:], net.biases)
    x, y = gen_dataset(0, 8)
    with pytest.raises(DivergenceError):
        ste_train_step(bad, (x, y), TrainConfig())


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        ste_train_step(init_net(1), (np.zeros((0, 2)), np.zeros(0, int)), TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=5, seed=11, n_per_class=64, quant=POT4)
    a, la = train(cfg)
    b, lb = train(cfg)
    assert a.same_as(b) and la == lb


def test_initial_sparsity_monotone_in_pf():
    totals = []
    for pf in (0.0, 0.05, 0.1, 0.2):
        sp = initial_sparsity(TrainConfig(quant=POT4, pf=pf))
        totals.append(sum(sp))
    assert totals == sorted(totals)
    assert totals[0] < totals[-1]
    with pytest.raises(ValueError):
        initial_sparsity(TrainConfig())


def test_short_run_learns_something():
    cfg = TrainConfig(epochs=40, n_per_class=128)
    res = train_and_evaluate(cfg)
    x, y = gen_dataset(cfg.seed, cfg.n_per_class)
    assert res.quant_acc is None
    assert res.float_acc == accuracy(res.net, x, y)
    assert res.float_acc > 0.6


def test_trained_pf_sweep_sparsity_strictly_increases():
    sp = [train_and_evaluate(TrainConfig(quant=POT4, pf=pf)).sparsity for pf in (0.0, 0.05, 0.1, 0.2)]
    assert all(a < b for a, b in zip(sp, sp[1:])), sp
