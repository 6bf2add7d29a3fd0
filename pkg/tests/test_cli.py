import csv
import io

import numpy as np
import pytest

from potaccel.cli import main
from potaccel.codec import load_packed, unpack_layer
from potaccel.pruner import PruneConfig, prune_and_quantize
from potaccel.quantizer import QuantConfig, dequantize, quantize_layer
from potaccel.tensor_io import Tensor, load_tensor, save_tensor, tensor_from_text

GOLDEN_LEVELS = "z -4 +5 +3 +1 -1 +0 -2 +2"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def body(text):
    return [line for line in text.splitlines() if not line.startswith("#")]


def test_quantize_golden_filter(capsys, tmp_path, golden_dir):
    out_file = tmp_path / "w.potq"
    code, out, _ = run(
        capsys, "quantize", "--bits", 4, "--rounding", "ceil", "--in", golden_dir / "worked_filter.txt", "--out", out_file
    )
    assert code == 0
    assert out.startswith("# potaccel quantize bits=4 fsr=0 rounding=ceil underflow=flush pf=0.0")
    assert f"levels: {GOLDEN_LEVELS}" in out
    levels = unpack_layer(load_packed(out_file)).levels()
    assert " ".join("z" if lv.is_zero else f"{'+' if lv.sign > 0 else '-'}{lv.shift}" for lv in levels) == GOLDEN_LEVELS
    assert out_file.read_bytes() == (golden_dir / "worked_filter.potq").read_bytes()


def test_decode_matches_dequantize(capsys, tmp_path, golden_dir):
    w = tmp_path / "w.potq"
    run(capsys, "quantize", "--rounding", "ceil", "--in", golden_dir / "worked_filter.txt", "--out", w)
    code, out, _ = run(capsys, "decode", "--in", w, "--format", "text")
    assert code == 0
    expected = dequantize(quantize_layer(load_tensor(golden_dir / "worked_filter.txt"), QuantConfig(rounding="ceil")))
    assert tensor_from_text(out) == expected


def test_decode_binary_and_csv(capsys, tmp_path, golden_dir):
    b = tmp_path / "w.pott"
    assert run(capsys, "decode", "--in", golden_dir / "worked_filter.potq", "--format", "binary", "--out", b)[0] == 0
    assert load_tensor(b) == dequantize(unpack_layer(load_packed(golden_dir / "worked_filter.potq")))
    code, out, _ = run(capsys, "decode", "--in", golden_dir / "worked_filter.potq", "--format", "csv")
    rows = list(csv.reader(io.StringIO("\n".join(body(out)))))
    assert rows[0] == ["index", "code", "level", "value"]
    assert [r[2] for r in rows[1:]] == GOLDEN_LEVELS.split()
    assert rows[1][1] == "0111"


def test_binary_decode_requires_out(capsys, golden_dir):
    assert run(capsys, "decode", "--in", golden_dir / "worked_filter.potq", "--format", "binary")[0] == 1


def test_encode_round_trip(capsys, tmp_path, golden_dir):
    src = tmp_path / "levels.txt"
    src.write_text(f"shape: 3 3\nscale: 2.34\nlevels: {GOLDEN_LEVELS}\n")
    out = tmp_path / "e.potq"
    code, text, _ = run(capsys, "encode", "--in", src, "--out", out)
    assert code == 0 and text.startswith("# potaccel encode bits=4")
    assert out.read_bytes() == (golden_dir / "worked_filter.potq").read_bytes()


def test_quantize_listing_feeds_encode(capsys, tmp_path):
    """quantize output -> encode -> decode reproduces quantize + dequantize exactly."""
    t = Tensor((4, 5), np.random.default_rng(3).normal(size=20))
    src = tmp_path / "t.pott"
    save_tensor(t, src)
    _, listing, _ = run(capsys, "prune", "--pf", 0.1, "--in", src)
    (tmp_path / "l.txt").write_text(listing)
    run(capsys, "encode", "--in", tmp_path / "l.txt", "--out", tmp_path / "l.potq")
    _, decoded, _ = run(capsys, "decode", "--in", tmp_path / "l.potq")
    assert tensor_from_text(decoded) == dequantize(prune_and_quantize(t, PruneConfig(0.1)))


def test_encode_bad_token(capsys, tmp_path):
    src = tmp_path / "bad.txt"
    src.write_text("shape: 2\nscale: 1\nlevels: +1 q\n")
    assert run(capsys, "encode", "--in", src, "--out", tmp_path / "x.potq")[0] == 2


def _write_layer(tmp_path, c_out=4, c_in=2, k=3, seed=0):
    w = Tensor((c_out, c_in, k, k), np.random.default_rng(seed).normal(size=c_out * c_in * k * k))
    path = tmp_path / "w.pott"
    save_tensor(w, path)
    return path


@pytest.mark.parametrize("mode", ["bac", "mac"])
def test_simulate_csv_conservation(capsys, tmp_path, mode):
    wpath = _write_layer(tmp_path)
    fmap = tmp_path / "fmap.bin"
    save_tensor(Tensor((2, 6, 6), np.random.default_rng(1).integers(-128, 128, 72)), fmap)
    code, out, _ = run(
        capsys, "simulate", "--mode", mode, "--weights", wpath, "--input", fmap, "--report", "csv", "--pf", 0.1
    )
    assert code == 0
    assert out.splitlines()[0].startswith(f"# potaccel simulate mode={mode}")
    rows = list(csv.DictReader(io.StringIO("\n".join(body(out)))))
    assert len(rows) == 1
    r = rows[0]
    taps = 4 * 16 * 2 * 9
    done = int(r["shifts"]) if mode == "bac" else int(r["mults"])
    assert done + int(r["skipped"]) == taps
    assert int(r["cycles"]) == 16 * 18 + 1


def test_simulate_packed_weights_and_seed(capsys, tmp_path, golden_dir):
    args = ["simulate", "--mode", "bac", "--weights", golden_dir / "worked_filter.potq", "--size", 5, "--report", "csv"]
    a = run(capsys, *args, "--seed", 3)[1]
    b = run(capsys, *args, "--seed", 3)[1]
    assert a == b
    rows = list(csv.DictReader(io.StringIO("\n".join(body(a)))))
    assert int(rows[0]["skipped"]) == 9  # one zero weight x 9 outputs


def test_simulate_table(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--mode", "mac", "--weights", _write_layer(tmp_path, c_in=1))
    assert code == 0
    assert body(out)[0].split()[0] == "mode"


def test_compare_reports_ratio(capsys, tmp_path):
    code, out, _ = run(capsys, "compare", "--weights", _write_layer(tmp_path), "--size", 6, "--report", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO("\n".join(body(out)))))
    assert [r["mode"] for r in rows] == ["bac", "mac"]
    assert "# energy_ratio_bac_over_mac=" in out


def test_stats_packed_and_tensor(capsys, tmp_path, golden_dir):
    code, out, _ = run(capsys, "stats", "--in", golden_dir / "worked_filter.potq")
    assert code == 0 and "elements: 9" in out and "sparsity: 0.111111" in out
    code, out, _ = run(capsys, "stats", "--in", golden_dir / "worked_filter.txt")
    assert code == 0 and out.startswith("# potaccel stats")


def test_train_demo_csv(capsys):
    code, out, _ = run(capsys, "train-demo", "--epochs", 2, "--pf", "0,0.1")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO("\n".join(body(out)))))
    assert [r["pf"] for r in rows] == ["0.0", "0.1"]
    assert all(0 <= float(r["quant_acc"]) <= 1 for r in rows)


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["quantize"],
        ["quantize", "--in", "x", "--bogus"],
        ["simulate", "--mode", "xyz", "--weights", "w"],
        ["train-demo", "--pf", "a,b"],
    ],
)
def test_usage_errors(capsys, argv):
    assert run(capsys, *argv)[0] == 1


def test_data_errors(capsys, tmp_path):
    bad = tmp_path / "bad.potq"
    bad.write_bytes(b"POTQ\x09junk")
    assert run(capsys, "decode", "--in", bad)[0] == 2
    assert run(capsys, "decode", "--in", tmp_path / "missing.potq")[0] == 2
    zeros = tmp_path / "z.txt"
    zeros.write_text("shape: 2\n0 0\n")
    assert run(capsys, "quantize", "--in", zeros)[0] == 2
    assert run(capsys, "quantize", "--bits", 2, "--in", zeros)[0] == 2


def test_numeric_guard_exit_codes(capsys, tmp_path):
    # 6-bit codes carry 30 fractional bits: 127 << 30 leaves the int32 range
    w = tmp_path / "one.pott"
    save_tensor(Tensor((1, 1), [1.0]), w)
    fmap = tmp_path / "a.pott"
    save_tensor(Tensor((1, 1, 1), [127]), fmap)
    code, _, err = run(capsys, "simulate", "--mode", "bac", "--bits", 6, "--weights", w, "--input", fmap)
    assert code == 3 and "numeric guard" in err
    assert run(capsys, "train-demo", "--epochs", 1, "--lr", 1e30, "--pf", "0")[0] == 3


def test_simulate_truncate_flag_avoids_overflow(capsys, tmp_path):
    w = tmp_path / "one.pott"
    save_tensor(Tensor((1, 1), [1.0]), w)
    fmap = tmp_path / "a.pott"
    save_tensor(Tensor((1, 1, 1), [127]), fmap)
    code, out, _ = run(capsys, "simulate", "--mode", "bac", "--bits", 8, "--weights", w, "--input", fmap, "--truncate")
    assert code == 0 and "truncate=True" in out
