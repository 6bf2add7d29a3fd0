"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric guard
(accumulator overflow or training divergence). Every report starts with a
``#`` comment line echoing the effective settings.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .codec import (
    PACKED_MAGIC,
    PackedFormatError,
    encode_level,
    load_packed,
    pack_layer,
    save_packed,
    unpack_layer,
)
from .layer_sim import (
    EnergyModel,
    LayerConfig,
    compare_modes,
    reports_to_csv,
    reports_to_table,
    run_conv_layer,
)
from .pe_sim import AccumulatorOverflow, activation_range
from .pruner import PruneConfig, prune_and_quantize, sparsity
from .qat import DivergenceError, TrainConfig, train_and_evaluate
from .quantizer import QuantConfig, QuantizedLayer, QuantLevel, dequantize, quant_error_report, quantize_layer, uniform_quantize_layer
from .tensor_io import Tensor, TensorFormatError, XorShift64Star, load_tensor, save_tensor, tensor_to_text

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_UNDERFLOW = {"flush": "flush_to_zero", "clamp": "clamp"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _quant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--fsr", type=int, default=0)
    p.add_argument("--rounding", choices=["nearest", "ceil"], default="nearest")
    p.add_argument("--underflow", choices=["flush", "clamp"], default="flush")
    p.add_argument("--pf", type=float, default=0.0)


def _energy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cost-mult", type=float, default=1.0)
    p.add_argument("--cost-shift", type=float, default=EnergyModel().cost_shift)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="potaccel", description="Power-of-two quantisation and BAC/MAC simulation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("quantize", help="quantise a real tensor and write a packed layer")
    _quant_flags(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.add_argument("--format", choices=["text", "csv"], default="text")

    p = sub.add_parser("prune", help="dead-zone prune + quantise a tensor")
    _quant_flags(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.add_argument("--format", choices=["text", "csv"], default="text")

    p = sub.add_parser("encode", help="pack a text list of sign/shift levels")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="reconstruct weights from a packed layer")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.add_argument("--format", choices=["text", "binary", "csv"], default="text")

    p = sub.add_parser("simulate", help="run one convolution layer on MAC or BAC PEs")
    _quant_flags(p)
    _energy_flags(p)
    p.add_argument("--mode", choices=["mac", "bac"], required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--input")
    p.add_argument("--size", type=int, default=8, help="input height/width when generated")
    p.add_argument("--padding", choices=["valid", "same"], default="valid")
    p.add_argument("--truncate", action="store_true", help="BAC right shifts without fractional bits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", "--format", dest="report", choices=["csv", "table"], default="table")
    p.add_argument("--out")

    p = sub.add_parser("compare", help="BAC (PoT) versus MAC (uniform) on the same layer")
    _quant_flags(p)
    _energy_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--input")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--padding", choices=["valid", "same"], default="valid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", "--format", dest="report", choices=["csv", "table"], default="table")
    p.add_argument("--out")

    p = sub.add_parser("train-demo", help="STE training on the spiral task, PF sweep")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--rounding", choices=["nearest", "ceil"], default="nearest")
    p.add_argument("--pf", default="0,0.05,0.1,0.2", help="comma separated pruning factors")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--out")

    p = sub.add_parser("stats", help="quantisation error or packed-layer statistics")
    _quant_flags(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _quant_config(args) -> QuantConfig:
    return QuantConfig(
        bitwidth=args.bits, fsr=args.fsr, rounding=args.rounding, underflow=_UNDERFLOW[args.underflow]
    )


def _header(command: str, **settings) -> str:
    return " ".join(["# potaccel", command, *(f"{k}={v}" for k, v in settings.items())]) + "\n"


def _quant_settings(args) -> dict:
    return dict(bits=args.bits, fsr=args.fsr, rounding=args.rounding, underflow=args.underflow, pf=args.pf)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _is_packed(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == PACKED_MAGIC


def _level_token(lv: QuantLevel) -> str:
    if lv.is_zero:
        return "z"
    return ("+" if lv.sign > 0 else "-") + str(lv.shift)


def _levels_listing(q: QuantizedLayer, fmt: str) -> str:
    codes = [encode_level(lv, q.bitwidth) for lv in q.levels()]
    values = dequantize(q).data
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "code", "level", "value"])
        for i, (lv, c, v) in enumerate(zip(q.levels(), codes, values)):
            w.writerow([i, format(c, f"0{q.bitwidth}b"), _level_token(lv), repr(float(v))])
        return buf.getvalue()
    lines = [
        f"shape: {' '.join(map(str, q.shape))}",
        f"scale: {q.scale!r}",
        f"offset: {q.offset!r}",
        "levels: " + " ".join(_level_token(lv) for lv in q.levels()),
        f"sparsity: {sparsity(q):.6f}",
    ]
    return "\n".join(lines) + "\n"


def _parse_levels_file(text: str, bitwidth: int) -> QuantizedLayer:
    """``shape:``/``scale:``/``offset:`` lines then level tokens (``z``, ``+3``, ``-0``)."""
    meta: dict[str, str] = {}
    tokens: list[str] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, rest = line.partition(":")
        key = key.strip()
        if sep and key in ("shape", "scale", "offset"):
            meta[key] = rest.strip()
        elif sep and key == "levels":
            tokens.extend(rest.split())
        elif sep and key == "sparsity":
            continue
        else:
            tokens.extend(line.split())
    if "shape" not in meta or "scale" not in meta:
        raise TensorFormatError("levels file needs 'shape:' and 'scale:' lines")
    shape = tuple(int(d) for d in meta["shape"].split())
    sign, shift = [], []
    for tok in tokens:
        if tok.lower() == "z":
            sign.append(0)
            shift.append(0)
        elif tok[0] in "+-" and tok[1:].isdigit():
            sign.append(-1 if tok[0] == "-" else 1)
            shift.append(int(tok[1:]))
        elif tok.isdigit():
            sign.append(1)
            shift.append(int(tok))
        else:
            raise TensorFormatError(f"bad level token {tok!r}")
    return QuantizedLayer(
        shape, sign, shift, float(meta["scale"]), bitwidth=bitwidth, offset=float(meta.get("offset", 0))
    )


def _load_activations(args, c_in: int) -> np.ndarray:
    if args.input:
        t = load_tensor(args.input)
        x = t.array
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise TensorFormatError(f"feature map must be (c_in, h, w), got {t.shape}")
        if np.any(x != np.round(x)):
            raise TensorFormatError("feature map values must be integers")
        lo, hi = activation_range()
        if x.min() < lo or x.max() > hi:
            raise TensorFormatError(f"feature map values outside [{lo}, {hi}]")
        return x.astype(np.int64)
    rng = XorShift64Star(args.seed)
    lo, hi = activation_range()
    n = c_in * args.size * args.size
    return np.array([rng.randint(lo, hi) for _ in range(n)], dtype=np.int64).reshape(c_in, args.size, args.size)


def _as_4d(shape) -> tuple[int, int, int, int]:
    if len(shape) == 2:
        return (1, 1, *shape)
    if len(shape) == 4:
        return tuple(shape)
    raise TensorFormatError(f"weights must be k x k or c_out x c_in x k x k, got {shape}")


def _reshape_layer(q: QuantizedLayer, shape) -> QuantizedLayer:
    return QuantizedLayer(shape, q.sign, q.magnitude, q.scale, q.bitwidth, q.family, q.offset)


def _pot_from_tensor(args, t: Tensor, force_prune: bool = False) -> QuantizedLayer:
    if args.pf > 0 or force_prune:
        return prune_and_quantize(t, PruneConfig(args.pf, _quant_config(args)))
    return quantize_layer(t, _quant_config(args))


def _layer_cfg(wshape, x: np.ndarray, padding: str) -> LayerConfig:
    c_out, c_in, k, k2 = wshape
    if k != k2:
        raise TensorFormatError("filters must be square")
    if x.shape[0] != c_in:
        raise TensorFormatError(f"input has {x.shape[0]} channels, weights expect {c_in}")
    return LayerConfig(c_in=c_in, c_out=c_out, k=k, h=x.shape[1], w=x.shape[2], padding=padding)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_quantize(args) -> int:
    t = load_tensor(args.inp)
    q = _pot_from_tensor(args, t, force_prune=args.command == "prune")
    if args.out:
        save_packed(pack_layer(q), args.out)
    sys.stdout.write(_header(args.command, **_quant_settings(args)) + _levels_listing(q, args.format))
    return EXIT_OK


def cmd_encode(args) -> int:
    q = _parse_levels_file(Path(args.inp).read_text(), args.bits)
    p = pack_layer(q)
    save_packed(p, args.out)
    sys.stdout.write(_header("encode", bits=args.bits) + f"wrote {len(p.to_bytes())} bytes ({q.size} levels)\n")
    return EXIT_OK


def cmd_decode(args) -> int:
    q = unpack_layer(load_packed(args.inp))
    if args.format == "csv":
        _emit(_header("decode", bits=q.bitwidth) + _levels_listing(q, "csv"), args.out)
        return EXIT_OK
    t = dequantize(q)
    if args.format == "binary":
        if not args.out:
            raise UsageError("binary output needs --out")
        save_tensor(t, args.out, "binary")
    elif args.out:
        save_tensor(t, args.out, "text")
    else:
        sys.stdout.write(tensor_to_text(t))
    return EXIT_OK


def _energy(args) -> EnergyModel:
    return EnergyModel(cost_mult=args.cost_mult, cost_shift=args.cost_shift)


def cmd_simulate(args) -> int:
    if _is_packed(args.weights):
        q = unpack_layer(load_packed(args.weights))
        wshape = _as_4d(q.shape)
        q = _reshape_layer(q, wshape)
    else:
        t = load_tensor(args.weights)
        wshape = _as_4d(t.shape)
        t = Tensor(wshape, t.data)
        q = _pot_from_tensor(args, t) if args.mode == "bac" else uniform_quantize_layer(t, args.bits)
    x = _load_activations(args, wshape[1])
    cfg = _layer_cfg(wshape, x, args.padding)
    weights = pack_layer(q) if args.mode == "bac" else q
    _, report = run_conv_layer(x, weights, cfg, args.mode, _energy(args), truncate=args.truncate)
    head = _header(
        "simulate", mode=args.mode, **_quant_settings(args), cost_mult=args.cost_mult,
        cost_shift=args.cost_shift, seed=args.seed, padding=args.padding, truncate=args.truncate,
        cycles_model="outputs*c_in*k*k+1",
    )
    body = reports_to_csv([report]) if args.report == "csv" else reports_to_table([report])
    _emit(head + body, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    t = load_tensor(args.weights)
    wshape = _as_4d(t.shape)
    t = Tensor(wshape, t.data)
    x = _load_activations(args, wshape[1])
    cfg = _layer_cfg(wshape, x, args.padding)
    res = compare_modes(x, pack_layer(_pot_from_tensor(args, t)), uniform_quantize_layer(t, args.bits), cfg, _energy(args))
    head = _header(
        "compare", **_quant_settings(args), cost_mult=args.cost_mult, cost_shift=args.cost_shift,
        seed=args.seed, padding=args.padding,
    )
    reports = [res.bac, res.mac]
    body = reports_to_csv(reports) if args.report == "csv" else reports_to_table(reports)
    ratio = "skip-only" if res.energy_ratio is None else f"{res.energy_ratio:.6f}"
    tail = f"# energy_ratio_bac_over_mac={ratio} output_mse={res.output_mse:.6g}\n"
    tail += "".join(f"# note: {n}\n" for n in res.notes)
    _emit(head + body + tail, args.out)
    return EXIT_OK


def cmd_train_demo(args) -> int:
    try:
        pfs = [float(v) for v in args.pf.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --pf list {args.pf!r}") from None
    quant = QuantConfig(bitwidth=args.bits, rounding=args.rounding)
    base = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed)
    float_acc = train_and_evaluate(base).float_acc
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pf", "float_acc", "quant_acc", "sparsity"])
    for pf in pfs:
        r = train_and_evaluate(TrainConfig(args.lr, args.epochs, args.seed, pf, quant))
        w.writerow([pf, f"{float_acc:.6f}", f"{r.quant_acc:.6f}", f"{r.sparsity:.6f}"])
    head = _header("train-demo", bits=args.bits, rounding=args.rounding, seed=args.seed, epochs=args.epochs, lr=args.lr)
    _emit(head + buf.getvalue(), args.out)
    return EXIT_OK


def cmd_stats(args) -> int:
    if _is_packed(args.inp):
        q = unpack_layer(load_packed(args.inp))
        lines = [f"elements: {q.size}", f"sparsity: {sparsity(q):.6f}", f"scale: {q.scale!r}", f"offset: {q.offset!r}"]
        shifts, counts = np.unique(q.magnitude[q.sign != 0], return_counts=True)
        lines += [f"shift {s}: {c}" for s, c in zip(shifts.tolist(), counts.tolist())]
        _emit(_header("stats") + "\n".join(lines) + "\n", args.out)
        return EXIT_OK
    t = load_tensor(args.inp)
    q = _pot_from_tensor(args, t)
    rep = quant_error_report(t, q)
    lines = [f"{k}: {v:.6g}" for k, v in rep.items()]
    _emit(_header("stats", **_quant_settings(args)) + "\n".join(lines) + "\n", args.out)
    return EXIT_OK


COMMANDS = {
    "quantize": cmd_quantize,
    "prune": cmd_quantize,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "train-demo": cmd_train_demo,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (AccumulatorOverflow, DivergenceError) as exc:
        print(f"numeric guard: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TensorFormatError, PackedFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
