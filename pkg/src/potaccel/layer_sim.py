"""Convolution-layer simulator built from MAC/BAC processing elements.

One PE per filter; all filters run in parallel and each streams its output
positions one after another. Per output the PE spends ``c_in * k * k``
cycles plus a single fill cycle for the whole stream, so::

    total_cycles = outputs_per_filter * c_in * k * k + 1

which reduces to ``k*k + 1`` for a single 1-channel output. Energy is an
op-count proxy, never watts.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .codec import PackedLayer, pack_layer
from .pe_sim import BatchResult, bac_accumulate, check_activations, mac_accumulate
from .quantizer import QuantizedLayer, max_shift, uniform_max_level

Padding = Literal["valid", "same"]

# Table-2 layer power, PoT vs uniform: 0.214 W / 0.303 W
DEFAULT_SHIFT_COST = 0.706

CSV_COLUMNS = ("mode", "mults", "shifts", "skipped", "cycles", "zero_fraction", "energy_proxy")


@dataclass(frozen=True)
class LayerConfig:
    c_in: int = 1
    c_out: int = 512
    k: int = 3
    h: int = 8
    w: int = 8
    stride: int = 1
    padding: Padding = "valid"

    def __post_init__(self) -> None:
        if min(self.c_in, self.c_out, self.k, self.h, self.w) <= 0:
            raise ValueError("all layer dimensions must be positive")
        if self.k % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.stride != 1:
            raise ValueError("only stride 1 is modelled")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.padding == "valid" and (self.k > self.h or self.k > self.w):
            raise ValueError("kernel larger than input with valid padding")

    @property
    def out_hw(self) -> tuple[int, int]:
        if self.padding == "same":
            return self.h, self.w
        return self.h - self.k + 1, self.w - self.k + 1

    @property
    def taps_per_output(self) -> int:
        return self.c_in * self.k * self.k

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.k, self.k)

    @property
    def total_taps(self) -> int:
        oh, ow = self.out_hw
        return self.c_out * oh * ow * self.taps_per_output

    def total_cycles(self) -> int:
        oh, ow = self.out_hw
        return oh * ow * self.taps_per_output + 1


@dataclass(frozen=True)
class EnergyModel:
    cost_mult: float = 1.0
    cost_shift: float = DEFAULT_SHIFT_COST
    cost_skip: float = 0.0

    def __post_init__(self) -> None:
        if min(self.cost_mult, self.cost_shift, self.cost_skip) < 0:
            raise ValueError("energy costs must be nonnegative")


@dataclass(frozen=True)
class LayerReport:
    mode: str
    mults_performed: int
    shifts_performed: int
    ops_skipped: int
    total_cycles: int
    energy_proxy: float
    zero_weight_fraction: float
    offset_mode: bool = False

    @property
    def total_ops(self) -> int:
        return self.mults_performed + self.shifts_performed + self.ops_skipped

    def csv_row(self) -> list:
        return [
            self.mode,
            self.mults_performed,
            self.shifts_performed,
            self.ops_skipped,
            self.total_cycles,
            f"{self.zero_weight_fraction:.6f}",
            f"{self.energy_proxy:.6f}",
        ]


def energy_proxy(report: LayerReport, model: EnergyModel = EnergyModel()) -> float:
    return (
        report.mults_performed * model.cost_mult
        + report.shifts_performed * model.cost_shift
        + report.ops_skipped * model.cost_skip
    )


@dataclass(frozen=True, eq=False)
class LayerOutput:
    """Raw accumulators (``c_out x h' x w'``) with the metadata to read them."""

    acc: np.ndarray
    aux: np.ndarray
    frac_bits: int
    scale: float
    offset: float = 0.0

    def real(self) -> np.ndarray:
        return np.ldexp(self.acc.astype(np.float64), -self.frac_bits) * self.scale + self.aux * self.offset


def im2col(x: np.ndarray, k: int, padding: Padding) -> np.ndarray:
    """(c_in, h, w) -> (h'*w', c_in*k*k), tap order matching a (c_in, k, k) filter."""
    if padding == "same":
        p = k // 2
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # win: (c_in, h', w', k, k)
    c_in, oh, ow = win.shape[:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c_in * k * k)


def _resolve_weights(weights, mode: str, cfg: LayerConfig):
    """Return (per-filter tap streams, frac_bits, scale, offset, bitwidth)."""
    if mode == "bac":
        if isinstance(weights, QuantizedLayer):
            weights = pack_layer(weights)
        if not isinstance(weights, PackedLayer):
            raise TypeError("BAC mode needs a PackedLayer (or PoT QuantizedLayer)")
        if tuple(weights.shape) != cfg.weight_shape:
            raise ValueError(f"weight shape {weights.shape} != {cfg.weight_shape}")
        streams = weights.codes().reshape(cfg.c_out, -1)
        return streams, max_shift(weights.bitwidth), weights.scale, weights.offset, weights.bitwidth
    if isinstance(weights, QuantizedLayer):
        if weights.family == "uniform":
            scale = weights.scale / uniform_max_level(weights.bitwidth)
            ints = weights.int_levels()
            frac = 0
        else:
            if weights.offset != 0:
                raise ValueError("MAC mode cannot apply a pruning offset")
            ints = weights.int_levels()
            scale, frac = weights.scale, weights.s_max
        if tuple(weights.shape) != cfg.weight_shape:
            raise ValueError(f"weight shape {weights.shape} != {cfg.weight_shape}")
        return ints.reshape(cfg.c_out, -1), frac, scale, 0.0, weights.bitwidth
    arr = np.asarray(weights)
    if arr.shape != cfg.weight_shape:
        raise ValueError(f"weight shape {arr.shape} != {cfg.weight_shape}")
    if arr.dtype.kind not in "iu":
        raise TypeError("MAC mode needs integer weight levels")
    return arr.reshape(cfg.c_out, -1).astype(np.int64), 0, 1.0, 0.0, None


def run_conv_layer(
    inputs,
    weights,
    cfg: LayerConfig,
    mode: Literal["mac", "bac"],
    energy: EnergyModel = EnergyModel(),
    workers: int = 1,
    signed: bool = True,
    truncate: bool = False,
) -> tuple[LayerOutput, LayerReport]:
    """Convolve an integer feature map with every filter of the layer.

    BAC weights are raw codewords (from a :class:`PackedLayer`); MAC weights
    are integer levels, either a plain array or a :class:`QuantizedLayer`.
    ``workers > 1`` spreads filters over threads; results do not depend on it.
    ``truncate`` switches BAC to plain right shifts with no fractional bits,
    the only option that fits 32 bits once codes are 6 bits or wider.
    """
    if mode not in ("mac", "bac"):
        raise ValueError(f"unknown mode {mode!r}")
    x = check_activations(inputs, signed)
    if x.shape != (cfg.c_in, cfg.h, cfg.w):
        raise ValueError(f"input shape {x.shape} != {(cfg.c_in, cfg.h, cfg.w)}")
    streams, frac, scale, offset, bitwidth = _resolve_weights(weights, mode, cfg)
    offset_mode = mode == "bac" and offset != 0
    truncate = truncate and mode == "bac"
    if truncate:
        frac = 0
    cols = im2col(x, cfg.k, cfg.padding)

    def one(f: int) -> BatchResult:
        if mode == "bac":
            return bac_accumulate(cols, streams[f], bitwidth, offset_mode=offset_mode, truncate=truncate)
        return mac_accumulate(cols, streams[f])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(cfg.c_out)))
    else:
        results = [one(f) for f in range(cfg.c_out)]

    oh, ow = cfg.out_hw
    acc = np.stack([r.acc for r in results]).reshape(cfg.c_out, oh, ow)
    aux = np.stack([r.aux for r in results]).reshape(cfg.c_out, oh, ow)
    performed = sum(r.ops_performed for r in results)
    skipped = sum(r.ops_skipped for r in results)
    if mode == "bac":
        zero_frac = float(np.mean(streams_zero_mask(streams, bitwidth)))
    else:
        zero_frac = float(np.mean(streams == 0))
    report = LayerReport(
        mode=mode,
        mults_performed=performed if mode == "mac" else 0,
        shifts_performed=performed if mode == "bac" else 0,
        ops_skipped=skipped,
        total_cycles=cfg.total_cycles(),
        energy_proxy=0.0,
        zero_weight_fraction=zero_frac,
        offset_mode=offset_mode,
    )
    report = _with_energy(report, energy)
    return LayerOutput(acc, aux, frac, scale, offset), report


def streams_zero_mask(codes: np.ndarray, bitwidth: int) -> np.ndarray:
    mag = np.asarray(codes, dtype=np.int64) & ((1 << (bitwidth - 1)) - 1)
    return mag == max_shift(bitwidth) + 1


def _with_energy(report: LayerReport, model: EnergyModel) -> LayerReport:
    d = asdict(report)
    d["energy_proxy"] = energy_proxy(report, model)
    return LayerReport(**d)


@dataclass(frozen=True)
class ComparisonReport:
    bac: LayerReport
    mac: LayerReport
    energy_ratio: float | None
    output_mse: float
    notes: list[str] = field(default_factory=list)


def compare_modes(
    inputs,
    pot_weights: PackedLayer | QuantizedLayer,
    uniform_weights: QuantizedLayer,
    cfg: LayerConfig,
    energy: EnergyModel = EnergyModel(),
) -> ComparisonReport:
    """Run the same input through a BAC (PoT) and a MAC (uniform) layer.

    ``energy_ratio`` is BAC/MAC proxy; it is ``None`` when the MAC side did
    no work at all (every weight zero).
    """
    out_b, rep_b = run_conv_layer(inputs, pot_weights, cfg, "bac", energy)
    out_m, rep_m = run_conv_layer(inputs, uniform_weights, cfg, "mac", energy)
    notes = []
    if rep_m.energy_proxy == 0:
        ratio = None
        notes.append("MAC layer performed no multiplies: skip-only comparison")
    else:
        ratio = rep_b.energy_proxy / rep_m.energy_proxy
    if rep_b.offset_mode:
        notes.append("BAC layer uses an offset: one extra multiply-by-constant per output")
    mse = float(np.mean((out_b.real() - out_m.real()) ** 2))
    return ComparisonReport(rep_b, rep_m, ratio, mse, notes)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def reports_to_table(reports) -> str:
    rows = [list(CSV_COLUMNS)] + [[str(v) for v in r.csv_row()] for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(CSV_COLUMNS))]
    lines = ["  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in rows]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"
