"""Power-of-two (logarithmic) and uniform weight quantisation.

A PoT level is either the zero weight or ``sign * 2**-shift`` with
``0 <= shift <= S_max`` where ``S_max = 2**(bitwidth - 1) - 2``. The layer
scale restores the original magnitude; pruned layers additionally carry an
offset (see :mod:`potaccel.pruner`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .tensor_io import Tensor

Rounding = Literal["nearest", "ceil"]
Underflow = Literal["flush_to_zero", "clamp"]
Family = Literal["pot", "uniform"]

_SQRT2 = math.sqrt(2.0)


def max_shift(bitwidth: int) -> int:
    """Deepest representable shift: one magnitude code is reserved for zero."""
    return 2 ** (bitwidth - 1) - 2


def uniform_max_level(bitwidth: int) -> int:
    return 2 ** (bitwidth - 1) - 1


@dataclass(frozen=True)
class QuantConfig:
    bitwidth: int = 4
    fsr: int = 0
    rounding: Rounding = "nearest"
    underflow: Underflow = "flush_to_zero"
    family: Family = "pot"

    def __post_init__(self) -> None:
        if not 3 <= self.bitwidth <= 8:
            raise ValueError(f"bitwidth must be in [3, 8], got {self.bitwidth}")
        if self.rounding not in ("nearest", "ceil"):
            raise ValueError(f"unknown rounding {self.rounding!r}")
        if self.underflow not in ("flush_to_zero", "clamp"):
            raise ValueError(f"unknown underflow policy {self.underflow!r}")
        if self.family not in ("pot", "uniform"):
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def s_max(self) -> int:
        return max_shift(self.bitwidth)


@dataclass(frozen=True)
class QuantLevel:
    """Scalar PoT level. ``sign`` is +1/-1, or 0 for the zero weight."""

    sign: int
    shift: int = 0

    def __post_init__(self) -> None:
        if self.sign not in (-1, 0, 1):
            raise ValueError(f"sign must be -1, 0 or +1, got {self.sign}")
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")
        if self.sign == 0 and self.shift != 0:
            object.__setattr__(self, "shift", 0)

    @classmethod
    def zero(cls) -> QuantLevel:
        return cls(0, 0)

    @classmethod
    def pot(cls, sign: int, shift: int) -> QuantLevel:
        if sign not in (-1, 1):
            raise ValueError("a PoT level needs sign +1 or -1")
        return cls(sign, shift)

    @property
    def is_zero(self) -> bool:
        return self.sign == 0

    @property
    def value(self) -> float:
        return 0.0 if self.is_zero else self.sign * 2.0 ** -self.shift

    def __repr__(self) -> str:
        if self.is_zero:
            return "zero"
        return f"({'+' if self.sign > 0 else '-'},{self.shift})"


def _as_f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    """Per-element levels plus one per-layer scale (and offset).

    Levels are stored as two integer arrays: ``sign`` in {-1, 0, +1} with 0
    marking the zero weight, and ``magnitude``. For the PoT family the
    magnitude is the right-shift amount; for the uniform family it is the
    absolute integer level. Scale and offset are held at 32-bit precision
    so they survive serialisation unchanged.
    """

    shape: tuple[int, ...]
    sign: np.ndarray
    magnitude: np.ndarray
    scale: float
    bitwidth: int = 4
    family: Family = "pot"
    offset: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        sign = np.array(self.sign, dtype=np.int8).reshape(-1)
        mag = np.array(self.magnitude, dtype=np.int16).reshape(-1)
        if sign.size != math.prod(shape) or mag.size != sign.size:
            raise ValueError("level count does not match shape")
        if not np.all(np.isin(sign, (-1, 0, 1))):
            raise ValueError("sign entries must be -1, 0 or +1")
        mag = np.where(sign == 0, 0, mag).astype(np.int16)
        limit = max_shift(self.bitwidth) if self.family == "pot" else uniform_max_level(self.bitwidth)
        if np.any(mag < 0) or np.any(mag > limit):
            raise ValueError(f"magnitude out of range [0, {limit}]")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.offset < 0:
            raise ValueError("offset must be nonnegative")
        if self.family == "uniform" and self.offset != 0:
            raise ValueError("uniform layers cannot carry an offset")
        sign.flags.writeable = False
        mag.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "sign", sign)
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "scale", _as_f32(self.scale))
        object.__setattr__(self, "offset", _as_f32(self.offset))

    @property
    def size(self) -> int:
        return self.sign.size

    @property
    def s_max(self) -> int:
        return max_shift(self.bitwidth)

    @property
    def zero_mask(self) -> np.ndarray:
        return self.sign == 0

    def levels(self) -> list[QuantLevel]:
        if self.family != "pot":
            raise ValueError("levels() is only defined for the PoT family")
        return [QuantLevel(int(s), int(m)) for s, m in zip(self.sign, self.magnitude)]

    def int_levels(self) -> np.ndarray:
        """Signed integer weights fed to a multiplier.

        Uniform family: the level itself. PoT family: ``±2**(S_max - shift)``,
        i.e. the weight in units of ``2**-S_max``.
        """
        if self.family == "uniform":
            return self.sign.astype(np.int64) * self.magnitude
        return self.sign.astype(np.int64) << (self.s_max - self.magnitude.astype(np.int64))

    def same_levels(self, other: QuantizedLayer) -> bool:
        return (
            self.shape == other.shape
            and self.family == other.family
            and np.array_equal(self.sign, other.sign)
            and np.array_equal(self.magnitude, other.magnitude)
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedLayer):
            return NotImplemented
        return (
            self.same_levels(other)
            and self.bitwidth == other.bitwidth
            and self.scale == other.scale
            and self.offset == other.offset
        )


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def normalize(w: Tensor) -> tuple[Tensor, float]:
    """Scale ``w`` into [-1, 1] by its largest magnitude."""
    mag = np.abs(w.data)
    sf = mag.max()
    if sf == 0:
        raise ValueError("cannot normalise an all-zero tensor")
    return Tensor(w.shape, w.data / sf), float(sf)


# ---------------------------------------------------------------------------
# PoT quantisation
# ---------------------------------------------------------------------------


def _round_log2(mant: np.ndarray, exp: np.ndarray, rounding: str) -> np.ndarray:
    """Exact rounding of log2(m * 2**e) for frexp output (0.5 <= m < 1).

    log2|x| = (e - 1) + log2(2m) with log2(2m) in [0, 1). The tie point
    log2(2m) = 0.5 sits at an irrational mantissa, so half-away-from-zero
    never has to break an exact tie; comparing against the rounded sqrt(2),
    which is above the true value, classifies every double correctly.
    """
    if rounding == "ceil":
        return np.where(mant == 0.5, exp - 1, exp)
    return np.where(2.0 * mant < _SQRT2, exp - 1, exp)


def _pot_arrays(x: np.ndarray, cfg: QuantConfig) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    if np.any(mag > 1.0):
        raise ValueError("log_quantize expects inputs in [-1, 1]")
    nz = mag > 0
    mant, exp = np.frexp(np.where(nz, mag, 1.0))
    e = _round_log2(mant, exp.astype(np.int64), cfg.rounding)
    e = np.minimum(e, cfg.fsr)
    shift = cfg.fsr - e
    s_max = cfg.s_max
    under = shift > s_max
    if cfg.underflow == "clamp":
        shift = np.where(under, s_max, shift)
        keep = nz
    else:
        keep = nz & ~under
    sign = np.where(keep, np.where(x < 0, -1, 1), 0).astype(np.int8)
    shift = np.where(keep, shift, 0).astype(np.int16)
    return sign, shift


def log_quantize(x: float, cfg: QuantConfig) -> QuantLevel:
    """Quantise one normalised value to the nearest (or ceiling) power of two."""
    if cfg.family != "pot":
        raise ValueError("log_quantize needs a PoT config")
    if not abs(x) <= 1.0:
        raise ValueError(f"|x| must be <= 1, got {x}")
    sign, shift = _pot_arrays(np.array([x]), cfg)
    return QuantLevel(int(sign[0]), int(shift[0]))


def quantize_layer(w: Tensor, cfg: QuantConfig) -> QuantizedLayer:
    if cfg.family == "uniform":
        return uniform_quantize_layer(w, cfg.bitwidth)
    w_n, sf = normalize(w)
    sign, shift = _pot_arrays(w_n.data, cfg)
    # shifts count down from 2**fsr, which therefore belongs in the scale
    return QuantizedLayer(w.shape, sign, shift, math.ldexp(sf, cfg.fsr), bitwidth=cfg.bitwidth)


def dequantize(q: QuantizedLayer) -> Tensor:
    if q.family == "uniform":
        if q.offset != 0:
            raise ValueError("uniform layers cannot carry an offset")
        vals = q.sign * q.magnitude.astype(np.float64) * (q.scale / uniform_max_level(q.bitwidth))
    else:
        mag = np.ldexp(q.scale, -q.magnitude.astype(np.int32)) + q.offset
        vals = q.sign * mag
    return Tensor(q.shape, vals)


# ---------------------------------------------------------------------------
# uniform baseline
# ---------------------------------------------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    fl = np.floor(a)
    r = np.where(a - fl >= 0.5, fl + 1.0, fl)
    return np.copysign(r, x)


def uniform_quantize_layer(w: Tensor, bitwidth: int) -> QuantizedLayer:
    """Symmetric uniform levels in [-M, M], M = 2**(bitwidth-1) - 1."""
    QuantConfig(bitwidth=bitwidth)  # range check
    w_n, sf = normalize(w)
    m = uniform_max_level(bitwidth)
    lv = np.clip(round_half_away(w_n.data.astype(np.float64) * m), -m, m).astype(np.int64)
    return QuantizedLayer(w.shape, np.sign(lv), np.abs(lv), sf, bitwidth=bitwidth, family="uniform")


# ---------------------------------------------------------------------------
# error report
# ---------------------------------------------------------------------------


def quant_error_report(w: Tensor, q: QuantizedLayer) -> dict[str, float]:
    if w.shape != q.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {q.shape}")
    orig = w.data.astype(np.float64)
    rec = dequantize(q).data.astype(np.float64)
    both = (orig != 0) & (rec != 0)
    rel = np.abs(rec[both] - orig[both]) / np.abs(orig[both])
    return {
        "max_rel_err_nonzero": float(rel.max()) if rel.size else 0.0,
        "mse": float(np.mean((rec - orig) ** 2)),
        "zero_fraction": float(np.mean(q.zero_mask)),
    }
