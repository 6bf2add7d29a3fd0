"""Functional and cycle models of the MAC and BAC processing elements.

Both units test the weight for zero and skip the arithmetic when it is.
The BAC unit shifts the activation by the weight's shift code and adds or
subtracts the result depending on the weight sign bit.

Shifts are modelled as *left* shifts by ``S_max - s`` into an accumulator
with ``S_max`` fractional bits. This keeps every bit a right shift would
drop, so the accumulator holds the exact dyadic sum ``sum ±a * 2**-s``.
``truncate=True`` reproduces a plain arithmetic right shift instead.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .codec import decode_array, decode_codeword
from .quantizer import max_shift

ACC_MIN, ACC_MAX = -(1 << 31), (1 << 31) - 1

Mode = Literal["mac", "bac"]


class AccumulatorOverflow(ArithmeticError):
    """The running accumulator left the signed 32-bit range."""


def activation_range(signed: bool = True) -> tuple[int, int]:
    return (-128, 127) if signed else (0, 255)


def check_activation(a, signed: bool = True) -> int:
    lo, hi = activation_range(signed)
    if int(a) != a or not lo <= a <= hi:
        raise ValueError(f"activation {a} outside [{lo}, {hi}]")
    return int(a)


def check_activations(a: np.ndarray, signed: bool = True) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError("activations must be integers")
    lo, hi = activation_range(signed)
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise ValueError(f"activations outside [{lo}, {hi}]")
    return arr


@dataclass(frozen=True)
class PEStats:
    ops_performed: int = 0
    ops_skipped: int = 0
    cycles: int = 0

    @property
    def steps(self) -> int:
        return self.ops_performed + self.ops_skipped


@dataclass(frozen=True)
class AccState:
    """Accumulator value plus counters.

    In BAC mode ``acc`` carries ``S_max`` fractional bits. ``aux`` collects
    the signed activation sum needed to apply a pruned layer's offset.
    """

    acc: int = 0
    aux: int = 0
    stats: PEStats = PEStats()


def _guard(value: int) -> int:
    if not ACC_MIN <= value <= ACC_MAX:
        raise AccumulatorOverflow(f"accumulator value {value} exceeds 32-bit range")
    return value


def _performed(state: AccState) -> PEStats:
    return replace(state.stats, ops_performed=state.stats.ops_performed + 1)


def _skipped(state: AccState) -> PEStats:
    return replace(state.stats, ops_skipped=state.stats.ops_skipped + 1)


def mac_step(state: AccState, a: int, w: int, weight_bits: int = 4) -> AccState:
    """Multiply-accumulate one tap; zero weights skip the multiplier."""
    limit = 2 ** (weight_bits - 1) - 1
    if abs(w) > limit:
        raise ValueError(f"weight {w} exceeds {weight_bits}-bit signed range")
    if w == 0:
        return replace(state, stats=_skipped(state))
    return replace(state, acc=_guard(state.acc + a * w), stats=_performed(state))


def bac_step(
    state: AccState, a: int, code: int, bitwidth: int = 4, truncate: bool = False
) -> AccState:
    """Shift-accumulate one tap; the sign bit picks add or subtract."""
    level = decode_codeword(code, bitwidth)
    if level.is_zero:
        return replace(state, stats=_skipped(state))
    if truncate:
        partial = a >> level.shift
    else:
        partial = a << (max_shift(bitwidth) - level.shift)
    acc = state.acc + partial if level.sign > 0 else state.acc - partial
    return replace(state, acc=_guard(acc), stats=_performed(state))


def bac_offset_step(state: AccState, a: int, sign: int) -> AccState:
    """Accumulate ``sign * a`` into the offset side-channel (no op counted)."""
    if sign not in (-1, 1):
        raise ValueError("sign must be +1 or -1")
    return replace(state, aux=_guard(state.aux + sign * a))


def finalize(state: AccState, scale: float, offset: float = 0.0, frac_bits: int = 0) -> float:
    """Real-valued result ``acc * 2**-frac_bits * scale + aux * offset``."""
    return float(np.ldexp(float(state.acc), -frac_bits)) * scale + state.aux * offset


def pipeline_cycles(n: int) -> int:
    """Latency of an NxN filter: two-cycle step latency, fully pipelined."""
    return n * n + 1


def run_filter(
    window,
    codes,
    mode: Mode,
    bitwidth: int = 4,
    offset_mode: bool = False,
    truncate: bool = False,
    signed: bool = True,
    weight_bits: int | None = None,
) -> tuple[AccState, PEStats]:
    """Stream one NxN window through a freshly reset PE.

    ``codes`` are raw codewords in BAC mode and signed integer weights in
    MAC mode. Zero skipping changes the op counters but not the cycle count.
    """
    window = np.asarray(window)
    codes = np.asarray(codes)
    if window.ndim != 2 or window.shape[0] != window.shape[1]:
        raise ValueError(f"window must be square NxN, got {window.shape}")
    if codes.shape != window.shape:
        raise ValueError(f"weight shape {codes.shape} does not match window {window.shape}")
    if mode not in ("mac", "bac"):
        raise ValueError(f"unknown mode {mode!r}")
    state = AccState()
    for a, c in zip(window.reshape(-1).tolist(), codes.reshape(-1).tolist()):
        a = check_activation(a, signed)
        if mode == "mac":
            state = mac_step(state, a, int(c), weight_bits or bitwidth)
        else:
            state = bac_step(state, a, int(c), bitwidth, truncate)
            if offset_mode:
                level = decode_codeword(int(c), bitwidth)
                if not level.is_zero:
                    state = bac_offset_step(state, a, level.sign)
    stats = replace(state.stats, cycles=pipeline_cycles(window.shape[0]))
    state = replace(state, stats=stats)
    return state, stats


# ---------------------------------------------------------------------------
# batched kernels: many independent PEs, same arithmetic as the step functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchResult:
    acc: np.ndarray
    aux: np.ndarray
    ops_performed: int
    ops_skipped: int


def _guard_running(terms: np.ndarray) -> np.ndarray:
    """Sum along the last axis, checking every partial sum like the scalar path."""
    if terms.shape[-1] == 0:
        return np.zeros(terms.shape[:-1], dtype=np.int64)
    running = np.cumsum(terms, axis=-1)
    if running.size and (running.min() < ACC_MIN or running.max() > ACC_MAX):
        raise AccumulatorOverflow("accumulator exceeds 32-bit range")
    return running[..., -1]


def bac_accumulate(
    acts: np.ndarray,
    codes: np.ndarray,
    bitwidth: int = 4,
    offset_mode: bool = False,
    truncate: bool = False,
) -> BatchResult:
    """BAC over ``acts[..., taps]`` against one codeword stream ``codes[taps]``."""
    acts = np.asarray(acts, dtype=np.int64)
    sign, shift = decode_array(np.asarray(codes).reshape(-1), bitwidth)
    live = sign != 0
    a = acts[..., live]
    if truncate:
        partial = a >> shift[live].astype(np.int64)
    else:
        lshift = max_shift(bitwidth) - shift[live].astype(np.int64)
        # int64 shifts wrap silently; any nonzero term shifted >= 32 is already past int32
        wide = lshift >= 32
        if wide.any() and np.any(a[..., wide] != 0):
            raise AccumulatorOverflow("shifted activation exceeds 32-bit range")
        partial = a << np.minimum(lshift, 32)
    s = sign[live].astype(np.int64)
    acc = _guard_running(partial * s)
    aux = _guard_running(a * s) if offset_mode else np.zeros_like(acc)
    lanes = int(np.prod(acts.shape[:-1], dtype=np.int64))
    return BatchResult(acc, aux, lanes * int(live.sum()), lanes * int((~live).sum()))


def mac_accumulate(acts: np.ndarray, weights: np.ndarray) -> BatchResult:
    """MAC over ``acts[..., taps]`` against integer weights ``weights[taps]``."""
    acts = np.asarray(acts, dtype=np.int64)
    w = np.asarray(weights, dtype=np.int64).reshape(-1)
    live = w != 0
    acc = _guard_running(acts[..., live] * w[live])
    lanes = int(np.prod(acts.shape[:-1], dtype=np.int64))
    return BatchResult(acc, np.zeros_like(acc), lanes * int(live.sum()), lanes * int((~live).sum()))
