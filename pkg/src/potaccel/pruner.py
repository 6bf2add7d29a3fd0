"""Dead-zone pruning for logarithmic quantisation.

Small normalised weights are zeroed, the survivors are re-normalised to
[0, 1] against their own minimum, and only then log-quantised. The minimum
survivor magnitude becomes an additive offset, so every reconstructed
nonzero weight sits outside a dead zone around zero while all PoT levels
stay available.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .quantizer import QuantConfig, QuantizedLayer, _pot_arrays, normalize
from .tensor_io import Tensor

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class PruneConfig:
    pf: float = 0.0
    quant: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self) -> None:
        if not 0.0 <= self.pf < 1.0:
            raise ValueError(f"pruning factor must be in [0, 1), got {self.pf}")
        if self.quant.family != "pot":
            raise ValueError("dead-zone pruning applies to the PoT family only")


class Survivors(NamedTuple):
    """Renormalised survivors.

    ``values`` holds signed magnitudes in [-1, 1]; ``kept`` separates pruned
    zeros from the minimum survivor, which also maps to 0.
    """

    values: Tensor
    scale: float
    offset: float
    kept: np.ndarray


def dead_zone_prune(w_n: Tensor, pf: float) -> Tensor:
    """Zero every element with ``|w| < pf``; ``w_n`` must be normalised."""
    mag = np.abs(w_n.data)
    if abs(float(mag.max()) - 1.0) > _NORM_TOL:
        raise ValueError("dead_zone_prune expects a tensor normalised to max |w| = 1")
    return Tensor(w_n.shape, np.where(mag < pf, np.float32(0), w_n.data))


def renormalize_survivors(w_p: Tensor) -> Survivors:
    """Map nonzero magnitudes affinely onto [0, 1] (min -> 0, max -> 1)."""
    data = w_p.data.astype(np.float64)
    kept = data != 0
    mag = np.abs(data[kept])
    if np.unique(mag).size < 2:
        raise ValueError("need at least two distinct nonzero magnitudes to renormalise")
    w_min = float(mag.min())
    w_max = float(mag.max())
    sf = w_max - w_min
    mapped = np.zeros_like(data)
    mapped[kept] = np.sign(data[kept]) * ((np.abs(data[kept]) - w_min) / sf)
    kept.flags.writeable = False
    return Survivors(Tensor(w_p.shape, mapped), sf, w_min, kept)


def prune_and_quantize(w: Tensor, cfg: PruneConfig) -> QuantizedLayer:
    """normalise -> prune -> renormalise survivors -> log-quantise.

    Survivors are quantised with underflow forced to ``clamp``: the smallest
    survivor maps to 0 and must land on the deepest shift, not be re-pruned.
    """
    w_n, sf_global = normalize(w)
    w_p = dead_zone_prune(w_n, cfg.pf)
    surv = renormalize_survivors(w_p)
    qcfg = QuantConfig(
        bitwidth=cfg.quant.bitwidth,
        fsr=cfg.quant.fsr,
        rounding=cfg.quant.rounding,
        underflow="clamp",
    )
    # magnitudes recomputed in float64 so the 32-bit Tensor copy does not feed rounding
    data = w_p.data.astype(np.float64)
    mapped = np.where(surv.kept, (np.abs(data) - surv.offset) / surv.scale, 0.0)
    _, shift = _pot_arrays(mapped, qcfg)
    # the minimum survivor maps to exactly 0: log2 is -inf, i.e. deepest shift
    shift = np.where(surv.kept & (mapped == 0), qcfg.s_max, shift)
    sign = np.where(surv.kept, np.where(data < 0, -1, 1), 0)
    return QuantizedLayer(
        w.shape,
        sign,
        shift,
        scale=sf_global * surv.scale * 2.0 ** qcfg.fsr,
        bitwidth=qcfg.bitwidth,
        offset=sf_global * surv.offset,
        meta={"pf": cfg.pf, "sf_global": sf_global},
    )


def sparsity(q: QuantizedLayer) -> float:
    """Fraction of zero levels."""
    return float(np.mean(q.zero_mask))
