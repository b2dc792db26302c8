"""Training diagnostics: nearest-neighbour ratio (NNR) and average position (AP).

NNR asks whether a generator's samples have become indistinguishable from the
data it imitates: if the neighbourhoods of generated points are mostly made of
real points, the two sets are well mixed and the sub-GAN is treated as having
reached equilibrium. AP is a rank statistic used to pick the best
discriminator checkpoint: a good discriminator gives identified anomalies the
lowest outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError, DegenerateInputError
from .nn import as_rng

_CHUNK = 32


@dataclass(frozen=True)
class NnrParams:
    p: int = 100
    q: int = 9
    tau1: float = 0.5
    tau2: float = 0.4

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ConfigurationError("NNR p and q must be >= 1")
        for name in ("tau1", "tau2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"NNR {name} must lie in (0, 1)")


@dataclass(frozen=True)
class ApRecord:
    iteration: int
    ap_value: float
    is_best_so_far: bool


def _as_points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or len(a) == 0:
        raise DegenerateInputError(f"{name} must be a non-empty set of points")
    return a


def nnr(generated, reference, params: NnrParams | None = None, rng_seed=None) -> tuple[float, bool]:
    """Fraction of sampled generated points whose neighbourhood is mostly reference points.

    ``min(p, |A|)`` points are drawn from the generated set A without
    replacement. Each one looks at its ``q`` nearest neighbours in
    ``A ∪ B`` without itself (ties go to the lower pool index, A first);
    it counts as mixed when the share of B among them exceeds ``tau1``.
    Returns the mixed share and whether it exceeds ``tau2``.
    """
    params = params or NnrParams()
    A = _as_points(generated, "generated set")
    B = _as_points(reference, "reference set")
    if A.shape[1] != B.shape[1]:
        raise DegenerateInputError("generated and reference sets differ in dimension")
    pool = np.vstack([A, B])
    n_a = len(A)
    q = min(params.q, len(pool) - 1)
    if q < 1:
        return 0.0, False
    m = min(params.p, n_a)
    picked = np.sort(as_rng(rng_seed).choice(n_a, size=m, replace=False))

    mixed = 0
    for start in range(0, m, _CHUNK):
        idx = picked[start:start + _CHUNK]
        pts = pool[idx]
        d2 = ((pts[:, None, :] - pool[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(len(idx)), idx] = np.inf
        nbrs = np.argsort(d2, axis=1, kind="stable")[:, :q]
        ratio = (nbrs >= n_a).mean(axis=1)
        mixed += int(np.count_nonzero(ratio > params.tau1))
    value = mixed / m
    return value, value > params.tau2


def average_position(outputs, identified_flags) -> float:
    """Mean ascending rank (ties averaged) of the identified anomalies, over n."""
    out = np.asarray(outputs, dtype=np.float64).ravel()
    flags = np.asarray(identified_flags, dtype=bool).ravel()
    if out.shape != flags.shape:
        raise DegenerateInputError("outputs and flags differ in length")
    if not flags.any():
        raise DegenerateInputError("no identified anomalies to position")
    if not np.all(np.isfinite(out)):
        raise DegenerateInputError("outputs contain non-finite values")
    ranks = rankdata(out, method="average")
    return float(ranks[flags].mean() / len(out))
