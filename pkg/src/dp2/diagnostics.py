"""Run-time diagnostics: gradient-similarity ratio, preconditioner snapshots
and the second-moment bound check.

The similarity ratio at step t is::

    ||g_t||_1 / (||G / s||_1 + d * eps)

where ``G / s`` is the averaged accumulator that last refreshed the
preconditioner. Using the clean batch gradient for ``g_t`` reads private
data outside the mechanism, so runs that log it carry no formal privacy
guarantee for the emitted metrics.
"""

import math
from dataclasses import dataclass, field

import numpy as np

QUANTILES = (1, 25, 50, 75, 99)


@dataclass
class HsEstimate:
    d: int
    eps_adapt: float
    s: int
    ratios: list = field(default_factory=list)
    noisy_ratios: list = field(default_factory=list)
    running_max: float = 0.0

    def to_dict(self) -> dict:
        return {"d": self.d, "eps_adapt": self.eps_adapt, "s": self.s,
                "ratios": list(self.ratios), "noisy_ratios": list(self.noisy_ratios),
                "running_max": self.running_max}


def hs_update(est: HsEstimate, clean_grad_l1: float, accum_l1_over_s: float,
              noisy_grad_l1: float = None) -> HsEstimate:
    """Append one ratio (and optionally its noisy-numerator twin) to ``est``."""
    if accum_l1_over_s < 0 or clean_grad_l1 < 0:
        raise ValueError("L1 norms must be nonnegative")
    denom = accum_l1_over_s + est.d * est.eps_adapt
    ratio = clean_grad_l1 / denom if clean_grad_l1 > 0 else 0.0
    est.ratios.append(ratio)
    est.running_max = max(est.running_max, ratio)
    if noisy_grad_l1 is not None:
        est.noisy_ratios.append(noisy_grad_l1 / denom if noisy_grad_l1 > 0 else 0.0)
    return est


@dataclass
class PrecondSnapshot:
    t: int
    bin_edges: np.ndarray
    counts: np.ndarray
    quantiles: dict

    def to_dict(self) -> dict:
        return {"t": self.t, "bin_edges": self.bin_edges.tolist(),
                "counts": self.counts.tolist(),
                "quantiles": {str(k): v for k, v in self.quantiles.items()}}


def snapshot_preconditioner(v, t: int, bins: int = 30, floor: float = 1e-20) -> PrecondSnapshot:
    """Log-spaced histogram and quantiles of the second-moment estimate.

    Values below ``floor`` (including exact zeros) land in the first bin so
    the counts always sum to ``len(v)``.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("preconditioner values must be nonnegative")
    top = max(float(v.max(initial=0.0)), floor * 10)
    edges = np.logspace(math.log10(floor), math.log10(top), bins + 1)
    counts, _ = np.histogram(np.clip(v, edges[0], edges[-1]), bins=edges)
    qs = np.percentile(v, QUANTILES) if v.size else np.zeros(len(QUANTILES))
    return PrecondSnapshot(t, edges, counts, {q: float(x) for q, x in zip(QUANTILES, qs)})


def moment_bound(C: float, sigma: float, s: int, b: int) -> float:
    """``C^2 + sigma^2 C^2 / (s b^2)``, the bound on each E[v_j]."""
    return C ** 2 + sigma ** 2 * C ** 2 / (s * b ** 2)


def lemma1_check(v_series, C: float, sigma: float, s: int, b: int, slack: float = 0.05) -> dict:
    """Compare the empirical mean of ``v`` against :func:`moment_bound`.

    ``v_series`` is a sequence of ``v`` snapshots. Passes when the mean over
    coordinates and snapshots is at most ``bound * (1 + slack)`` plus three
    standard errors of that mean.
    """
    arr = np.asarray([np.asarray(v, dtype=float) for v in v_series])
    if arr.size == 0:
        raise ValueError("empty v series")
    bound = moment_bound(C, sigma, s, b)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    ok = mean <= bound * (1 + slack) + 3 * stderr
    return {"bound": bound, "empirical_mean": mean, "std_error": stderr, "pass": bool(ok)}
