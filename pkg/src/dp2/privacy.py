"""Per-example clipping, the Gaussian mechanism and an RDP accountant.

The accountant tracks Renyi DP of the Poisson-subsampled Gaussian mechanism
over a fixed grid of orders and converts to (epsilon, delta) with
``eps = min_a rdp(a) + log(1/delta) / (a - 1)``.
"""

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .numerics import SparseVec, l2_norm

DEFAULT_ORDERS = tuple(
    [1.25, 1.5, 1.75] + [2.0 + 0.5 * k for k in range(123)] + list(range(64, 257)))


@dataclass(frozen=True)
class PrivacyConfig:
    sigma: float
    clip_sgd: float
    clip_adaptive: float
    batch_size: int
    dataset_size: int
    delta: float = 1e-5

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.clip_sgd <= 0 or self.clip_adaptive <= 0:
            raise ValueError("clipping thresholds must be positive")
        if not 1 <= self.batch_size <= self.dataset_size:
            raise ValueError("batch size must be in [1, dataset_size]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")

    @property
    def q(self) -> float:
        return self.batch_size / self.dataset_size


# ---------------------------------------------------------------------------
# Mechanism

def clip(g, C: float):
    """Scale ``g`` by ``min(1, C / ||g||_2)``."""
    if C <= 0:
        raise ValueError("clip threshold must be positive")
    norm = l2_norm(g)
    factor = 1.0 if norm <= C else C / norm
    if isinstance(g, SparseVec):
        return g if factor == 1.0 else g.scale(factor)
    g = np.asarray(g, dtype=np.float64)
    return g.copy() if factor == 1.0 else g * factor


@dataclass
class ClipStats:
    clip_fraction: float
    mean_norm: float


def clip_and_sum(grads, C: float, denom=None):
    """Sum of per-example gradients after optional preconditioning and clipping.

    ``grads`` is a CSR matrix with one example per row; ``denom`` is the
    dense per-coordinate divisor applied to every row before clipping.
    Rows are summed in example order.
    """
    data = grads.data if denom is None else grads.data / denom[grads.indices]
    b = grads.shape[0]
    rows = np.repeat(np.arange(b), np.diff(grads.indptr))
    norms = np.sqrt(np.bincount(rows, weights=data * data, minlength=b))
    over = norms > C
    factors = np.ones(b)
    factors[over] = C / norms[over]
    total = np.bincount(grads.indices, weights=data * factors[rows], minlength=grads.shape[1])
    return total, ClipStats(float(over.mean()), float(norms.mean()))


def gaussian_mechanism(total, sigma: float, C: float, rng) -> np.ndarray:
    """Add i.i.d. N(0, (sigma*C)^2) noise to every coordinate of ``total``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    total = np.asarray(total, dtype=np.float64)
    if sigma == 0:
        return total.copy()
    return total + (sigma * C) * rng.standard_normal(total.shape)


# ---------------------------------------------------------------------------
# RDP of the subsampled Gaussian mechanism

def _log_add(a: float, b: float) -> float:
    lo, hi = min(a, b), max(a, b)
    if lo == -np.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    # log(exp(a) - exp(b)), requires a >= b
    if b == -np.inf:
        return a
    if a <= b:
        return -np.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2 * sigma ** 2)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    log_a0, log_a1 = -np.inf, -np.inf
    z0 = sigma ** 2 * math.log(1.0 / q - 1.0) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * log_q + j * log_1mq
        log_t1 = log_coef + j * log_q + i * log_1mq
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma ** 2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma ** 2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 or i > 10_000:
            break
    return _log_add(log_a0, log_a1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP at order ``alpha`` of one release with sampling rate ``q``."""
    if not 0 <= q <= 1:
        raise ValueError("sampling rate must be in [0, 1]")
    if sigma <= 0:
        return np.inf
    if q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2 * sigma ** 2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(log_a, 0.0) / (alpha - 1)


@functools.lru_cache(maxsize=256)
def _rdp_vector(q: float, sigma: float, orders: tuple) -> np.ndarray:
    out = np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders])
    out.setflags(write=False)
    return out


def compute_rdp(q: float, sigma: float, steps: int = 1, orders=DEFAULT_ORDERS) -> np.ndarray:
    return steps * _rdp_vector(float(q), float(sigma), tuple(orders))


def eps_from_rdp(rdp, orders, delta: float) -> float:
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    orders = np.asarray(orders, dtype=float)
    eps = np.asarray(rdp) + math.log(1.0 / delta) / (orders - 1)
    return float(np.min(eps))


@dataclass
class PrivacyLedger:
    """Running RDP totals for one training run.

    A release with ``sigma == 0`` marks the ledger non-private: later
    ``epsilon`` queries report ``inf`` instead of raising.
    """
    orders: tuple = DEFAULT_ORDERS
    rdp_accum: np.ndarray = None
    steps: int = 0
    nonprivate: bool = False
    releases: list = field(default_factory=list)

    def __post_init__(self):
        if self.rdp_accum is None:
            self.rdp_accum = np.zeros(len(self.orders))

    def step(self, q: float, sigma: float, count: int = 1) -> "PrivacyLedger":
        if sigma == 0:
            self.nonprivate = True
        else:
            self.rdp_accum = self.rdp_accum + compute_rdp(q, sigma, count, self.orders)
        self.steps += count
        if self.releases and self.releases[-1][:2] == (q, sigma):
            self.releases[-1] = (q, sigma, self.releases[-1][2] + count)
        else:
            self.releases.append((q, sigma, count))
        return self

    def epsilon(self, delta: float) -> float:
        if self.nonprivate:
            return math.inf
        if self.steps == 0:
            return 0.0
        return eps_from_rdp(self.rdp_accum, self.orders, delta)


def ledger_step(ledger: PrivacyLedger, q: float, sigma: float) -> PrivacyLedger:
    return ledger.step(q, sigma)


def epsilon_for(ledger: PrivacyLedger, delta: float) -> float:
    return ledger.epsilon(delta)


def compute_epsilon(q: float, sigma: float, steps: int, delta: float,
                    orders=DEFAULT_ORDERS) -> float:
    """(epsilon, delta) spent by ``steps`` homogeneous releases."""
    if steps == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    return eps_from_rdp(compute_rdp(q, sigma, steps, orders), orders, delta)


def calibrate_sigma(target_eps: float, delta: float, q: float, steps: int,
                    lo: float = 0.05, hi: float = 200.0, tol: float = 1e-3) -> float:
    """Smallest noise multiplier (to within ``tol``) whose epsilon is <= target."""
    if target_eps <= 0:
        raise ValueError("target epsilon must be positive")
    if compute_epsilon(q, hi, steps, delta) > target_eps:
        raise ValueError(f"target epsilon {target_eps} unreachable with sigma <= {hi}")
    if compute_epsilon(q, lo, steps, delta) <= target_eps:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if compute_epsilon(q, mid, steps, delta) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi
