"""Private and non-private update rules, including delayed preconditioning.

Every private step follows the same pipeline: per-example gradients,
optional preconditioning, clipping, Gaussian noise on the clipped sum,
division by the batch size, parameter update. The DP2 engine alternates
``s1`` private SGD steps, whose averaged noisy gradients refresh the
second-moment estimate ``v``, with ``s2`` private adaptive steps that
precondition with the stale ``sqrt(v) + eps``.

All ``*_step`` functions are pure: they return new state and parameter
objects and never modify their inputs.
"""

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models
from .numerics import axpy, ew_div, ew_square, ew_sqrt_add, l1_norm, l2_norm
from .privacy import PrivacyConfig, PrivacyLedger, clip_and_sum, gaussian_mechanism

SGD, ADAPTIVE = "sgd", "adaptive"


class UpdateRule(enum.Enum):
    """How the second-moment estimate absorbs a new squared gradient."""
    RMSPROP = "rmsprop"
    ADAGRAD = "adagrad"
    YOGI = "yogi"

    def apply(self, v: np.ndarray, sq: np.ndarray, beta: float) -> np.ndarray:
        if self is UpdateRule.RMSPROP:
            out = beta * v + (1.0 - beta) * sq
        elif self is UpdateRule.ADAGRAD:
            out = v + sq
        else:
            out = v + (1.0 - beta) * np.sign(sq - v) * sq
        return np.maximum(out, 0.0)


@dataclass(frozen=True)
class LrSchedule:
    """Per-phase constant rates, or ``alpha0 / sqrt(t + 1)`` when ``inv_sqrt``."""
    sgd: float
    adaptive: float
    inv_sqrt: bool = False

    def __post_init__(self):
        if self.sgd <= 0 or self.adaptive <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def constant(cls, sgd: float, adaptive: Optional[float] = None) -> "LrSchedule":
        return cls(sgd, sgd if adaptive is None else adaptive)

    @classmethod
    def invsqrt(cls, alpha0: float) -> "LrSchedule":
        return cls(alpha0, alpha0, inv_sqrt=True)

    def rate(self, t: int, phase: str) -> float:
        base = self.sgd if phase == SGD else self.adaptive
        return base / math.sqrt(t + 1) if self.inv_sqrt else base


@dataclass(frozen=True)
class StepReport:
    t: int
    phase: str
    lr: float
    clip_fraction: float
    grad_l2_mean: float
    update_l2: float
    D_l1: float
    mechanism_calls: int
    clean_grad_l1: float = float("nan")
    noisy_grad_l1: float = float("nan")
    v_updated: bool = False


@dataclass(frozen=True)
class DpSquaredState:
    """Optimizer state for the delayed-preconditioner engine.

    ``last_moment_l1`` is ``||G / s1||_1`` for the accumulator that last
    refreshed ``v``; diagnostics use it, the update rule does not.
    """
    G: np.ndarray
    v: np.ndarray
    s1: int
    s2: int
    beta: float = 0.9
    eps_adapt: float = 1e-5
    t: int = 0
    bias_correction: bool = False
    v_updates: int = 0
    last_moment_l1: float = float("nan")

    def __post_init__(self):
        if self.s1 < 1 or self.s2 < 0:
            raise ValueError("need s1 >= 1 and s2 >= 0")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must be in (0, 1)")
        if self.eps_adapt <= 0:
            raise ValueError("eps_adapt must be positive")

    @classmethod
    def init(cls, dim: int, s1: int, s2: Optional[int] = None, **kw) -> "DpSquaredState":
        return cls(G=np.zeros(dim), v=np.zeros(dim), s1=s1, s2=s1 if s2 is None else s2, **kw)

    @property
    def cycle(self) -> int:
        return self.s1 + self.s2

    def phase_at(self, t: int) -> str:
        return SGD if t % self.cycle < self.s1 else ADAPTIVE

    @property
    def phase(self) -> str:
        return self.phase_at(self.t)

    def denominator(self) -> np.ndarray:
        return ew_sqrt_add(self.v, self.eps_adapt)


@dataclass(frozen=True)
class AdaptiveState:
    """State of a vanilla (every-step) adaptive method."""
    v: np.ndarray
    beta: float = 0.9
    eps_adapt: float = 1e-5
    t: int = 0

    @classmethod
    def init(cls, dim: int, **kw) -> "AdaptiveState":
        return cls(v=np.zeros(dim), **kw)


def bias_corrected_moment(G: np.ndarray, s1: int, sigma: float, C: float, b: int) -> np.ndarray:
    """``max(0, (G/s1)^2 - sigma^2 C^2 / (s1 b^2))`` coordinate-wise."""
    if s1 < 1:
        raise ValueError("s1 must be >= 1")
    sq = ew_square(np.asarray(G) / s1)
    return np.maximum(sq - sigma ** 2 * C ** 2 / (s1 * b ** 2), 0.0)


def _privatize(grads, C, sigma, rng, denom=None):
    total, stats = clip_and_sum(grads, C, denom)
    return gaussian_mechanism(total, sigma, C, rng) / grads.shape[0], stats


def _clean_l1(grads) -> float:
    return float(np.abs(np.asarray(grads.sum(axis=0))).sum()) / grads.shape[0]


def _spend(ledger, privacy, calls):
    if ledger is not None:
        ledger.step(privacy.q, privacy.sigma, calls)


def _close_sgd_phase(state: DpSquaredState, privacy: PrivacyConfig, rule: UpdateRule,
                     correct: Optional[bool] = None):
    # ``state.t`` is the index of the next step; refresh v when it opens an
    # adaptive phase (or, with s2 = 0, a new cycle).
    if state.t % state.cycle != state.s1 % state.cycle:
        return state, False
    G, s1 = state.G, state.s1
    correct = state.bias_correction if correct is None else correct
    if correct:
        sq = bias_corrected_moment(G, s1, privacy.sigma, privacy.clip_sgd, privacy.batch_size)
    else:
        sq = ew_square(G / s1)
    return dataclasses.replace(
        state, v=rule.apply(state.v, sq, state.beta), G=np.zeros_like(G),
        v_updates=state.v_updates + 1, last_moment_l1=l1_norm(G) / s1), True


# ---------------------------------------------------------------------------
# Private methods

def dp2_step(state: DpSquaredState, params: models.ModelParams, batch,
             privacy: PrivacyConfig, rule: UpdateRule, lr: LrSchedule, rng,
             ledger: Optional[PrivacyLedger] = None, track_clean: bool = False):
    """One iteration of DP2 with the given line-5 update rule.

    The refresh of ``v`` that opens an adaptive phase is applied at the end
    of the step completing the SGD phase; the trajectory is unchanged and
    ``v_updates`` then counts completed SGD phases.
    """
    t = state.t
    pos = t % state.cycle
    G, v = state.G, state.v
    if pos == 0:
        G = np.zeros_like(G)

    phase = SGD if pos < state.s1 else ADAPTIVE
    grads = models.batch_grads(params, batch)
    if phase == SGD:
        C, denom, d_l1 = privacy.clip_sgd, None, float(v.size)
    else:
        C = privacy.clip_adaptive
        denom = ew_sqrt_add(v, state.eps_adapt)
        d_l1 = l1_norm(denom)
    g_tilde, stats = _privatize(grads, C, privacy.sigma, rng, denom)
    _spend(ledger, privacy, 1)

    alpha = lr.rate(t, phase)
    new_params = params.with_flat(axpy(-alpha, g_tilde, params.flat))
    new_state, updated = _close_sgd_phase(
        dataclasses.replace(state, t=t + 1, G=G + g_tilde), privacy, rule)
    report = StepReport(
        t=t, phase=phase, lr=alpha, clip_fraction=stats.clip_fraction,
        grad_l2_mean=stats.mean_norm, update_l2=l2_norm(g_tilde), D_l1=d_l1,
        mechanism_calls=1, clean_grad_l1=_clean_l1(grads) if track_clean else float("nan"),
        noisy_grad_l1=l1_norm(g_tilde), v_updated=updated)
    return new_state, new_params, report


def dp_sgd_step(params: models.ModelParams, batch, privacy: PrivacyConfig,
                lr: LrSchedule, rng, ledger: Optional[PrivacyLedger] = None, t: int = 0):
    """DP-SGD: clip raw per-example gradients, noise the sum, step."""
    grads = models.batch_grads(params, batch)
    g_tilde, stats = _privatize(grads, privacy.clip_sgd, privacy.sigma, rng)
    _spend(ledger, privacy, 1)
    alpha = lr.rate(t, SGD)
    new_params = params.with_flat(axpy(-alpha, g_tilde, params.flat))
    report = StepReport(
        t=t, phase=SGD, lr=alpha, clip_fraction=stats.clip_fraction,
        grad_l2_mean=stats.mean_norm, update_l2=l2_norm(g_tilde), D_l1=float(g_tilde.size),
        mechanism_calls=1, noisy_grad_l1=l1_norm(g_tilde))
    return new_params, report


def dp_adaptive_step(params: models.ModelParams, state: AdaptiveState, batch,
                     privacy: PrivacyConfig, rule: UpdateRule, lr: LrSchedule, rng,
                     ledger: Optional[PrivacyLedger] = None):
    """Vanilla private adaptive step: privatize, update ``v`` from the noisy
    gradient, then precondition the noisy gradient."""
    grads = models.batch_grads(params, batch)
    g_tilde, stats = _privatize(grads, privacy.clip_sgd, privacy.sigma, rng)
    _spend(ledger, privacy, 1)
    v = rule.apply(state.v, ew_square(g_tilde), state.beta)
    denom = ew_sqrt_add(v, state.eps_adapt)
    step = ew_div(g_tilde, denom)
    alpha = lr.rate(state.t, ADAPTIVE)
    new_params = params.with_flat(axpy(-alpha, step, params.flat))
    report = StepReport(
        t=state.t, phase=ADAPTIVE, lr=alpha, clip_fraction=stats.clip_fraction,
        grad_l2_mean=stats.mean_norm, update_l2=l2_norm(step), D_l1=l1_norm(denom),
        mechanism_calls=1, noisy_grad_l1=l1_norm(g_tilde))
    return new_params, dataclasses.replace(state, v=v, t=state.t + 1), report


def ablation_variant1_step(state: DpSquaredState, params: models.ModelParams, batch,
                           privacy: PrivacyConfig, rule: UpdateRule, lr: LrSchedule, rng,
                           ledger: Optional[PrivacyLedger] = None):
    """Extra-query variant: every step privatizes the raw gradient (clip_sgd)
    into the accumulator; every ``s1``-th step refreshes ``v`` and steps with
    that gradient, all other steps release a second, preconditioned query
    (clip_adaptive) and step with it."""
    t, s = state.t, state.s1
    grads = models.batch_grads(params, batch)
    g_raw, raw_stats = _privatize(grads, privacy.clip_sgd, privacy.sigma, rng)
    G = state.G + g_raw
    v, v_updates, last_l1 = state.v, state.v_updates, state.last_moment_l1
    if t % s == 0:
        v = rule.apply(v, ew_square(G / s), state.beta)
        last_l1 = l1_norm(G) / s
        v_updates += 1
        G = np.zeros_like(G)
        phase, g_bar, stats, calls, d_l1 = SGD, g_raw, raw_stats, 1, float(v.size)
    else:
        denom = ew_sqrt_add(v, state.eps_adapt)
        g_bar, stats = _privatize(grads, privacy.clip_adaptive, privacy.sigma, rng, denom)
        phase, calls, d_l1 = ADAPTIVE, 2, l1_norm(denom)
    _spend(ledger, privacy, calls)
    alpha = lr.rate(t, phase)
    new_params = params.with_flat(axpy(-alpha, g_bar, params.flat))
    new_state = dataclasses.replace(
        state, t=t + 1, G=G, v=v, v_updates=v_updates, last_moment_l1=last_l1)
    report = StepReport(
        t=t, phase=phase, lr=alpha, clip_fraction=stats.clip_fraction,
        grad_l2_mean=stats.mean_norm, update_l2=l2_norm(g_bar), D_l1=d_l1,
        mechanism_calls=calls, noisy_grad_l1=l1_norm(g_bar), v_updated=(t % s == 0))
    return new_state, new_params, report


def ablation_variant2_step(state: DpSquaredState, params: models.ModelParams, batch,
                           privacy: PrivacyConfig, rule: UpdateRule, lr: LrSchedule, rng,
                           ledger: Optional[PrivacyLedger] = None):
    """DP2 with noise added before preconditioning.

    The raw gradients are clipped at ``clip_sgd`` in both phases and the
    noisy mean is divided by ``sqrt(v) + eps`` afterwards.
    """
    t = state.t
    pos = t % state.cycle
    G, v = state.G, state.v
    if pos == 0:
        G = np.zeros_like(G)
    phase = SGD if pos < state.s1 else ADAPTIVE
    grads = models.batch_grads(params, batch)
    g_tilde, stats = _privatize(grads, privacy.clip_sgd, privacy.sigma, rng)
    _spend(ledger, privacy, 1)
    d_l1 = float(v.size)
    if phase == ADAPTIVE:
        denom = ew_sqrt_add(v, state.eps_adapt)
        g_tilde = ew_div(g_tilde, denom)
        d_l1 = l1_norm(denom)
    alpha = lr.rate(t, phase)
    new_params = params.with_flat(axpy(-alpha, g_tilde, params.flat))
    new_state, updated = _close_sgd_phase(
        dataclasses.replace(state, t=t + 1, G=G + g_tilde), privacy, rule, correct=False)
    report = StepReport(
        t=t, phase=phase, lr=alpha, clip_fraction=stats.clip_fraction,
        grad_l2_mean=stats.mean_norm, update_l2=l2_norm(g_tilde), D_l1=d_l1,
        mechanism_calls=1, noisy_grad_l1=l1_norm(g_tilde), v_updated=updated)
    return new_state, new_params, report


# ---------------------------------------------------------------------------
# Non-private reference methods. These compute the batch-mean gradient
# directly and share no code with the private pipeline above.

def sgd_step(params: models.ModelParams, batch, lr: float):
    return params.with_flat(params.flat - lr * models.mean_grad(params, batch))


def rmsprop_step(params: models.ModelParams, state: AdaptiveState, batch, lr: float):
    g = models.mean_grad(params, batch)
    v = state.beta * state.v + (1.0 - state.beta) * g * g
    w = params.flat - lr * g / (np.sqrt(v) + state.eps_adapt)
    return params.with_flat(w), dataclasses.replace(state, v=v, t=state.t + 1)


def delayed_rmsprop_step(params: models.ModelParams, state: DpSquaredState, batch,
                         lr_sgd: float, lr_adaptive: float):
    """Alternate ``s1`` SGD steps and ``s2`` RMSProp steps whose preconditioner
    is refreshed from the mean of the preceding SGD gradients."""
    t = state.t
    pos = t % (state.s1 + state.s2)
    G, v = state.G, state.v
    if pos == 0:
        G = np.zeros_like(G)
    elif pos == state.s1:
        v = state.beta * v + (1.0 - state.beta) * (G / state.s1) ** 2
        G = np.zeros_like(G)
    g = models.mean_grad(params, batch)
    if pos < state.s1:
        update, lr = g, lr_sgd
    else:
        update, lr = g / (np.sqrt(v) + state.eps_adapt), lr_adaptive
    new_state = dataclasses.replace(state, t=t + 1, G=G + update, v=v)
    return params.with_flat(params.flat - lr * update), new_state


# ---------------------------------------------------------------------------
# Uniform driver used by the training loop.

PRIVATE_METHODS = (
    "dpsgd", "dp-rmsprop", "dp-adagrad", "dp2-rmsprop", "dp2-adagrad", "dp2-yogi",
    "ablation1", "ablation2")
NONPRIVATE_METHODS = ("sgd", "rmsprop", "delayed-rmsprop")
METHODS = PRIVATE_METHODS + NONPRIVATE_METHODS

_RULES = {"rmsprop": UpdateRule.RMSPROP, "adagrad": UpdateRule.ADAGRAD, "yogi": UpdateRule.YOGI}


class Method:
    """Stateful wrapper binding one method name to its step function.

    ``step(params, batch, rng)`` returns ``(params, report)``; optimizer
    state and the privacy ledger live on the instance.
    """

    def __init__(self, name: str, dim: int, privacy: PrivacyConfig, lr: LrSchedule,
                 beta: float = 0.9, eps_adapt: float = 1e-5, s1: int = 1,
                 s2: Optional[int] = None, bias_correction: bool = False,
                 ledger: Optional[PrivacyLedger] = None, track_clean: bool = False):
        if name not in METHODS:
            raise ValueError(f"unknown optimizer {name!r}; choose from {', '.join(METHODS)}")
        self.name = name
        self.privacy = privacy
        self.lr = lr
        self.ledger = ledger if ledger is not None else PrivacyLedger()
        self.track_clean = track_clean
        self.private = name in PRIVATE_METHODS
        self.rule = _RULES.get(name.split("-")[-1], UpdateRule.RMSPROP)
        self.t = 0
        if name in ("dp-rmsprop", "dp-adagrad", "rmsprop"):
            self.state = AdaptiveState.init(dim, beta=beta, eps_adapt=eps_adapt)
        elif name in ("dpsgd", "sgd"):
            self.state = None
        else:
            self.state = DpSquaredState.init(dim, s1, s2, beta=beta, eps_adapt=eps_adapt,
                                             bias_correction=bias_correction)

    def step(self, params, batch, rng):
        name, p, lr = self.name, self.privacy, self.lr
        if name == "dpsgd":
            params, report = dp_sgd_step(params, batch, p, lr, rng, self.ledger, t=self.t)
        elif name in ("dp-rmsprop", "dp-adagrad"):
            params, self.state, report = dp_adaptive_step(
                params, self.state, batch, p, self.rule, lr, rng, self.ledger)
        elif name.startswith("dp2-"):
            self.state, params, report = dp2_step(
                self.state, params, batch, p, self.rule, lr, rng, self.ledger,
                track_clean=self.track_clean)
        elif name == "ablation1":
            self.state, params, report = ablation_variant1_step(
                self.state, params, batch, p, self.rule, lr, rng, self.ledger)
        elif name == "ablation2":
            self.state, params, report = ablation_variant2_step(
                self.state, params, batch, p, self.rule, lr, rng, self.ledger)
        else:
            params, report = self._nonprivate_step(params, batch)
        self.t += 1
        return params, report

    def _nonprivate_step(self, params, batch):
        t = self.t
        if self.name == "sgd":
            alpha = self.lr.rate(t, SGD)
            params, phase = sgd_step(params, batch, alpha), SGD
        elif self.name == "rmsprop":
            alpha = self.lr.rate(t, ADAPTIVE)
            params, self.state = rmsprop_step(params, self.state, batch, alpha)
            phase = ADAPTIVE
        else:
            phase = self.state.phase
            params, self.state = delayed_rmsprop_step(
                params, self.state, batch, self.lr.rate(t, SGD), self.lr.rate(t, ADAPTIVE))
            alpha = self.lr.rate(t, phase)
        nan = float("nan")
        return params, StepReport(t=t, phase=phase, lr=alpha, clip_fraction=0.0,
                                  grad_l2_mean=nan, update_l2=nan, D_l1=nan, mechanism_calls=0)

    @property
    def v(self):
        return None if self.state is None else self.state.v
