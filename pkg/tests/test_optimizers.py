import math

import numpy as np
import pytest
from scipy import sparse

from dp2 import models
from dp2.data import SparseDataset, SynthSpec, gen_synthetic, sample_batch
from dp2.optimizers import (ADAPTIVE, SGD, AdaptiveState, DpSquaredState, LrSchedule, Method,
                            UpdateRule, ablation_variant1_step, ablation_variant2_step,
                            bias_corrected_moment, delayed_rmsprop_step, dp2_step,
                            dp_adaptive_step, dp_sgd_step, rmsprop_step, sgd_step)
from dp2.privacy import PrivacyConfig, PrivacyLedger
from oracles import FixedNoise, logreg_trace

INF = math.inf


@pytest.fixture(scope="module")
def task():
    train, _ = gen_synthetic(SynthSpec(n=400, d=40, sparsity=6, seed=3, n_test=10))
    rng = np.random.default_rng(0)
    batches = [sample_batch(train, 16, rng) for _ in range(500)]
    return train, batches


def open_privacy(n=400, b=16):
    return PrivacyConfig(0.0, INF, INF, b, n)


def test_dp2_without_noise_or_clipping_is_delayed_rmsprop(task):
    train, batches = task
    kind = models.LogReg(train.d)
    lr = LrSchedule.constant(0.5, 0.05)
    state = DpSquaredState.init(kind.size, 10, beta=0.9, eps_adapt=1e-3)
    ref_state = DpSquaredState.init(kind.size, 10, beta=0.9, eps_adapt=1e-3)
    p = ref = models.init_params(kind)
    for batch in batches:
        state, p, _ = dp2_step(state, p, batch, open_privacy(), UpdateRule.RMSPROP, lr, None)
        ref, ref_state = delayed_rmsprop_step(ref, ref_state, batch, 0.5, 0.05)
        np.testing.assert_allclose(p.flat, ref.flat, rtol=0, atol=1e-12)
    assert state.v_updates == 25


def test_dp_sgd_without_noise_is_sgd(task):
    train, batches = task
    p = ref = models.init_params(models.LogReg(train.d))
    for t, batch in enumerate(batches):
        p, _ = dp_sgd_step(p, batch, open_privacy(), LrSchedule.constant(0.3), None, t=t)
        ref = sgd_step(ref, batch, 0.3)
        np.testing.assert_allclose(p.flat, ref.flat, rtol=0, atol=1e-12)


def test_dp_rmsprop_without_noise_is_rmsprop(task):
    train, batches = task
    kind = models.LogReg(train.d)
    p = ref = models.init_params(kind)
    st = ref_st = AdaptiveState.init(kind.size, beta=0.9, eps_adapt=1e-3)
    for batch in batches:
        p, st, _ = dp_adaptive_step(p, st, batch, open_privacy(), UpdateRule.RMSPROP,
                                    LrSchedule.constant(0.01), None)
        ref, ref_st = rmsprop_step(ref, ref_st, batch, 0.01)
        np.testing.assert_allclose(p.flat, ref.flat, rtol=0, atol=1e-12)


def test_rmsprop_one_dimensional_trace():
    # one feature plus bias, textbook RMSProp recursion by hand
    ds = SparseDataset(sparse.csr_matrix(np.array([[2.0]])), np.array([1.0]))
    p = models.ModelParams(models.LogReg(1), np.zeros(2))
    st = AdaptiveState.init(2, beta=0.9, eps_adapt=1e-8)
    w, b, v = 0.0, 0.0, np.zeros(2)
    for _ in range(3):
        p, st, _ = dp_adaptive_step(p, st, ds, open_privacy(1, 1), UpdateRule.RMSPROP,
                                    LrSchedule.constant(0.1), None)
        r = 1 / (1 + math.exp(-(2 * w + b))) - 1
        g = np.array([2 * r, r])
        v = 0.9 * v + 0.1 * g * g
        w, b = np.array([w, b]) - 0.1 * g / (np.sqrt(v) + 1e-8)
        np.testing.assert_allclose(p.flat, [w, b], atol=1e-14)


def test_first_sgd_phase_equals_dp_sgd(task):
    train, batches = task
    kind = models.LogReg(train.d)
    priv = PrivacyConfig(1.0, 0.5, 2.0, 16, 400)
    lr = LrSchedule.constant(0.4, 0.01)
    state = DpSquaredState.init(kind.size, 12)
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    p = q = models.init_params(kind)
    for t, batch in enumerate(batches[:12]):
        state, p, rep = dp2_step(state, p, batch, priv, UpdateRule.RMSPROP, lr, r1)
        q, _ = dp_sgd_step(q, batch, priv, lr, r2, t=t)
        assert rep.phase == SGD
        np.testing.assert_array_equal(p.flat, q.flat)


def test_hand_trace_two_parameter_toy():
    xs = [1.5, -0.5, 2.0, 0.3]
    ys = [1, 0, 1, 0]
    ds = SparseDataset(sparse.csr_matrix(np.array(xs)[:, None]), np.array(ys, dtype=float))
    batches_idx = [[0, 1], [2, 3], [0, 2], [1, 3], [0, 3], [1, 2]]
    rng = np.random.default_rng(42)
    noise = rng.standard_normal((6, 2))
    hp = dict(s1=2, s2=2, beta=0.9, eps=1e-3, lr_sgd=0.5, lr_ada=0.05,
              clip_sgd=0.3, clip_ada=2.0, sigma=0.7)
    expected = logreg_trace(0.2, -0.1, xs, ys, batches_idx, noise, **hp)

    priv = PrivacyConfig(0.7, 0.3, 2.0, 2, 4)
    state = DpSquaredState.init(2, 2, 2, beta=0.9, eps_adapt=1e-3)
    p = models.ModelParams(models.LogReg(1), np.array([0.2, -0.1]))
    fake = FixedNoise(noise)
    phases = []
    for t, idx in enumerate(batches_idx):
        state, p, rep = dp2_step(state, p, ds.subset(idx), priv, UpdateRule.RMSPROP,
                                 LrSchedule.constant(0.5, 0.05), fake)
        phases.append(rep.phase)
        np.testing.assert_allclose(p.flat, expected[t], rtol=0, atol=1e-10)
    assert phases == [SGD, SGD, ADAPTIVE, ADAPTIVE, SGD, SGD]
    assert state.v_updates == 2


def test_phase_schedule_and_update_count(task):
    train, batches = task
    kind = models.LogReg(train.d)
    priv = PrivacyConfig(1.0, 0.5, 1.0, 16, 400)
    for s1, s2 in [(3, 5), (4, 4), (7, 1), (5, 0)]:
        state = DpSquaredState.init(kind.size, s1, s2)
        p, rng = models.init_params(kind), np.random.default_rng(0)
        phases = []
        for T, batch in enumerate(batches[:60], start=1):
            state, p, rep = dp2_step(state, p, batch, priv, UpdateRule.RMSPROP,
                                     LrSchedule.constant(0.1), rng)
            phases.append(rep.phase)
            assert state.v_updates == (T + s2) // (s1 + s2)
            assert np.all(state.v >= 0)
        cyc = s1 + s2
        for start in range(0, 60 - cyc + 1, cyc):
            assert phases[start:start + cyc] == [SGD] * s1 + [ADAPTIVE] * s2


def test_adaptive_phase_accumulator_is_discarded(task):
    train, batches = task
    kind = models.LogReg(train.d)
    priv = PrivacyConfig(1.0, 0.5, 1.0, 16, 400)
    state, p, rng = DpSquaredState.init(kind.size, 2, 3), models.init_params(kind), np.random.default_rng(1)
    Gs, released = [], []
    for batch in batches[:10]:
        state, p_next, rep = dp2_step(state, p, batch, priv, UpdateRule.RMSPROP,
                                      LrSchedule.constant(0.1), rng)
        released.append((p.flat - p_next.flat) / rep.lr)
        Gs.append(state.G.copy())
        p = p_next
    assert not Gs[1].any()  # SGD phase closed, v refreshed
    np.testing.assert_allclose(Gs[4], released[2] + released[3] + released[4], atol=1e-12)
    # a new cycle starts at step 5 and forgets the adaptive-phase sum
    np.testing.assert_allclose(Gs[5], released[5], atol=1e-12)
    assert state.v_updates == 2


def test_adagrad_v_is_monotone(task):
    train, batches = task
    kind = models.LogReg(train.d)
    priv = PrivacyConfig(1.0, 0.5, 1.0, 16, 400)
    state, p, rng = DpSquaredState.init(kind.size, 3), models.init_params(kind), np.random.default_rng(2)
    prev = state.v
    for batch in batches[:60]:
        state, p, _ = dp2_step(state, p, batch, priv, UpdateRule.ADAGRAD, LrSchedule.constant(0.2), rng)
        assert np.all(state.v >= prev)
        prev = state.v


def test_yogi_stays_nonnegative_and_moves_toward_target():
    v = np.array([0.0, 1.0, 4.0])
    sq = np.array([1.0, 1.0, 0.25])
    out = UpdateRule.YOGI.apply(v, sq, 0.9)
    np.testing.assert_allclose(out, [0.1, 1.0, 4.0 - 0.025])
    big = UpdateRule.YOGI.apply(np.array([1e-3]), np.array([1e-4]), 0.0)
    assert big[0] >= 0


def test_huge_eps_reduces_adaptive_step_to_sgd_direction(task):
    train, batches = task
    kind = models.LogReg(train.d)
    priv = PrivacyConfig(1.0, 0.5, 0.5, 16, 400)
    p0 = models.ModelParams(kind, np.random.default_rng(0).standard_normal(kind.size) * 0.1)
    st = AdaptiveState.init(kind.size, eps_adapt=1e6)
    p1, _, _ = dp_adaptive_step(p0, st, batches[0], priv, UpdateRule.RMSPROP,
                                LrSchedule.constant(1.0), np.random.default_rng(3))
    p2, _ = dp_sgd_step(p0, batches[0], priv, LrSchedule.constant(1.0), np.random.default_rng(3))
    a, b = p1.flat - p0.flat, p2.flat - p0.flat
    assert np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(a * 1e6, b, rtol=1e-5)


@pytest.mark.parametrize("s,T", [(1000, 50), (7, 50), (1, 20)])
def test_variant1_counts_two_queries_off_refresh(task, s, T):
    train, batches = task
    kind = models.LogReg(train.d)
    priv = PrivacyConfig(1.0, 0.5, 1.0, 16, 400)
    led = PrivacyLedger()
    state, p, rng = DpSquaredState.init(kind.size, s), models.init_params(kind), np.random.default_rng(4)
    calls = 0
    for batch in batches[:T]:
        state, p, rep = ablation_variant1_step(state, p, batch, priv, UpdateRule.RMSPROP,
                                               LrSchedule.constant(0.1), rng, led)
        calls += rep.mechanism_calls
    assert calls == led.steps == 2 * T - math.ceil(T / s)


def test_variant1_without_noise_refreshes_every_s(task):
    train, batches = task
    kind = models.LogReg(train.d)
    state, p = DpSquaredState.init(kind.size, 5, eps_adapt=1e-3), models.init_params(kind)
    for t, batch in enumerate(batches[:23]):
        state, p, rep = ablation_variant1_step(state, p, batch, open_privacy(), UpdateRule.RMSPROP,
                                               LrSchedule.constant(0.5, 0.05), None)
        assert rep.v_updated == (t % 5 == 0)
        assert rep.phase == (SGD if t % 5 == 0 else ADAPTIVE)
    assert state.v_updates == 5


def test_variant2_without_noise_matches_dp2(task):
    train, batches = task
    kind = models.LogReg(train.d)
    lr = LrSchedule.constant(0.5, 0.05)
    a = b = DpSquaredState.init(kind.size, 6, eps_adapt=1e-3)
    p = q = models.init_params(kind)
    for batch in batches[:100]:
        a, p, _ = dp2_step(a, p, batch, open_privacy(), UpdateRule.RMSPROP, lr, None)
        b, q, _ = ablation_variant2_step(b, q, batch, open_privacy(), UpdateRule.RMSPROP, lr, None)
        np.testing.assert_allclose(p.flat, q.flat, rtol=0, atol=1e-12)


def test_variant2_noise_scales_with_inverse_preconditioner():
    d, b, sigma, C = 4, 8, 1.0, 0.5
    ds = SparseDataset(sparse.csr_matrix((b, d)), np.zeros(b))
    kind = models.LogReg(d)
    v = np.array([0.0, 0.01, 0.25, 1.0, 4.0])
    state = DpSquaredState(G=np.zeros(kind.size), v=v, s1=1, s2=1, eps_adapt=0.1, t=1)
    priv = PrivacyConfig(sigma, C, C, b, 100)
    p0 = models.ModelParams(kind, np.zeros(kind.size))
    rng = np.random.default_rng(8)
    steps = []
    for _ in range(20_000):
        _, p1, rep = ablation_variant2_step(state, p0, ds, priv, UpdateRule.RMSPROP,
                                            LrSchedule.constant(1.0), rng)
        steps.append(p0.flat - p1.flat)
    steps = np.array(steps)
    D = np.sqrt(v) + 0.1
    std = steps.std(axis=0)
    np.testing.assert_allclose(std, sigma * C / (b * D), rtol=0.03)
    assert np.all(np.diff(std) < 0)
    assert rep.phase == ADAPTIVE


def test_bias_correction():
    G = np.array([0.3, -0.2, 0.0])
    np.testing.assert_array_equal(bias_corrected_moment(G, 4, 0.0, 1.0, 8), (G / 4) ** 2)
    assert not bias_corrected_moment(np.zeros(3), 4, 1.0, 1.0, 8).any()
    rng = np.random.default_rng(0)
    s1, b, sigma, C = 8, 16, 1.0, 1.0
    clean = np.array([0.2, -0.3, 0.5])
    trials = 100_000
    noise = rng.standard_normal((trials, s1, 3)) * sigma * C / b
    G = (clean + noise).sum(axis=1)
    corrected = np.maximum((G / s1) ** 2 - sigma ** 2 * C ** 2 / (s1 * b ** 2), 0.0)
    via_fn = np.array([bias_corrected_moment(g, s1, sigma, C, b) for g in G[:1000]])
    np.testing.assert_array_equal(via_fn, corrected[:1000])
    np.testing.assert_allclose(corrected.mean(axis=0), clean ** 2, rtol=0.02)
    assert np.all(((G / s1) ** 2).mean(axis=0) > clean ** 2)


def test_ledger_parity_and_variant1_cost(task):
    train, batches = task
    kind = models.LogReg(train.d)
    priv = PrivacyConfig(1.0, 0.5, 1.0, 16, 400)
    eps = {}
    for name in ("dpsgd", "dp2-rmsprop", "dp2-yogi", "ablation2", "ablation1", "dp-rmsprop"):
        m = Method(name, kind.size, priv, LrSchedule.constant(0.1), s1=5)
        p, rng = models.init_params(kind), np.random.default_rng(0)
        for batch in batches[:40]:
            p, _ = m.step(p, batch, rng)
        eps[name] = m.ledger.epsilon(1e-5)
    assert eps["dpsgd"] == eps["dp2-rmsprop"] == eps["dp2-yogi"] == eps["ablation2"] == eps["dp-rmsprop"]
    assert eps["ablation1"] > eps["dpsgd"]


def test_steps_are_pure(task):
    train, batches = task
    kind = models.LogReg(train.d)
    priv = PrivacyConfig(1.0, 0.5, 1.0, 16, 400)
    state = DpSquaredState.init(kind.size, 2)
    p = models.init_params(kind)
    G0, v0, w0 = state.G.copy(), state.v.copy(), p.flat.copy()
    for _ in range(3):
        dp2_step(state, p, batches[0], priv, UpdateRule.RMSPROP, LrSchedule.constant(0.1),
                 np.random.default_rng(0))
    np.testing.assert_array_equal(state.G, G0)
    np.testing.assert_array_equal(state.v, v0)
    np.testing.assert_array_equal(p.flat, w0)
    assert state.t == 0


def test_schedules_and_validation():
    lr = LrSchedule.invsqrt(2.0)
    assert lr.rate(3, SGD) == pytest.approx(1.0)
    assert LrSchedule.constant(0.1, 3.0).rate(7, ADAPTIVE) == 3.0
    with pytest.raises(ValueError):
        LrSchedule.constant(0.0)
    with pytest.raises(ValueError):
        DpSquaredState.init(3, 0)
    with pytest.raises(ValueError):
        Method("adam", 3, open_privacy(), LrSchedule.constant(0.1))
