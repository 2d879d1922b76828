import math

import numpy as np
import pytest
from scipy import sparse

from dp2 import models
from dp2.data import RatingDataset, SparseDataset
from dp2.models import (LogReg, MatFac, ModelParams, MultiLabel, RatingTriple, SparseExample,
                        batch_eval, batch_grads, init_params, per_example_grad, per_example_loss)
from dp2.numerics import SparseVec
from oracles import fd_max_rel_error


def random_example(rng, kind):
    if isinstance(kind, MatFac):
        return RatingTriple(int(rng.integers(kind.num_users)), int(rng.integers(kind.num_items)),
                            float(rng.uniform(1, 5)))
    k = int(rng.integers(1, min(kind.d, 8) + 1))
    idx = np.sort(rng.choice(kind.d, size=k, replace=False))
    feats = SparseVec(idx, rng.standard_normal(k), kind.d)
    if isinstance(kind, MultiLabel):
        label = (rng.random(kind.classes) < 0.3).astype(float)
        return SparseExample(feats, label)
    return SparseExample(feats, int(rng.integers(2)))


KINDS = [LogReg(20), MultiLabel(12, 5), MultiLabel(12, 5, loss="softmax"), MatFac(6, 7, 4)]


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: f"{type(k).__name__}-{getattr(k, 'loss', '')}")
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    for _ in range(50):
        params = ModelParams(kind, 0.5 * rng.standard_normal(kind.size))
        ex = random_example(rng, kind)
        coords = range(kind.size) if kind.size <= 80 else rng.choice(kind.size, 80, replace=False)
        assert fd_max_rel_error(params, ex, coords) < 1e-5


def test_layout_sizes():
    assert LogReg(10_000).size == 10_001
    assert MultiLabel(10, 3).size == 33
    assert MatFac(943, 1682, 100).size == 262_500


def test_views_follow_documented_layout():
    p = ModelParams(MultiLabel(2, 3), np.arange(9.0))
    np.testing.assert_array_equal(p.weights(), [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_array_equal(p.bias(), [6, 7, 8])
    users, items = ModelParams(MatFac(2, 1, 2), np.arange(6.0)).embeddings()
    np.testing.assert_array_equal(users, [[0, 1], [2, 3]])
    np.testing.assert_array_equal(items, [[4, 5]])


def test_logreg_zero_point():
    kind = LogReg(3)
    p = init_params(kind)
    ex = SparseExample(SparseVec([0], [1.0], 3), 1)
    g = per_example_grad(p, ex)
    np.testing.assert_array_equal(g.indices, [0, 3])
    np.testing.assert_allclose(g.values, [-0.5, -0.5])
    assert per_example_loss(p, ex) == pytest.approx(math.log(2))
    assert per_example_loss(p, SparseExample(SparseVec([1, 2], [4.0, -2.0], 3), 0)) == pytest.approx(math.log(2))


def test_matfac_zero_user_embedding():
    kind = MatFac(2, 2, 3)
    flat = np.zeros(kind.size)
    v_item = np.array([0.3, -0.2, 0.5])
    flat[2 * 3 + 3:] = v_item  # item 1
    p = ModelParams(kind, flat)
    g = per_example_grad(p, RatingTriple(0, 1, 4.0)).densify()
    np.testing.assert_allclose(g[:3], -2 * 4.0 * v_item)
    np.testing.assert_array_equal(g[6:], 0.0)
    flat[:3] = [1.0, 0.0, 0.0]
    flat[9:] = [2.0, 0.0, 0.0]
    assert per_example_loss(ModelParams(kind, flat), RatingTriple(0, 1, 2.0)) == 0.0


def test_gradient_support():
    rng = np.random.default_rng(3)
    kind = LogReg(50)
    p = ModelParams(kind, rng.standard_normal(kind.size))
    for _ in range(20):
        ex = random_example(rng, kind)
        g = per_example_grad(p, ex)
        assert set(g.indices) <= set(ex.features.indices) | {50}
    kind = MatFac(5, 5, 4)
    p = init_params(kind, rng)
    for _ in range(20):
        assert per_example_grad(p, random_example(rng, kind)).nnz == 8


def test_batch_rows_are_per_example_and_sum_is_linear():
    rng = np.random.default_rng(5)
    kind = LogReg(30)
    p = ModelParams(kind, rng.standard_normal(kind.size))
    exs = [random_example(rng, kind) for _ in range(9)]
    ds = SparseDataset.from_examples(exs, 30)
    G = batch_grads(p, ds)
    total = sum((per_example_grad(p, e) for e in exs[1:]), per_example_grad(p, exs[0]))
    np.testing.assert_allclose(np.asarray(G.sum(axis=0)).ravel(), total.densify(), atol=1e-14)
    for i, e in enumerate(exs):
        np.testing.assert_allclose(G[i].toarray().ravel(), per_example_grad(p, e).densify(), atol=1e-15)


def test_four_example_mean_loss_by_hand():
    # w = [1, -1], b = 0.5
    p = ModelParams(LogReg(2), np.array([1.0, -1.0, 0.5]))
    X = sparse.csr_matrix(np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [0.0, 0.0]]))
    y = np.array([1, 0, 1, 0])
    ds = SparseDataset(X, y)
    z = [1.5, -1.5, 0.5, 0.5]
    nll = [math.log1p(math.exp(-z[0])), math.log1p(math.exp(z[1])),
           math.log1p(math.exp(-z[2])), math.log1p(math.exp(z[3]))]
    out = batch_eval(p, ds)
    assert out["loss"] == pytest.approx(sum(nll) / 4, rel=1e-14)
    assert out["accuracy"] == pytest.approx(0.75)


def test_multilabel_accuracy_counts_any_tag():
    kind = MultiLabel(2, 3)
    flat = np.zeros(kind.size)
    flat[kind.d * kind.classes:] = [0.0, 1.0, 0.0]  # class 1 always on top
    ds = SparseDataset(sparse.csr_matrix(np.eye(2)), np.array([[0, 1, 1], [1, 0, 0]]), 3)
    assert batch_eval(ModelParams(kind, flat), ds)["accuracy"] == 0.5


def test_matfac_eval_is_mse():
    kind = MatFac(1, 2, 1)
    p = ModelParams(kind, np.array([2.0, 1.0, 3.0]))
    ds = RatingDataset([0, 0], [0, 1], [1.0, 6.0], 1, 2)
    out = batch_eval(p, ds)
    assert out["mse"] == pytest.approx(((2 - 1) ** 2 + (6 - 6) ** 2) / 2)


def test_errors():
    with pytest.raises(ValueError):
        per_example_grad(init_params(LogReg(3)), SparseExample(SparseVec([0], [1.0], 4), 1))
    with pytest.raises(TypeError):
        per_example_grad(init_params(LogReg(3)), RatingTriple(0, 0, 1.0))
    with pytest.raises(ValueError):
        ModelParams(LogReg(3), np.zeros(3))
    with pytest.raises(ValueError, match="empty"):
        batch_eval(init_params(LogReg(2)), SparseDataset(sparse.csr_matrix((0, 2)), np.zeros(0)))
    with pytest.raises(ValueError):
        MultiLabel(3, 2, loss="hinge")


def test_matfac_init_is_seeded_and_bounded():
    kind = MatFac(10, 10, 5)
    a = init_params(kind, np.random.default_rng(0))
    b = init_params(kind, np.random.default_rng(0))
    np.testing.assert_array_equal(a.flat, b.flat)
    assert np.abs(a.flat).max() <= 0.1
    assert not models.init_params(LogReg(4)).flat.any()
