"""Per-example losses and analytic per-example gradients.

Three model kinds are supported:

* ``LogReg(d)`` -- binary logistic regression. Flat layout: ``d`` weights,
  then the bias (``d + 1`` parameters).
* ``MultiLabel(d, classes)`` -- one linear score per class. Flat layout: the
  ``(d, classes)`` weight matrix row-major (index ``j * classes + c``), then
  ``classes`` biases. Loss is independent per-class sigmoids by default, or a
  softmax cross-entropy against the normalised tag set.
* ``MatFac(num_users, num_items, embed_dim)`` -- rating prediction
  ``u_user . v_item`` with squared error. Flat layout: the user block
  (``num_users * embed_dim``, row-major) followed by the item block.

Gradients for a batch are returned as a CSR matrix with one row per example
over the flat layout, so clipping, preconditioning and summation stay
vectorised downstream.
"""

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import sparse, special

from .numerics import DTYPE, SparseVec


@dataclass(frozen=True)
class SparseExample:
    features: SparseVec
    label: Union[int, np.ndarray]


@dataclass(frozen=True)
class RatingTriple:
    user: int
    item: int
    rating: float


@dataclass(frozen=True)
class LogReg:
    d: int

    @property
    def size(self) -> int:
        return self.d + 1


@dataclass(frozen=True)
class MultiLabel:
    d: int
    classes: int
    loss: str = "sigmoid"

    def __post_init__(self):
        if self.loss not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown multi-label loss {self.loss!r}")

    @property
    def size(self) -> int:
        return self.d * self.classes + self.classes


@dataclass(frozen=True)
class MatFac:
    num_users: int
    num_items: int
    embed_dim: int

    @property
    def size(self) -> int:
        return (self.num_users + self.num_items) * self.embed_dim


ModelKind = Union[LogReg, MultiLabel, MatFac]


@dataclass
class ModelParams:
    kind: ModelKind
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=DTYPE)
        if self.flat.shape != (self.kind.size,):
            raise ValueError(
                f"{type(self.kind).__name__} expects {self.kind.size} parameters, "
                f"got {self.flat.shape}")

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.kind, flat)

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, self.flat.copy())

    # Views into the flat vector.
    def weights(self) -> np.ndarray:
        k = self.kind
        if isinstance(k, LogReg):
            return self.flat[:k.d]
        if isinstance(k, MultiLabel):
            return self.flat[:k.d * k.classes].reshape(k.d, k.classes)
        raise TypeError("MatFac has no weight matrix; use embeddings()")

    def bias(self):
        k = self.kind
        if isinstance(k, LogReg):
            return self.flat[k.d]
        if isinstance(k, MultiLabel):
            return self.flat[k.d * k.classes:]
        raise TypeError("MatFac has no bias terms")

    def embeddings(self):
        k = self.kind
        if not isinstance(k, MatFac):
            raise TypeError("only MatFac has embeddings")
        split = k.num_users * k.embed_dim
        users = self.flat[:split].reshape(k.num_users, k.embed_dim)
        items = self.flat[split:].reshape(k.num_items, k.embed_dim)
        return users, items


def init_params(kind: ModelKind, rng=None, scale: float = 0.1) -> ModelParams:
    """Zeros for the linear models; uniform in [-scale, scale] for MatFac."""
    if isinstance(kind, MatFac):
        rng = np.random.default_rng(rng)
        return ModelParams(kind, rng.uniform(-scale, scale, size=kind.size))
    return ModelParams(kind, np.zeros(kind.size, dtype=DTYPE))


# ---------------------------------------------------------------------------
# Batched kernels. ``batch`` is anything exposing ``X``/``y`` (sparse models)
# or ``users``/``items``/``ratings`` (MatFac); see dp2.data.

def _row_ids(indptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(indptr.size - 1), np.diff(indptr))


def _logreg_scores(params: ModelParams, X) -> np.ndarray:
    d = params.kind.d
    return X @ params.flat[:d] + params.flat[d]


def _multilabel_scores(params: ModelParams, X) -> np.ndarray:
    return np.asarray(X @ params.weights()) + params.bias()


def _multilabel_residual(kind: MultiLabel, Z: np.ndarray, Y: np.ndarray):
    """Return (per-example loss, dloss/dZ)."""
    Y = Y.astype(DTYPE)
    if kind.loss == "sigmoid":
        loss = np.sum(np.logaddexp(0.0, Z) - Y * Z, axis=1)
        return loss, special.expit(Z) - Y
    target = Y / np.maximum(Y.sum(axis=1, keepdims=True), 1.0)
    lse = special.logsumexp(Z, axis=1)
    loss = lse - np.sum(target * Z, axis=1)
    return loss, np.exp(Z - lse[:, None]) - target


def _matfac_error(params: ModelParams, users, items, ratings):
    U, V = params.embeddings()
    pred = np.einsum("ij,ij->i", U[users], V[items])
    return pred - ratings


def batch_losses(params: ModelParams, batch) -> np.ndarray:
    """Per-example loss for every record of ``batch``."""
    kind = params.kind
    if isinstance(kind, LogReg):
        z = _logreg_scores(params, batch.X)
        return np.logaddexp(0.0, z) - batch.y * z
    if isinstance(kind, MultiLabel):
        loss, _ = _multilabel_residual(kind, _multilabel_scores(params, batch.X), batch.y)
        return loss
    err = _matfac_error(params, batch.users, batch.items, batch.ratings)
    return err * err


def batch_grads(params: ModelParams, batch) -> sparse.csr_matrix:
    """Per-example gradients, one CSR row per example over the flat layout."""
    kind = params.kind
    if isinstance(kind, LogReg):
        return _logreg_grads(params, batch.X, batch.y)
    if isinstance(kind, MultiLabel):
        return _multilabel_grads(params, batch.X, batch.y)
    return _matfac_grads(params, batch.users, batch.items, batch.ratings)


def _logreg_grads(params, X, y):
    kind = params.kind
    if X.shape[1] != kind.d:
        raise ValueError(f"feature dim {X.shape[1]} does not match model d={kind.d}")
    r = special.expit(_logreg_scores(params, X)) - y
    counts = np.diff(X.indptr)
    data = np.insert(X.data * np.repeat(r, counts), X.indptr[1:], r)
    indices = np.insert(X.indices.astype(np.int64), X.indptr[1:], kind.d)
    indptr = X.indptr + np.arange(X.indptr.size)
    return sparse.csr_matrix((data, indices, indptr), shape=(X.shape[0], kind.size))


def _multilabel_grads(params, X, Y):
    kind = params.kind
    if X.shape[1] != kind.d:
        raise ValueError(f"feature dim {X.shape[1]} does not match model d={kind.d}")
    K = kind.classes
    _, R = _multilabel_residual(kind, _multilabel_scores(params, X), Y)
    b = X.shape[0]
    rows = _row_ids(X.indptr)
    cls = np.arange(K)
    feat_rows = np.repeat(rows, K)
    feat_cols = (X.indices[:, None].astype(np.int64) * K + cls).ravel()
    feat_vals = (X.data[:, None] * R[rows]).ravel()
    bias_rows = np.repeat(np.arange(b), K)
    bias_cols = np.tile(kind.d * K + cls, b)
    out = sparse.csr_matrix(
        (np.concatenate([feat_vals, R.ravel()]),
         (np.concatenate([feat_rows, bias_rows]), np.concatenate([feat_cols, bias_cols]))),
        shape=(b, kind.size))
    out.sort_indices()
    return out


def _matfac_grads(params, users, items, ratings):
    kind = params.kind
    k = kind.embed_dim
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.max() >= kind.num_users or items.max() >= kind.num_items
                       or users.min() < 0 or items.min() < 0):
        raise IndexError("user or item index out of range")
    U, V = params.embeddings()
    err2 = 2.0 * _matfac_error(params, users, items, ratings)
    b = users.size
    span = np.arange(k)
    cols = np.hstack([users[:, None] * k + span,
                      kind.num_users * k + items[:, None] * k + span])
    vals = np.hstack([err2[:, None] * V[items], err2[:, None] * U[users]])
    indptr = np.arange(b + 1) * (2 * k)
    return sparse.csr_matrix((vals.ravel(), cols.ravel(), indptr), shape=(b, kind.size))


def mean_grad(params: ModelParams, batch) -> np.ndarray:
    """Mean of the per-example gradients as a dense vector."""
    g = batch_grads(params, batch)
    return np.asarray(g.sum(axis=0)).ravel() / g.shape[0]


# ---------------------------------------------------------------------------
# Single-record API.

class _One:
    """Adapter turning one record into a batch of size one."""

    def __init__(self, kind, example):
        if isinstance(example, RatingTriple):
            if not isinstance(kind, MatFac):
                raise TypeError("RatingTriple requires a MatFac model")
            self.users = np.array([example.user])
            self.items = np.array([example.item])
            self.ratings = np.array([example.rating], dtype=DTYPE)
            return
        if isinstance(kind, MatFac):
            raise TypeError("MatFac requires a RatingTriple")
        f = example.features
        if f.dim != kind.d:
            raise ValueError(f"feature dim {f.dim} does not match model d={kind.d}")
        self.X = sparse.csr_matrix((f.values, f.indices, [0, f.nnz]), shape=(1, f.dim))
        if isinstance(kind, MultiLabel):
            self.y = np.asarray(example.label, dtype=DTYPE).reshape(1, kind.classes)
        else:
            self.y = np.array([example.label], dtype=DTYPE)


def per_example_grad(params: ModelParams, example) -> SparseVec:
    row = batch_grads(params, _One(params.kind, example))
    row.sort_indices()
    return SparseVec(row.indices, row.data, params.kind.size)


def per_example_loss(params: ModelParams, example) -> float:
    return float(batch_losses(params, _One(params.kind, example))[0])


def batch_eval(params: ModelParams, dataset) -> dict:
    """Mean loss plus the task metric over a whole dataset.

    LogReg reports accuracy at threshold 0.5, MultiLabel reports the fraction
    of examples whose top-scoring class is one of their tags, and MatFac
    reports the mean squared error.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    kind = params.kind
    if isinstance(kind, LogReg):
        z = _logreg_scores(params, dataset.X)
        loss = np.logaddexp(0.0, z) - dataset.y * z
        acc = np.mean((z > 0) == (dataset.y > 0.5))
        return {"loss": float(loss.mean()), "accuracy": float(acc)}
    if isinstance(kind, MultiLabel):
        Z = _multilabel_scores(params, dataset.X)
        loss, _ = _multilabel_residual(kind, Z, dataset.y)
        top = np.argmax(Z, axis=1)
        acc = np.mean(dataset.y[np.arange(Z.shape[0]), top] > 0)
        return {"loss": float(loss.mean()), "accuracy": float(acc)}
    err = _matfac_error(params, dataset.users, dataset.items, dataset.ratings)
    mse = float(np.mean(err * err))
    return {"loss": mse, "mse": mse}


def metric_name(kind: ModelKind) -> str:
    return "mse" if isinstance(kind, MatFac) else "accuracy"
