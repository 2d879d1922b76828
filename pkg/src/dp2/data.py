"""Datasets, text-format loaders, synthetic data and the batch sampler.

Sparse examples use a libsvm-style line format::

    label idx:val idx:val ...

with a comma-separated label list for multi-label data (``3,17 0:1 4:2``).
Ratings use one ``user<TAB>item<TAB>rating`` record per line (extra columns,
such as the MovieLens timestamp, are ignored). Numbers are written with
``repr`` so a save/load round trip is exact.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .models import RatingTriple, SparseExample
from .numerics import DTYPE, SparseVec


class SparseDataset:
    """Sparse feature matrix with binary or multi-label targets.

    ``y`` is a float vector of 0/1 labels, or an ``(n, classes)`` 0/1 matrix
    when ``num_classes`` is set.
    """

    def __init__(self, X, y, num_classes: Optional[int] = None):
        X = sparse.csr_matrix(X, dtype=DTYPE)
        X.sort_indices()
        self.X = X
        self.y = np.asarray(y, dtype=DTYPE)
        self.num_classes = num_classes
        if self.y.shape[0] != X.shape[0]:
            raise ValueError("feature and label counts differ")
        if num_classes is not None and self.y.shape != (X.shape[0], num_classes):
            raise ValueError(f"multi-label targets must have shape (n, {num_classes})")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def multilabel(self) -> bool:
        return self.num_classes is not None

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> SparseExample:
        row = self.X[i]
        label = self.y[i].copy() if self.multilabel else int(self.y[i])
        return SparseExample(SparseVec(row.indices, row.data, self.d), label)

    def __iter__(self):
        return (self[i] for i in range(self.n))

    def subset(self, idx) -> "SparseDataset":
        return SparseDataset(self.X[idx], self.y[idx], self.num_classes)

    @classmethod
    def from_examples(cls, examples: Sequence[SparseExample], d: int,
                      num_classes: Optional[int] = None) -> "SparseDataset":
        indptr = np.cumsum([0] + [ex.features.nnz for ex in examples])
        indices = np.concatenate([ex.features.indices for ex in examples] or [[]])
        data = np.concatenate([ex.features.values for ex in examples] or [[]])
        X = sparse.csr_matrix((data, indices.astype(np.int64), indptr), shape=(len(examples), d))
        y = np.array([ex.label for ex in examples], dtype=DTYPE)
        return cls(X, y, num_classes)


class RatingDataset:
    """(user, item, rating) records with dense 0-based ids.

    ``user_ids``/``item_ids`` map dense index -> raw id string; they are
    what :func:`save_id_maps` persists.
    """

    def __init__(self, users, items, ratings, num_users: int, num_items: int,
                 user_ids=None, item_ids=None):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.ratings = np.asarray(ratings, dtype=DTYPE)
        self.num_users = num_users
        self.num_items = num_items
        self.user_ids = list(user_ids) if user_ids is not None else [str(i) for i in range(num_users)]
        self.item_ids = list(item_ids) if item_ids is not None else [str(i) for i in range(num_items)]
        if not (self.users.shape == self.items.shape == self.ratings.shape):
            raise ValueError("users, items and ratings must have equal length")
        if self.users.size and (self.users.max() >= num_users or self.items.max() >= num_items
                                or self.users.min() < 0 or self.items.min() < 0):
            raise ValueError("user or item index out of declared range")

    @property
    def n(self) -> int:
        return int(self.users.size)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> RatingTriple:
        return RatingTriple(int(self.users[i]), int(self.items[i]), float(self.ratings[i]))

    def __iter__(self):
        return (self[i] for i in range(self.n))

    def subset(self, idx) -> "RatingDataset":
        return RatingDataset(self.users[idx], self.items[idx], self.ratings[idx],
                             self.num_users, self.num_items, self.user_ids, self.item_ids)


# ---------------------------------------------------------------------------
# Text formats

def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def load_sparse(path, d: Optional[int] = None, num_classes: Optional[int] = None) -> SparseDataset:
    """Parse a libsvm-style file.

    If ``num_classes`` is given the label field is read as a comma-separated
    tag list. ``d`` defaults to one past the largest index seen.
    """
    path = Path(path)
    labels, indptr, indices, values = [], [0], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            head, *pairs = line.split()
            if num_classes is not None and ":" in head:
                # an example with no tags starts directly with its features
                head, pairs = "", [head] + pairs
            try:
                if num_classes is None:
                    labels.append(float(head))
                else:
                    tags = [int(t) for t in head.split(",") if t != ""]
                    if any(t < 0 or t >= num_classes for t in tags):
                        raise ValueError(f"tag out of range [0, {num_classes})")
                    labels.append(tags)
                row = sorted((int(k), float(v)) for k, v in (p.split(":", 1) for p in pairs))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed line ({exc})") from None
            cols = [k for k, _ in row]
            if len(set(cols)) != len(cols) or (cols and cols[0] < 0):
                raise ValueError(f"{path}:{lineno}: duplicate or negative feature index")
            if d is not None and cols and cols[-1] >= d:
                raise ValueError(f"{path}:{lineno}: feature index {cols[-1]} >= d={d}")
            indices.extend(cols)
            values.extend(v for _, v in row)
            indptr.append(len(indices))
    if not labels:
        raise ValueError(f"{path}: no examples")
    if d is None:
        d = max(indices) + 1 if indices else 1
    X = sparse.csr_matrix((np.array(values, dtype=DTYPE), np.array(indices, dtype=np.int64),
                           np.array(indptr)), shape=(len(labels), d))
    if num_classes is None:
        y = np.array(labels, dtype=DTYPE)
    else:
        y = np.zeros((len(labels), num_classes), dtype=DTYPE)
        for i, tags in enumerate(labels):
            y[i, tags] = 1.0
    return SparseDataset(X, y, num_classes)


def save_sparse(ds: SparseDataset, path) -> None:
    X = ds.X
    with Path(path).open("w") as fh:
        for i in range(ds.n):
            if ds.multilabel:
                head = ",".join(str(c) for c in np.flatnonzero(ds.y[i]))
            else:
                head = _fmt(ds.y[i])
            lo, hi = X.indptr[i], X.indptr[i + 1]
            feats = " ".join(f"{j}:{_fmt(v)}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))
            fh.write(f"{head} {feats}".rstrip() + "\n")


def _id_sort_key(s: str):
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


def load_ratings(path, id_maps: Optional[dict] = None) -> RatingDataset:
    """Parse ``user<TAB>item<TAB>rating`` lines.

    Raw ids are remapped to dense indices in sorted order, so reloading the
    same file reproduces the same mapping. Pass ``id_maps`` (as returned by
    :func:`load_id_maps`) to reuse the mapping of another split; unseen ids
    are then an error.
    """
    path = Path(path)
    raw_u, raw_i, vals = [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected user<TAB>item<TAB>rating")
            try:
                vals.append(float(parts[2]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed rating {parts[2]!r}") from None
            raw_u.append(parts[0].strip())
            raw_i.append(parts[1].strip())
    if not vals:
        raise ValueError(f"{path}: no records")
    if id_maps is None:
        user_ids = sorted(set(raw_u), key=_id_sort_key)
        item_ids = sorted(set(raw_i), key=_id_sort_key)
    else:
        user_ids, item_ids = list(id_maps["users"]), list(id_maps["items"])
    u_index = {u: k for k, u in enumerate(user_ids)}
    i_index = {it: k for k, it in enumerate(item_ids)}
    try:
        users = [u_index[u] for u in raw_u]
        items = [i_index[it] for it in raw_i]
    except KeyError as exc:
        raise ValueError(f"{path}: id {exc.args[0]!r} missing from the id map") from None
    return RatingDataset(users, items, vals, len(user_ids), len(item_ids), user_ids, item_ids)


def save_ratings(ds: RatingDataset, path) -> None:
    with Path(path).open("w") as fh:
        for u, i, r in zip(ds.users, ds.items, ds.ratings):
            fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\t{_fmt(r)}\n")


def save_id_maps(ds: RatingDataset, path) -> None:
    Path(path).write_text(json.dumps({"users": ds.user_ids, "items": ds.item_ids}))


def load_id_maps(path) -> dict:
    return json.loads(Path(path).read_text())


def split_ratings(ds: RatingDataset, test_fraction: float = 0.1, seed: int = 0):
    """Random record-level train/test split."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    n_test = int(round(test_fraction * ds.n))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# Synthetic data

@dataclass(frozen=True)
class SynthSpec:
    """Synthetic sparse binary classification task.

    ``feature_skew`` is the exponent of a power-law feature frequency
    (0 gives uniformly chosen features); a positive skew mimics
    bag-of-words data where a few features are common and most are rare.
    ``stopword_head`` makes that many of the most frequent features carry no
    signal, like stopwords; the informative set is drawn from the rest.
    """
    n: int = 10_000
    d: int = 1_000
    sparsity: int = 10
    num_informative: Optional[int] = None
    label_noise: float = 0.0
    seed: int = 0
    n_test: Optional[int] = None
    feature_skew: float = 0.0
    stopword_head: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if not 1 <= self.sparsity <= self.d:
            raise ValueError("sparsity must be in [1, d]")
        if self.num_informative is not None and not 1 <= self.num_informative <= self.d:
            raise ValueError("num_informative must be in [1, d]")
        if not 0 <= self.stopword_head < self.d:
            raise ValueError("stopword_head must be in [0, d)")
        if self.num_informative is not None and self.num_informative > self.d - self.stopword_head:
            raise ValueError("num_informative exceeds the non-stopword features")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be in [0, 1]")


def _choose_features(rng, n, d, k, log_p, chunk=2048):
    # Weighted sampling without replacement via Gumbel top-k.
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        keys = log_p + rng.gumbel(size=(hi - lo, d))
        top = np.argpartition(-keys, k - 1, axis=1)[:, :k] if k < d else np.tile(np.arange(d), (hi - lo, 1))
        out[lo:hi] = np.sort(top, axis=1)
    return out


def gen_synthetic(spec: SynthSpec):
    """Draw a (train, test) pair of SparseDatasets from ``spec``.

    A hidden weight vector is supported on ``num_informative`` random
    features; every example activates ``sparsity`` features with standard
    normal values and is labelled by the sign of its hidden score, flipped
    with probability ``label_noise``.
    """
    rng = np.random.default_rng(spec.seed)
    d, k = spec.d, spec.sparsity
    n_test = spec.n // 4 if spec.n_test is None else spec.n_test
    total = spec.n + n_test
    head = spec.stopword_head
    n_inf = d - head if spec.num_informative is None else spec.num_informative

    rank = rng.permutation(d)
    candidates = np.flatnonzero(rank >= head)
    informative = np.sort(rng.choice(candidates, size=n_inf, replace=False))
    w_star = np.zeros(d)
    w_star[informative] = rng.standard_normal(n_inf)
    log_p = -spec.feature_skew * np.log1p(rank)

    cols = _choose_features(rng, total, d, k, log_p)
    vals = rng.standard_normal((total, k))
    X = sparse.csr_matrix((vals.ravel(), cols.ravel(), np.arange(total + 1) * k), shape=(total, d))
    y = (X @ w_star >= 0).astype(DTYPE)
    flip = rng.random(total) < spec.label_noise
    y[flip] = 1.0 - y[flip]
    train = SparseDataset(X[:spec.n], y[:spec.n])
    test = SparseDataset(X[spec.n:], y[spec.n:])
    return train, test


def gen_synthetic_ratings(num_users: int = 100, num_items: int = 200, n: int = 5_000,
                          rank: int = 5, noise: float = 0.5, seed: int = 0,
                          test_fraction: float = 0.1):
    """Low-rank ratings with Gaussian noise, split into (train, test)."""
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((num_users, rank)) / rank ** 0.25
    V = rng.standard_normal((num_items, rank)) / rank ** 0.25
    users = rng.integers(num_users, size=n)
    items = rng.integers(num_items, size=n)
    ratings = np.einsum("ij,ij->i", U[users], V[items]) + noise * rng.standard_normal(n)
    ds = RatingDataset(users, items, ratings, num_users, num_items)
    return split_ratings(ds, test_fraction, seed)


# ---------------------------------------------------------------------------
# Sampling

def sample_indices(n: int, b: int, rng) -> np.ndarray:
    if not 1 <= b <= n:
        raise ValueError(f"batch size {b} must be in [1, n={n}]")
    return rng.choice(n, size=b, replace=False)


def sample_batch(dataset, b: int, rng):
    """Uniform mini-batch of ``b`` distinct records."""
    return dataset.subset(sample_indices(len(dataset), b, rng))
