"""Comparison detectors on per-window average feature vectors.

Each 128-step window is collapsed to the mean of every feature over time,
and the resulting vectors are scored by

* ``abod``: angle-based outlier factor, the variance over neighbour pairs
  ``(a, b)`` of ``<a - q, b - q> / (|a - q|^2 |b - q|^2)``; low variance
  marks an outlier;
* ``knn``: Minkowski distance to the k-th nearest training vector; high
  marks an outlier;
* ``dense-ae``: Euclidean reconstruction distance of a small fully
  connected autoencoder trained with plain MSE; high marks an outlier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .data import WINDOW, DriveCycle, tile_windows
from .errors import ContractError
from .evaluation import HIGHER, LOWER, ScoreRecord
from .tensor import GradTape, Tensor
from .training import OptimizerState, adam_step

METHODS = ("abod", "knn", "dense-ae")
ORIENTATION = {"abod": LOWER, "knn": HIGHER, "dense-ae": HIGHER}


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    sample_id: str
    label: Optional[str] = None


@dataclass(frozen=True)
class OutlierScore:
    method: str
    value: float
    orientation: str
    sample_id: Optional[str] = None


def feature_matrix(samples) -> np.ndarray:
    """``(N, F)`` per-window feature means from windows or an ``(N, W, F)`` array."""
    if isinstance(samples, np.ndarray):
        if samples.ndim != 3:
            raise ContractError(f"expected (N, W, F) windows, got shape {samples.shape}")
        return samples.mean(axis=1)
    samples = list(samples)
    if not samples:
        return np.zeros((0, 0))
    return np.stack([np.asarray(s.matrix).mean(axis=0) for s in samples])


def reduce_to_feature_vectors(samples) -> list[FeatureVector]:
    mat = feature_matrix(samples)
    if isinstance(samples, np.ndarray):
        return [FeatureVector(row, str(i)) for i, row in enumerate(mat)]
    return [
        FeatureVector(row, f"{s.cycle_id}@{s.start_index}", s.label)
        for s, row in zip(samples, mat)
    ]


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    return np.stack([v.values if isinstance(v, FeatureVector) else np.asarray(v, dtype=np.float64) for v in vectors])


# ---------------------------------------------------------------------------
# ABOD
# ---------------------------------------------------------------------------


def _abof(diffs: np.ndarray) -> float:
    sq = np.einsum("ij,ij->i", diffs, diffs)
    keep = sq > 0
    diffs, sq = diffs[keep], sq[keep]
    if len(diffs) < 2:
        raise ContractError("ABOD is undefined: fewer than two non-coincident neighbours")
    w = (diffs @ diffs.T) / np.outer(sq, sq)
    iu = np.triu_indices(len(diffs), 1)
    return float(w[iu].var())


def abod_scores(train, queries, n_neighbors: Optional[int] = None) -> np.ndarray:
    """ABOD score of every query; ``n_neighbors=None`` uses all training vectors.

    Training vectors coinciding with the query have zero-length difference
    vectors and drop out of the pair set.
    """
    X = _as_matrix(train)
    Q = _as_matrix(queries)
    if len(X) < 3:
        raise ContractError(f"ABOD needs at least 3 training vectors, got {len(X)}")
    if n_neighbors is not None:
        d = cdist(Q, X)
        d = np.where(d == 0, np.inf, d)
        k = min(n_neighbors, len(X))
        nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    out = np.empty(len(Q))
    for i, q in enumerate(Q):
        pts = X if n_neighbors is None else X[nbrs[i]]
        out[i] = _abof(pts - q)
    return out


def abod_score(train, query, n_neighbors: Optional[int] = None) -> OutlierScore:
    return OutlierScore("abod", float(abod_scores(train, [query], n_neighbors)[0]), LOWER)


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------


def knn_scores(train, queries, k: int = 5, p: float = 2.0, exclude_self: bool = True) -> np.ndarray:
    """Minkowski-``p`` distance from each query to its k-th nearest training vector.

    With ``exclude_self`` one training vector identical to the query (zero
    distance) is removed from that query's neighbour list.
    """
    X = _as_matrix(train)
    Q = _as_matrix(queries)
    if k < 1 or p < 1:
        raise ContractError(f"need k >= 1 and p >= 1, got k={k}, p={p}")
    if k > len(X):
        raise ContractError(f"k={k} exceeds the {len(X)} training vectors")
    d = cdist(Q, X, metric="minkowski", p=p)
    if exclude_self:
        rows = np.flatnonzero((d == 0).any(axis=1))
        if len(rows):
            d[rows, np.argmax(d[rows] == 0, axis=1)] = np.inf
    kth = np.partition(d, k - 1, axis=1)[:, k - 1]
    if np.isinf(kth).any():
        raise ContractError(f"k={k} exceeds the training vectors left after self-exclusion")
    return kth


def knn_score(train, query, k: int = 5, p: float = 2.0, exclude_self: bool = True) -> OutlierScore:
    return OutlierScore("knn", float(knn_scores(train, [query], k, p, exclude_self)[0]), HIGHER)


# ---------------------------------------------------------------------------
# dense autoencoder
# ---------------------------------------------------------------------------


class DenseAutoencoder:
    """Fully connected autoencoder ``F -> hidden... -> F`` with ReLU hidden layers.

    Parameters
    ----------
    hidden : tuple of int
        Hidden widths; the default ``(32, 8, 32)`` gives F-32-8-32-F.
    epochs, batch_size, lr : training settings for :meth:`fit` (Adam, MSE).
    seed : int
        Seeds initialization and minibatch order.
    """

    def __init__(self, hidden=(32, 8, 32), epochs: int = 100, batch_size: int = 256,
                 lr: float = 8e-4, seed: int = 0):
        self.hidden = tuple(hidden)
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.params: Optional[dict] = None
        self.loss_history: list = []

    @classmethod
    def from_params(cls, params: dict, hidden=None) -> "DenseAutoencoder":
        """Wrap explicit ``{"l0.w": ..., "l0.b": ..., ...}`` weights as a fitted model."""
        n = len(params) // 2
        ae = cls(hidden=hidden or tuple(params[f"l{i}.w"].shape[1] for i in range(n - 1)))
        ae.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        return ae

    def _init(self, n_features: int, rng: np.random.Generator) -> dict:
        widths = (n_features,) + self.hidden + (n_features,)
        params = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            lim = np.sqrt(6.0 / a)
            params[f"l{i}.w"] = Tensor(rng.uniform(-lim, lim, size=(a, b)))
            params[f"l{i}.b"] = Tensor(np.zeros(b))
        return params

    def _forward(self, params: dict, x: Tensor) -> Tensor:
        n = len(params) // 2
        h = x
        for i in range(n):
            h = T.dense(h, params[f"l{i}.w"], params[f"l{i}.b"])
            if i < n - 1:
                h = T.relu(h)
        return h

    def fit(self, X) -> "DenseAutoencoder":
        X = _as_matrix(X)
        rng = np.random.default_rng(self.seed)
        params = self._init(X.shape[1], rng)
        state = OptimizerState(base_lr=self.lr)
        self.loss_history = []
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            total = 0.0
            for lo in range(0, len(X), self.batch_size):
                xb = Tensor(X[order[lo : lo + self.batch_size]])
                with GradTape() as tape:
                    tape.watch(*params.values())
                    loss = T.reduce_mean(T.square(T.sub(xb, self._forward(params, xb))))
                g = T.backward(tape, loss)
                params, state = adam_step(params, {k: g[t.id] for k, t in params.items()}, state)
                total += loss.item() * xb.shape[0]
            self.loss_history.append(total / len(X))
        self.params = params
        return self

    def reconstruct(self, X) -> np.ndarray:
        if self.params is None:
            raise ContractError("dense autoencoder is not trained; call fit() first")
        return self._forward(self.params, Tensor(_as_matrix(X))).numpy()

    def scores(self, X) -> np.ndarray:
        X = _as_matrix(X)
        return np.linalg.norm(X - self.reconstruct(X), axis=1)


def dense_ae_score(model: DenseAutoencoder, query_set) -> list[OutlierScore]:
    vals = model.scores(query_set)
    ids = [v.sample_id if isinstance(v, FeatureVector) else None for v in query_set] \
        if not isinstance(query_set, np.ndarray) else [None] * len(vals)
    return [OutlierScore("dense-ae", float(v), HIGHER, i) for v, i in zip(vals, ids)]


# ---------------------------------------------------------------------------
# running a detector over cycles
# ---------------------------------------------------------------------------


class Detector:
    """A baseline fitted on training feature vectors, scoring new vectors."""

    def __init__(self, method: str, k: int = 5, p: float = 2.0, n_neighbors: Optional[int] = 10,
                 hidden=(32, 8, 32), epochs: int = 100, seed: int = 0):
        if method not in METHODS:
            raise ContractError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
        self.method = method
        self.orientation = ORIENTATION[method]
        self.k, self.p, self.n_neighbors = k, p, n_neighbors
        self.ae = DenseAutoencoder(hidden, epochs=epochs, seed=seed) if method == "dense-ae" else None
        self.train: Optional[np.ndarray] = None

    def fit(self, X) -> "Detector":
        self.train = _as_matrix(X)
        if self.ae is not None:
            self.ae.fit(self.train)
        return self

    def scores(self, X) -> np.ndarray:
        if self.train is None:
            raise ContractError("detector is not fitted")
        X = _as_matrix(X)
        if self.method == "abod":
            return abod_scores(self.train, X, self.n_neighbors)
        if self.method == "knn":
            return knn_scores(self.train, X, self.k, self.p, exclude_self=False)
        return self.ae.scores(X)


def score_cycles(detector: Detector, cycles: Sequence[DriveCycle], window: int = WINDOW) -> tuple[list, list]:
    """Per-window (``sample``) and per-cycle mean (``cycle``) records for ``cycles``."""
    samples, per_cycle = [], []
    for c in cycles:
        wins = tile_windows(c, window)
        vals = detector.scores(feature_matrix(wins))
        for w, v in zip(wins, vals):
            samples.append(ScoreRecord("sample", (c.id,), c.label, float(v), window_start=w.start_index,
                                       method=detector.method))
        per_cycle.append(ScoreRecord("cycle", (c.id,), c.label, float(vals.mean()), method=detector.method))
    return samples, per_cycle

