"""Assisting models: weighted least squares, CART regression trees and forests.

Every fitted :class:`Predictor` remembers the population positions it was
trained on, so estimators can refuse predictors that have seen test units.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _tree_kernels as K
from .core import Population
from .rng import content_key, stream

LEARNER_KINDS = ("wls", "tree", "forest", "constant")


@dataclass(frozen=True)
class LearnerSpec:
    """Learner kind and hyperparameters.

    ``features`` selects 0-based feature columns (all by default).
    ``intercept`` applies to WLS only. ``mtry=None`` means all features for
    a single tree and ``ceil(p/3)`` for a forest. ``max_depth=None`` grows
    until ``min_leaf`` stops splitting. ``value`` is the output of the
    ``constant`` learner, which ignores its training data.
    """

    kind: str = "wls"
    intercept: bool = True
    features: tuple[int, ...] | None = None
    max_depth: int | None = None
    min_leaf: int | None = None
    n_trees: int = 200
    mtry: int | None = None
    bootstrap: bool = True
    seed: int = 0
    value: float = 0.0
    weighted: bool = True

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"learner.kind must be one of {LEARNER_KINDS}, got {self.kind!r}")
        if self.features is not None:
            object.__setattr__(self, "features", tuple(int(f) for f in self.features))
        if self.min_leaf is not None and self.min_leaf < 1:
            raise ValueError(f"learner.min_leaf must be >= 1, got {self.min_leaf}")
        if self.n_trees < 1:
            raise ValueError(f"learner.n_trees must be >= 1, got {self.n_trees}")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError(f"learner.mtry must be >= 1, got {self.mtry}")

    @property
    def randomized(self) -> bool:
        if self.kind == "forest":
            return True
        return self.kind == "tree" and self.mtry is not None

    def resolved(self, p: int) -> "LearnerSpec":
        """Fill in defaults that depend on the number of features ``p``."""
        q = len(self.features) if self.features is not None else p
        mtry = self.mtry
        if mtry is None:
            mtry = max(1, math.ceil(q / 3)) if self.kind == "forest" else q
        if mtry > q:
            raise ValueError(f"learner.mtry={mtry} exceeds the number of features {q}")
        min_leaf = self.min_leaf
        if min_leaf is None:
            min_leaf = 5 if self.kind == "forest" else 1
        return replace(self, mtry=mtry, min_leaf=min_leaf)

    def describe(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "wls":
            d.update(intercept=self.intercept)
        elif self.kind in ("tree", "forest"):
            d.update(max_depth=self.max_depth, min_leaf=self.min_leaf, mtry=self.mtry)
            if self.kind == "forest":
                d.update(n_trees=self.n_trees, bootstrap=self.bootstrap)
        else:
            d.update(value=self.value)
        if self.features is not None:
            d["features"] = list(self.features)
        return d


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Training rows with positive design weights ``w = 1/pi_1``.

    ``ids`` are population positions; they identify the training set for
    fingerprinting and keyed randomness.
    """

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(self.y, dtype=float).ravel()
        w = np.asarray(self.w, dtype=float).ravel()
        ids = np.asarray(self.ids, dtype=np.int64).ravel()
        if len(y) < 1:
            raise ValueError("training set needs at least one row")
        if not (len(y) == len(w) == len(ids) == x.shape[0]):
            raise ValueError("training arrays are not aligned")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("training weights must be finite and positive")
        # canonical order by population position: fits are row-permutation invariant
        order = np.argsort(ids, kind="stable")
        object.__setattr__(self, "x", np.ascontiguousarray(x[order]))
        object.__setattr__(self, "y", y[order])
        object.__setattr__(self, "w", w[order])
        object.__setattr__(self, "ids", ids[order])

    @classmethod
    def from_population(cls, pop: Population, idx, pi) -> "TrainingSet":
        idx = np.asarray(idx, dtype=np.int64)
        return cls(pop.x[idx], pop.y[idx], 1.0 / np.asarray(pi, dtype=float), idx)

    @property
    def n(self) -> int:
        return len(self.y)

    def fingerprint(self) -> str:
        return hashlib.blake2b(self.ids.tobytes(), digest_size=8).hexdigest()


@dataclass(frozen=True, eq=False)
class Predictor:
    """Fitted assisting model; call :meth:`predict` on feature rows."""

    spec: LearnerSpec
    train_ids: np.ndarray = field(repr=False)
    degenerate: bool = False

    def predict(self, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def fingerprint(self) -> str:
        return hashlib.blake2b(
            np.asarray(self.train_ids, dtype=np.int64).tobytes(), digest_size=8
        ).hexdigest()

    @property
    def descriptor(self) -> dict:
        return {**self.spec.describe(), "n_train": len(self.train_ids),
                "train_fingerprint": self.fingerprint, "degenerate": self.degenerate}

    def _select(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if self.spec.features is not None:
            x = x[:, list(self.spec.features)]
        return x


@dataclass(frozen=True, eq=False)
class LinearPredictor(Predictor):
    coef: np.ndarray = None
    rank: int = 0

    def predict(self, x) -> np.ndarray:
        z = self._select(x)
        if self.spec.intercept:
            return self.coef[0] + z @ self.coef[1:]
        return z @ self.coef


@dataclass(frozen=True, eq=False)
class ConstantPredictor(Predictor):
    def predict(self, x) -> np.ndarray:
        return np.full(self._select(x).shape[0], float(self.spec.value))


@dataclass(frozen=True, eq=False)
class ForestPredictor(Predictor):
    """A single tree is stored as a forest of one."""

    arrays: tuple = None

    @property
    def n_trees(self) -> int:
        return len(self.arrays[-1]) - 1

    def predict(self, x) -> np.ndarray:
        z = np.ascontiguousarray(self._select(x))
        return K.predict_forest(z, *self.arrays)


def design_matrix(x: np.ndarray, spec: LearnerSpec) -> np.ndarray:
    z = np.asarray(x, dtype=float)
    if spec.features is not None:
        z = z[:, list(spec.features)]
    if spec.intercept:
        z = np.column_stack([np.ones(len(z)), z])
    return z


def wls_fit(ts: TrainingSet, spec: LearnerSpec | None = None,
            rcond: float = 1e-10) -> LinearPredictor:
    """Weighted least squares ``b = (sum w x x')^- sum w x y``.

    Solved through an SVD of the sqrt-weighted design matrix; singular values
    below ``rcond`` times the largest are dropped, giving the minimum-norm
    solution. ``degenerate`` is set when the design is rank deficient.
    """
    spec = spec or LearnerSpec("wls", intercept=False)
    z = design_matrix(ts.x, spec)
    w = ts.w if spec.weighted else np.ones(ts.n)
    sw = np.sqrt(w)
    coef, _, rank, _ = np.linalg.lstsq(z * sw[:, None], ts.y * sw, rcond=rcond)
    return LinearPredictor(spec, ts.ids, bool(rank < z.shape[1]), coef=coef, rank=int(rank))


def _tree_seeds(rng: np.random.Generator | None, count: int) -> np.ndarray:
    if rng is None:
        return np.zeros(count, dtype=np.uint64)
    return rng.integers(0, 2**63 - 1, size=count, dtype=np.int64).astype(np.uint64)


def _grow(ts: TrainingSet, spec: LearnerSpec, n_trees: int, bootstrap: bool,
          rng: np.random.Generator | None) -> ForestPredictor:
    spec = spec.resolved(ts.x.shape[1])
    z = ts.x if spec.features is None else ts.x[:, list(spec.features)]
    z = np.ascontiguousarray(z)
    w = ts.w if spec.weighted else np.ones(ts.n)
    arrays = K.grow_forest(
        z, ts.y, w, n_trees, bootstrap,
        -1 if spec.max_depth is None else int(spec.max_depth),
        int(spec.min_leaf), int(spec.mtry), _tree_seeds(rng, n_trees),
    )
    return ForestPredictor(spec, ts.ids, arrays=arrays)


def tree_fit(ts: TrainingSet, spec: LearnerSpec | None = None,
             rng: np.random.Generator | None = None) -> ForestPredictor:
    """Weighted CART regression tree.

    Splits maximise the reduction of the weighted within-node sum of
    squares; leaves predict weighted means. Ties go to the lowest feature
    index, then the smallest threshold; thresholds are midpoints between
    consecutive distinct values.
    """
    spec = spec or LearnerSpec("tree")
    return _grow(ts, spec, 1, False, rng)


def forest_fit(ts: TrainingSet, spec: LearnerSpec | None = None,
               rng: np.random.Generator | None = None) -> ForestPredictor:
    """Random forest: mean of ``n_trees`` trees on bootstrap resamples."""
    spec = spec or LearnerSpec("forest")
    return _grow(ts, spec, spec.n_trees, spec.bootstrap, rng)


def fit(ts: TrainingSet, spec: LearnerSpec, rng: np.random.Generator | None = None) -> Predictor:
    """Dispatch on ``spec.kind``.

    When ``rng`` is omitted, randomized learners use a stream keyed by the
    learner seed and the content of the training set.
    """
    if spec.kind == "wls":
        return wls_fit(ts, spec)
    if spec.kind == "constant":
        return ConstantPredictor(spec, ts.ids)
    if rng is None and spec.randomized:
        rng = stream(spec.seed, "learner", *divmod(content_key(ts.ids), 2**32))
    if spec.kind == "tree":
        return tree_fit(ts, spec, rng)
    return forest_fit(ts, spec, rng)


def fit_on(pop: Population, idx, pi, spec: LearnerSpec) -> Predictor:
    """Fit ``spec`` on population positions ``idx`` with inclusion probabilities ``pi``."""
    return fit(TrainingSet.from_population(pop, idx, pi), spec)
