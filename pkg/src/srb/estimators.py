"""Population-total estimators.

Horvitz-Thompson and GREG, the single-split estimator ``y1`` (training sum
plus predictions plus inverse-probability-weighted test errors), and its
Rao-Blackwellised versions: exact averaging over all splits, Monte Carlo
averaging over K random splits, and the delete-one (leave-one-out) special
case. Also the linear-weight form of the exact estimator and the averaged
delete-one GREG jackknife replicates used as a comparison baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Population, fsum
from .designs import (
    BudgetExceeded,
    DesignError,
    SampleDraw,
    Split,
    SubsampleSpec,
    delete_one_split,
    draw_split,
    enumerate_splits,
)
from .learners import LearnerSpec, Predictor, design_matrix, fit_on, wls_fit, TrainingSet


class ContractViolation(RuntimeError):
    """A predictor was used on data it must not have seen."""


@dataclass
class FoldEstimates:
    """Per-split estimates with their q-probabilities.

    For delete-one splits ``values[j]`` is the estimate leaving out the
    j-th sampled unit. Under stratified designs each fold estimates only the
    total of the left-out unit's stratum; ``components`` holds those stratum
    estimates, ``strata`` their labels, and ``values`` the total-scale
    rescaling ``(n / n_h) * component`` whose plain mean is the RB estimate.
    """

    values: np.ndarray
    weights: np.ndarray
    left_out: np.ndarray | None = None
    components: np.ndarray | None = None
    strata: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)

    @property
    def aggregate(self) -> float:
        return fsum(self.weights * self.values)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("fold,left_out,weight,value\n")
            for k, (w, v) in enumerate(zip(self.weights, self.values)):
                j = "" if self.left_out is None else str(int(self.left_out[k]))
                fh.write(f"{k},{j},{float(w)!r},{float(v)!r}\n")


@dataclass
class EstimateReport:
    point: float
    variance: float | None = None
    variance_method: str | None = None
    mc_error: float | None = None
    flags: list[str] = field(default_factory=list)
    variance_raw: float | None = None
    variance_truncated: bool | None = None

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "variance": self.variance,
            "variance_raw": self.variance_raw,
            "variance_truncated": self.variance_truncated,
            "variance_method": self.variance_method,
            "mc_error": self.mc_error,
            "flags": list(self.flags),
        }


def ht(sample: SampleDraw, pop: Population) -> float:
    """Horvitz-Thompson estimator of the population total."""
    return fsum(pop.y[sample.indices] / sample.pi)


def greg(sample: SampleDraw, pop: Population, spec: LearnerSpec | None = None,
         flags: list | None = None) -> float:
    """GREG estimator ``X'b + sum_s (y - x'b)/pi`` with WLS on the full sample."""
    spec = spec or LearnerSpec("wls")
    pred = wls_fit(TrainingSet.from_population(pop, sample.indices, sample.pi), spec)
    if pred.degenerate and flags is not None:
        flags.append("greg: rank-deficient WLS fit")
    Xtot = np.array([fsum(c) for c in design_matrix(pop.x, spec).T])
    resid = pop.y[sample.indices] - pred.predict(pop.x[sample.indices])
    return fsum(np.append(Xtot * pred.coef, resid / sample.pi))


def y1(split: Split, predictor: Predictor, pop: Population, stratum: int | None = None) -> float:
    """Single-split estimator of the total.

    ``sum_{s1} y + sum_{U \\ s1} mu(x) + sum_{s2} (y - mu(x)) / pi_2``.
    The predictor must have been trained on exactly ``s1``. With ``stratum``
    all three sums are restricted to that stratum, estimating its total.
    """
    if not np.array_equal(np.sort(predictor.train_ids), split.s1):
        raise ContractViolation(
            "predictor was not trained on the training subsample of this split; "
            "test-set discrepancies would be residuals, not errors"
        )
    s1, s2, pi2 = split.s1, split.s2, split.pi2
    rest = split.complement()
    if stratum is not None:
        s1 = s1[pop.strata[s1] == stratum]
        keep = pop.strata[s2] == stratum
        s2, pi2 = s2[keep], pi2[keep]
        rest = rest[pop.strata[rest] == stratum]
    mu_rest = predictor.predict(pop.x[rest])
    pos2 = np.searchsorted(rest, s2)
    errors = pop.y[s2] - mu_rest[pos2]
    return fsum(np.concatenate([pop.y[s1], mu_rest, errors / pi2]))


def fit_split(split: Split, pop: Population, learner: LearnerSpec) -> Predictor:
    """Fit ``learner`` on the training part of ``split`` with weights ``1/pi_1``."""
    return fit_on(pop, split.s1, split.pi1, learner)


def _fold(split: Split, pop: Population, learner: LearnerSpec,
          flags: list | None = None) -> tuple[float, float, int | None]:
    """Fit on ``s1`` and evaluate; returns (total-scale value, component, stratum)."""
    pred = fit_split(split, pop, learner)
    if pred.degenerate and flags is not None:
        flags.append(f"rank-deficient fit on training set of size {split.n1}")
    sample = split.sample
    if sample.design.kind != "stratified":
        v = y1(split, pred, pop)
        return v, v, None
    if split.n2 != 1:
        raise DesignError("stratified designs support delete-one subsampling only")
    h = int(pop.strata[split.s2[0]])
    comp = y1(split, pred, pop, stratum=h)
    n_h = int(np.sum(sample.strata == h))
    return sample.n / n_h * comp, comp, h


def split_estimate(split: Split, pop: Population, learner: LearnerSpec,
                   flags: list | None = None) -> float:
    """``y1`` for ``split`` with ``learner`` fitted on its training part.

    Under a stratified design (delete-one splits only) the value is the
    left-out unit's stratum estimate rescaled by ``n / n_h``, so that its
    q-expectation is the stratum-wise RB estimate of the total.
    """
    return _fold(split, pop, learner, flags)[0]


def _dedupe(flags: list) -> list:
    out = []
    for f in flags:
        if f not in out:
            out.append(f)
    return out


def _folds_report(splits, weights, pop, learner, delete_one: bool):
    flags: list[str] = []
    res = [_fold(sp, pop, learner, flags) for sp in splits]
    stratified = res[0][2] is not None
    folds = FoldEstimates(
        [r[0] for r in res], weights,
        np.array([int(sp.s2[0]) for sp in splits]) if delete_one else None,
        np.array([r[1] for r in res]) if stratified else None,
        np.array([r[2] for r in res]) if stratified else None,
    )
    if not all(sp.pi2_exact for sp in splits):
        flags.append("approximate pi2")
    if stratified:
        point = fsum([fsum(folds.components[folds.strata == h]) / np.sum(folds.strata == h)
                      for h in np.unique(folds.strata)])
    else:
        point = folds.aggregate
    return EstimateReport(point, flags=_dedupe(flags)), folds


def rb_exact(sample: SampleDraw, scheme: SubsampleSpec, learner: LearnerSpec,
             pop: Population, budget: int = 10**6) -> tuple[EstimateReport, FoldEstimates]:
    """Rao-Blackwellised estimator: q-weighted mean of ``y1`` over all splits.

    Under a stratified design the delete-one average is taken within each
    stratum and the stratum estimates are summed.
    """
    if sample.design.kind == "stratified" and scheme.kind != "delete-one":
        raise DesignError("stratified designs support delete-one subsampling only")
    try:
        splits = enumerate_splits(sample, scheme, budget)
    except BudgetExceeded as exc:
        raise BudgetExceeded(f"{exc}; use rb_mc for a Monte Carlo approximation") from None
    return _folds_report([sp for sp, _ in splits], [q for _, q in splits], pop, learner,
                         scheme.kind == "delete-one")


@dataclass
class MCReplicates:
    values: np.ndarray
    splits: list = field(repr=False)


def rb_mc(sample: SampleDraw, scheme: SubsampleSpec, learner: LearnerSpec, K: int,
          rng: np.random.Generator, pop: Population,
          replace: bool = True) -> tuple[EstimateReport, MCReplicates]:
    """Monte Carlo RB estimator: mean of ``y1`` over K splits drawn from q.

    ``replace=False`` draws K distinct splits uniformly (all of them when K
    equals the number of possible splits). ``mc_error`` is the square root
    of ``sum (y1_k - mean)^2 / (K (K - 1))``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if sample.design.kind == "stratified" and scheme.kind != "delete-one":
        raise DesignError("stratified designs support delete-one subsampling only")
    flags: list[str] = []
    if replace:
        splits = [draw_split(sample, scheme, rng) for _ in range(K)]
    else:
        every = enumerate_splits(sample, scheme)
        if K > len(every):
            raise ValueError(f"K={K} exceeds the {len(every)} distinct splits")
        pick = np.sort(rng.choice(len(every), K, replace=False))
        splits = [every[k][0] for k in pick]
    cache: dict[bytes, float] = {}
    values = np.empty(K)
    for k, sp in enumerate(splits):
        key = sp.s1.tobytes()
        if key not in cache:
            cache[key] = split_estimate(sp, pop, learner, flags)
        values[k] = cache[key]
    point = fsum(values) / K
    mc_error = None
    if K >= 2:
        mc_error = math.sqrt(fsum((values - point) ** 2) / (K * (K - 1)))
    if not all(sp.pi2_exact for sp in splits):
        flags.append("approximate pi2")
    return EstimateReport(point, mc_error=mc_error, flags=_dedupe(flags)), MCReplicates(values, splits)


def rb_loo(sample: SampleDraw, learner: LearnerSpec, pop: Population,
           pi2: str = "auto") -> tuple[EstimateReport, FoldEstimates]:
    """Delete-one RB estimator: mean of the n leave-one-out estimates.

    ``pi2="approx"`` replaces the conditional test probability of the left
    out unit by ``pi_j / (n (1 - (n-1)/N))``.
    """
    if sample.n < 2:
        raise ValueError("delete-one RB needs n >= 2")
    splits = [delete_one_split(sample, j, pi2) for j in range(sample.n)]
    return _folds_report(splits, np.full(sample.n, 1.0 / sample.n), pop, learner, True)


def rb_loo_approx_linear(sample: SampleDraw, pop: Population, spec: LearnerSpec | None = None,
                         factor: float | None = None) -> float:
    """Closed-form approximate delete-one RB estimator for a linear learner.

    ``X' mean_j b_(j) + f sum_j y_j/pi_j - f sum_j x_j' b_(j) / pi_j`` with
    ``f = 1 - (n-1)/N`` unless ``factor`` is given.
    """
    spec = spec or LearnerSpec("wls")
    n, N = sample.n, sample.N
    f = 1.0 - (n - 1) / N if factor is None else factor
    Z = design_matrix(pop.x, spec)
    Ztot = np.array([fsum(c) for c in Z.T])
    coefs = _loo_coefs(sample, pop, spec)
    zs = Z[sample.indices]
    ys = pop.y[sample.indices]
    fitted = np.einsum("jk,jk->j", zs, coefs)
    terms = np.concatenate([Ztot * coefs.mean(axis=0), f * ys / sample.pi, -f * fitted / sample.pi])
    return fsum(terms)


def _loo_coefs(sample: SampleDraw, pop: Population, spec: LearnerSpec) -> np.ndarray:
    out = []
    for j in range(sample.n):
        keep = np.arange(sample.n) != j
        ts = TrainingSet.from_population(pop, sample.indices[keep], sample.pi[keep])
        out.append(wls_fit(ts, spec).coef)
    return np.array(out)


def greg_jackknife_avg(sample: SampleDraw, pop: Population, spec: LearnerSpec | None = None) -> float:
    """Mean of the delete-one GREG jackknife replicates.

    Replicate j is ``X' b_(j) + n/(n-1) sum_{i != j} (y_i - x_i' b_(j)) / pi_i``.
    """
    spec = spec or LearnerSpec("wls")
    n = sample.n
    if n < 2:
        raise ValueError("jackknife needs n >= 2")
    Z = design_matrix(pop.x, spec)
    Ztot = np.array([fsum(c) for c in Z.T])
    coefs = _loo_coefs(sample, pop, spec)
    zs, ys = Z[sample.indices], pop.y[sample.indices]
    reps = []
    for j in range(n):
        keep = np.arange(n) != j
        resid = (ys[keep] - zs[keep] @ coefs[j]) / sample.pi[keep]
        reps.append(fsum(np.append(Ztot * coefs[j], n / (n - 1) * resid)))
    return fsum(reps) / n


def split_linear_weights(split: Split, pop: Population, spec: LearnerSpec | None = None,
                         rcond: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Weights ``w`` over the sample with ``y1 = sum w_i y_i`` for a WLS learner.

    Training units get ``1 + (X1c - X1c_hat)' G^- x_i / pi_1i`` with
    ``G = sum_{s1} x x' / pi_1``; test units get ``1 / pi_2i``. Returns the
    weights aligned with ``split.sample.indices`` and a singular-G flag.
    """
    spec = spec or LearnerSpec("wls")
    sample = split.sample
    Z = design_matrix(pop.x, spec)
    Z1, Z2 = Z[split.s1], Z[split.s2]
    rest = split.complement()
    X1c = np.array([fsum(c) for c in Z[rest].T])
    X1c_hat = np.array([fsum(c) for c in (Z2 / split.pi2[:, None]).T])
    G = (Z1 / split.pi1[:, None]).T @ Z1
    Ginv = np.linalg.pinv(G, rcond=rcond)
    singular = np.linalg.matrix_rank(G, tol=rcond * np.linalg.norm(G, 2)) < G.shape[0] if G.size else True
    w = np.empty(sample.n)
    pos1 = np.searchsorted(sample.indices, split.s1)
    pos2 = np.searchsorted(sample.indices, split.s2)
    w[pos1] = 1.0 + (Z1 / split.pi1[:, None]) @ (Ginv @ (X1c - X1c_hat))
    w[pos2] = 1.0 / split.pi2
    return w, bool(singular)


def rb_linear_weights(sample: SampleDraw, pop: Population, scheme: SubsampleSpec,
                      spec: LearnerSpec | None = None,
                      flags: list | None = None) -> np.ndarray:
    """RB weights ``w*_i = E_q(w_i | s)``; ``sum w*_i y_i`` equals the exact RB estimate."""
    acc = np.zeros(sample.n)
    for split, q in enumerate_splits(sample, scheme):
        w, singular = split_linear_weights(split, pop, spec)
        if singular and flags is not None:
            flags.append("singular training Gram matrix: minimum-norm weights")
        acc += q * w
    return acc


def implied_totals(sample: SampleDraw, pop: Population, weights: np.ndarray,
                   spec: LearnerSpec | None = None) -> np.ndarray:
    """Totals of the design-matrix columns reproduced by ``weights``."""
    Z = design_matrix(pop.x, spec or LearnerSpec("wls"))[sample.indices]
    return np.array([fsum(weights * c) for c in Z.T])


def expansion_total(sample: SampleDraw, pop: Population) -> float:
    """``(N/n) sum_s y``."""
    return sample.N / sample.n * fsum(pop.y[sample.indices])


__all__ = [
    "ContractViolation", "EstimateReport", "FoldEstimates", "MCReplicates",
    "ht", "greg", "y1", "fit_split", "split_estimate", "rb_exact", "rb_mc", "rb_loo",
    "rb_loo_approx_linear", "greg_jackknife_avg", "split_linear_weights",
    "rb_linear_weights", "implied_totals", "expansion_total",
]
