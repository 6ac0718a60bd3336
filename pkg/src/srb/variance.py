"""Variance estimators for the single-split and Rao-Blackwellised estimators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Population, fsum
from .designs import DesignError, SampleDraw, Split, SubsampleSpec, draw_split, enumerate_splits
from .estimators import FoldEstimates, fit_split, split_estimate, y1
from .learners import LearnerSpec, Predictor


class VarianceUnavailable(ValueError):
    """No unbiased variance estimator exists for this configuration."""


class DesignMismatchWarning(UserWarning):
    """The variance estimator was derived for a different design."""


@dataclass
class VarianceReport:
    value: float
    raw_value: float
    truncated: bool
    components: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @classmethod
    def from_raw(cls, raw: float, components: dict | None = None,
                 flags: list | None = None) -> "VarianceReport":
        raw = float(raw)
        return cls(max(raw, 0.0), raw, raw < 0, dict(components or {}), list(flags or []))

    def to_dict(self) -> dict:
        return {"value": self.value, "raw_value": self.raw_value, "truncated": self.truncated,
                "components": self.components, "flags": self.flags}


def y1_var_srs(split: Split, predictor: Predictor, pop: Population) -> float:
    """Conditionally unbiased variance estimate of ``y1`` given ``s1`` under SRS.

    Given ``s1``, ``s2`` is an SRS of ``n2`` units from the ``N - n1`` units
    outside ``s1``, so the usual SRS estimator is applied to the error total:
    ``(N - n1)^2 (1 - n2 / (N - n1)) s_e^2 / n2``.
    """
    if split.sample.design.kind != "srs":
        raise VarianceUnavailable(
            f"no unbiased conditional variance estimator for {split.sample.design.kind} designs"
        )
    n2 = split.n2
    if n2 < 2:
        raise VarianceUnavailable("n2 < 2: use the jackknife variance estimator instead")
    Nr = split.sample.N - split.n1
    e = pop.y[split.s2] - predictor.predict(pop.x[split.s2])
    ebar = fsum(e) / n2
    s2e = fsum((e - ebar) ** 2) / (n2 - 1)
    return Nr**2 * (1.0 - n2 / Nr) * s2e / n2


def _y1_and_var(split: Split, pop: Population, learner: LearnerSpec) -> tuple[float, float]:
    pred = fit_split(split, pop, learner)
    return y1(split, pred, pop), y1_var_srs(split, pred, pop)


def rb_var(sample: SampleDraw, scheme: SubsampleSpec, learner: LearnerSpec, pop: Population,
           rng: np.random.Generator | None = None, split: Split | None = None,
           average: bool = False) -> VarianceReport:
    """Design-unbiased variance estimate of the exact RB estimator.

    ``V(y1)_hat - V_q(y1 | s)``: the first term is the conditional estimate
    for one split (``split`` if given, else drawn from ``rng``), or its
    average over all splits when ``average=True``; the second is computed
    exactly over q.
    """
    splits = enumerate_splits(sample, scheme)
    vals = np.array([split_estimate(sp, pop, learner) for sp, _ in splits])
    q = np.array([qq for _, qq in splits])
    mean = fsum(q * vals)
    vq = fsum(q * (vals - mean) ** 2)
    if average:
        v1 = fsum([qq * _y1_and_var(sp, pop, learner)[1] for sp, qq in splits])
    else:
        if split is None:
            if rng is None:
                raise ValueError("rb_var needs rng or split when average=False")
            split = draw_split(sample, scheme, rng)
        v1 = _y1_and_var(split, pop, learner)[1]
    return VarianceReport.from_raw(v1 - vq, {"v_y1": v1, "v_q": vq})


def jackknife_var(folds: FoldEstimates, rb_point: float, N: int, n: int,
                  stratum_sizes=None) -> VarianceReport:
    """Jackknife variance estimate for the delete-one RB estimator.

    ``N^2 / n * s_z^2`` with ``z_j = (Y_(j) - (n/N) Y*) / (N - n)`` and
    ``s_z^2`` the sample variance of the z's; for the n exact folds this is
    ``N^2 / (n (n-1)) sum (z_j - zbar)^2``. With fewer or more fold values
    (Monte Carlo draws) the same plug-in is used. Stratified folds use the
    per-stratum analog summed over strata (pass ``stratum_sizes``).
    """
    if folds.strata is not None:
        if stratum_sizes is None:
            raise ValueError("stratum_sizes required for stratified folds")
        total = 0.0
        parts = {}
        for h in np.unique(folds.strata):
            comp = folds.components[folds.strata == h]
            Nh, nh = int(stratum_sizes[h]), len(comp)
            if nh < 2:
                raise VarianceUnavailable(f"stratum {h} has fewer than two folds")
            v = jackknife_var(FoldEstimates(comp, np.full(nh, 1 / nh)), fsum(comp) / nh, Nh, nh).raw_value
            parts[f"stratum_{h}"] = v
            total += v
        return VarianceReport.from_raw(total, parts)
    if N == n:
        return VarianceReport.from_raw(0.0, {"census": 1.0}, ["census: zero variance"])
    if n < 2 or len(folds.values) < 2:
        raise VarianceUnavailable("jackknife needs at least two folds")
    z = (folds.values - n / N * rb_point) / (N - n)
    zbar = fsum(z) / len(z)
    s2z = fsum((z - zbar) ** 2) / (len(z) - 1)
    return VarianceReport.from_raw(N**2 * s2z / n, {"s2_z": s2z})


def jackknife_for_design(folds: FoldEstimates, rb_point: float, sample: SampleDraw) -> VarianceReport:
    """:func:`jackknife_var` with the sample's design parameters.

    Unequal-probability designs get the unmodified estimator together with a
    design-mismatch flag and warning.
    """
    rep = jackknife_var(folds, rb_point, sample.N, sample.n, sample.stratum_sizes)
    if sample.design.kind == "cpoisson":
        msg = "jackknife derived for equal-probability sampling; unequal-probability design"
        warnings.warn(msg, DesignMismatchWarning, stacklevel=2)
        rep.flags.append("design-mismatch: " + msg)
    return rep


def mc_q_var(replicates) -> float:
    """Unbiased estimate of ``V_q`` of the MC mean: ``sum (y_k - ybar)^2 / (K (K-1))``."""
    r = np.asarray(replicates, dtype=float)
    K = len(r)
    if K < 2:
        raise ValueError("K >= 2 required")
    m = fsum(r) / K
    return fsum((r - m) ** 2) / (K * (K - 1))


def mc_rb_var(replicates, per_replicate_var) -> VarianceReport:
    """Design-unbiased variance estimate of the MC-RB estimator.

    ``mean_k V(y1_k)_hat - (1/K) sum_k (y1_k - mean)^2``.
    """
    r = np.asarray(replicates, dtype=float)
    v = np.asarray(per_replicate_var, dtype=float)
    K = len(r)
    if K < 2:
        raise ValueError("mc_rb_var needs K >= 2")
    if len(v) != K:
        raise ValueError("replicates and per-replicate variances must align")
    m = fsum(r) / K
    spread = fsum((r - m) ** 2) / K
    within = fsum(v) / K
    return VarianceReport.from_raw(
        within - spread,
        {"mean_v_y1": within, "spread": spread, "v_q_hat": spread / (K - 1)},
    )


def loo_mc_var(folds: FoldEstimates, mc_component: float, N: int, n: int,
               stratum_sizes=None) -> VarianceReport:
    """Jackknife on Monte Carlo delete-one folds, plus the MC variance term."""
    point = folds.aggregate
    base = jackknife_var(folds, point, N, n, stratum_sizes)
    raw = base.raw_value + mc_component
    comps = {"jackknife": base.raw_value, "mc": mc_component}
    return VarianceReport.from_raw(raw, comps, base.flags)
