"""Synthetic populations, replicated design-based studies and enumeration oracles."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Population, fsum
from .designs import (
    DesignSpec,
    SampleDraw,
    SubsampleSpec,
    draw_sample,
    enumerate_samples,
    enumerate_splits,
)
from .estimators import (
    EstimateReport,
    FoldEstimates,
    greg,
    greg_jackknife_avg,
    fit_split,
    ht,
    rb_exact,
    rb_loo,
    rb_mc,
    split_estimate,
)
from .learners import LearnerSpec
from .rng import stream
from .variance import (
    jackknife_for_design,
    loo_mc_var,
    mc_q_var,
    mc_rb_var,
    rb_var,
    y1_var_srs,
)

SCENARIOS = ("S1", "S2", "S3", "SSBS-analog")
_DEFAULT_N = {"S1": 200, "S2": 100, "S3": 200, "SSBS-analog": 2000}


@dataclass(frozen=True)
class ScenarioSpec:
    """Synthetic population recipe; ``N=None`` uses the scenario default."""

    name: str = "S1"
    N: int | None = None
    seed: int = 0
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"scenario.name must be one of {SCENARIOS}, got {self.name!r}")
        if self.N is not None and self.N < 2:
            raise ValueError(f"scenario.N must be >= 2, got {self.N}")
        if not math.isfinite(self.noise_scale) or self.noise_scale < 0:
            raise ValueError("scenario.noise_scale must be finite and >= 0")

    @property
    def size(self) -> int:
        return self.N or _DEFAULT_N[self.name]


LOGNORMAL_SIGMA2 = math.log(2.0)
LOGNORMAL_MU = -math.log(2.0) / 2


def _x1_x2(rng: np.random.Generator, N: int) -> tuple[np.ndarray, np.ndarray]:
    # log-normal with mean 1 and variance 1; Poisson(5) redrawn until positive
    # so that x2 can serve as a PPS size measure
    x1 = rng.lognormal(LOGNORMAL_MU, math.sqrt(LOGNORMAL_SIGMA2), N)
    x2 = rng.poisson(5.0, N).astype(float)
    while np.any(x2 == 0):
        zero = x2 == 0
        x2[zero] = rng.poisson(5.0, int(zero.sum()))
    return x1, x2


def generate_scenario(spec: ScenarioSpec) -> Population:
    """Build the population described by ``spec`` (deterministic in the seed).

    S1: ``|1.5 x1 + x2 + e|``, ``var(e) = var(x1)/4 = 1/4``.
    S2: as S1 but ``var(e) = x1`` (heteroscedastic).
    S3: ``|0.5 x1 + 0.25 x1^2 + x2 + e|``, ``var(e) = sqrt(x1)``.
    SSBS-analog: synthetic business register, see :func:`_ssbs_analog`.
    """
    rng = stream(spec.seed, "scenario:" + spec.name)
    N = spec.size
    if spec.name == "SSBS-analog":
        return _ssbs_analog(rng, N, spec.noise_scale)
    x1, x2 = _x1_x2(rng, N)
    z = rng.standard_normal(N) * spec.noise_scale
    if spec.name == "S1":
        y = np.abs(1.5 * x1 + x2 + 0.5 * z)
    elif spec.name == "S2":
        y = np.abs(1.5 * x1 + x2 + np.sqrt(x1) * z)
    else:
        y = np.abs(0.5 * x1 + 0.25 * x1**2 + x2 + x1**0.25 * z)
    return Population(np.arange(1, N + 1), y, np.column_stack([x1, x2]))


def _ssbs_analog(rng: np.random.Generator, N: int, noise: float) -> Population:
    """Synthetic enterprise population with 17 register features and 3 size strata.

    Survey turnover ``y`` grows with the employee count (feature 1, which
    also defines the strata at its 50% and 85% quantiles). Register
    turnover (feature 0) is a noisy copy of ``y`` whose meaning depends on
    the filing regime (feature 2): full turnover, half of it, or zero for
    unregistered units; about 1% of units carry a gross recording error
    inflating it 5 to 20 times. Features 3-7 are sector, wages, purchases,
    assets and age; features 8-16 are pure noise.
    """
    emp = np.maximum(1.0, np.round(np.exp(rng.normal(1.8, 0.5, N))))
    productivity = np.exp(rng.normal(0.0, 0.35 * noise, N))
    u = rng.random(N)
    regime = np.where(u < 0.15, 2, np.where(u < 0.4, 1, 0))
    sector = rng.integers(0, 4, N)
    y = 1.2 * emp**0.9 * productivity * np.array([1.0, 1.3, 0.8, 1.6])[sector]
    gross = np.where(rng.random(N) < 0.01, rng.uniform(5.0, 20.0, N), 1.0)
    tax = y * np.exp(rng.normal(0.0, 0.05 * noise, N)) * np.array([1.0, 0.5, 0.0])[regime] * gross
    wages = emp * np.exp(rng.normal(0.0, 0.3, N))
    purchases = 0.6 * y * np.exp(rng.normal(0.0, 0.4, N))
    assets = emp**1.1 * np.exp(rng.normal(0.0, 0.6, N))
    age = rng.integers(1, 40, N).astype(float)
    extra = rng.standard_normal((N, 9))
    x = np.column_stack([tax, emp, regime, sector, wages, purchases, assets, age, extra])
    strata = np.digitize(emp, np.quantile(emp, [0.5, 0.85]), right=True)
    return Population(np.arange(1, N + 1), y, x, strata)


# ---------------------------------------------------------------------------
# estimator configuration

ESTIMATOR_KINDS = ("ht", "greg", "rb_loo", "rb_exact", "rb_mc", "greg_jackknife")
VARIANCE_KINDS = (None, "jackknife", "rb_var", "mc", "loo_mc")


@dataclass(frozen=True)
class EstimatorConfig:
    name: str
    kind: str = "ht"
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    scheme: SubsampleSpec = field(default_factory=SubsampleSpec)
    K: int = 100
    variance: str | None = None
    pi2: str = "auto"

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"estimator.kind must be one of {ESTIMATOR_KINDS}, got {self.kind!r}")
        if self.variance not in VARIANCE_KINDS:
            raise ValueError(f"estimator.variance must be one of {VARIANCE_KINDS[1:]}")


def evaluate(cfg: EstimatorConfig, sample: SampleDraw, pop: Population,
             rng: np.random.Generator) -> EstimateReport:
    """Point estimate of the total (and variance if configured) for one sample."""
    if cfg.kind == "ht":
        return EstimateReport(ht(sample, pop))
    if cfg.kind == "greg":
        flags: list[str] = []
        return EstimateReport(greg(sample, pop, cfg.learner, flags), flags=flags)
    if cfg.kind == "greg_jackknife":
        return EstimateReport(greg_jackknife_avg(sample, pop, cfg.learner))
    if cfg.kind == "rb_loo":
        rep, folds = rb_loo(sample, cfg.learner, pop, cfg.pi2)
        if cfg.variance == "jackknife":
            _attach(rep, jackknife_for_design(folds, rep.point, sample), "jackknife")
        return rep
    if cfg.kind == "rb_exact":
        rep, folds = rb_exact(sample, cfg.scheme, cfg.learner, pop)
        if cfg.variance == "rb_var":
            _attach(rep, rb_var(sample, cfg.scheme, cfg.learner, pop, rng=rng), "rb_var")
        elif cfg.variance == "jackknife":
            _attach(rep, jackknife_for_design(folds, rep.point, sample), "jackknife")
        return rep
    rep, reps = rb_mc(sample, cfg.scheme, cfg.learner, cfg.K, rng, pop)
    if cfg.variance == "mc":
        pv = [y1_var_srs(sp, fit_split(sp, pop, cfg.learner), pop) for sp in reps.splits]
        _attach(rep, mc_rb_var(reps.values, pv), "mc")
    elif cfg.variance == "loo_mc":
        folds = FoldEstimates(reps.values, np.full(cfg.K, 1.0 / cfg.K))
        _attach(rep, loo_mc_var(folds, mc_q_var(reps.values), sample.N, sample.n), "loo_mc")
    return rep


def _attach(rep: EstimateReport, v, method: str) -> None:
    rep.variance, rep.variance_raw, rep.variance_truncated = v.value, v.raw_value, v.truncated
    rep.variance_method = method
    rep.flags += [f for f in v.flags if f not in rep.flags]
    if v.truncated:
        rep.flags.append("variance truncated at 0")


# ---------------------------------------------------------------------------
# replicated studies

@dataclass
class StudyRow:
    estimator: str
    bias: float
    mc_error: float
    rmse: float
    var_bias: float | None = None
    var_rmse: float | None = None
    var_mc_error: float | None = None
    mean_var: float | None = None
    empirical_var: float | None = None
    failures: int = 0
    error: str | None = None


@dataclass
class StudyReport:
    rows: dict[str, StudyRow]
    B: int
    theta: float
    seed: int
    fingerprint: str
    estimates: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    variances: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    raw_variances: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def __getitem__(self, name: str) -> StudyRow:
        return self.rows[name]

    CSV_COLUMNS = ("estimator", "bias", "mc_error", "rmse", "var_bias", "var_rmse")

    def to_csv(self, path) -> None:
        def fmt(v):
            return "" if v is None else repr(float(v))

        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# config_fingerprint={self.fingerprint}\n# seed={self.seed}\n")
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            for r in self.rows.values():
                fh.write(",".join([r.estimator] + [fmt(getattr(r, c)) for c in self.CSV_COLUMNS[1:]]) + "\n")

    def to_replicates_csv(self, path) -> None:
        """One row per estimator and replicate, including the variance report fields."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# config_fingerprint={self.fingerprint}\n# seed={self.seed}\n")
            fh.write("estimator,replicate,estimate,var_value,var_raw,var_truncated\n")
            for name, est in self.estimates.items():
                var = self.variances.get(name)
                raw = self.raw_variances.get(name)
                for b, e in enumerate(est):
                    cells = [name, str(b), repr(float(e))]
                    if var is not None and raw is not None and b < len(var):
                        cells += [repr(float(var[b])), repr(float(raw[b])), str(bool(raw[b] < 0)).lower()]
                    else:
                        cells += ["", "", ""]
                    fh.write(",".join(cells) + "\n")

    def summary(self) -> dict:
        return {
            "config_fingerprint": self.fingerprint,
            "seed": self.seed,
            "B": self.B,
            "theta": self.theta,
            "rows": {k: asdict(v) for k, v in self.rows.items()},
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def summarize(estimates: np.ndarray, theta: float) -> tuple[float, float, float]:
    """``(bias, mc_error, rmse)`` of replicated estimates of ``theta``."""
    est = np.asarray(estimates, dtype=float)
    B = len(est)
    mean = fsum(est) / B
    v = fsum((est - mean) ** 2) / (B - 1)
    rmse = math.sqrt(fsum((est - theta) ** 2) / B)
    return mean - theta, math.sqrt(v / B), rmse


def _variance_stats(est: np.ndarray, var: np.ndarray) -> tuple[float, float, float, float, float]:
    B = len(est)
    mean = fsum(est) / B
    dev2 = (est - mean) ** 2 * B / (B - 1)
    v = fsum(dev2) / B
    mean_var = fsum(var) / B
    # paired standard error: both the variance estimates and v are Monte Carlo quantities
    d = var - dev2
    se = math.sqrt(fsum((d - fsum(d) / B) ** 2) / (B - 1) / B)
    rmse = math.sqrt(fsum((var - v) ** 2) / B)
    return mean_var - v, rmse, se, mean_var, v


def config_fingerprint(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=_jsonable)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    return str(o)


def run_study(pop: Population, design: DesignSpec, estimators: Sequence[EstimatorConfig],
              B: int = 500, seed: int = 0, threads: int = 1,
              target: str = "mean") -> StudyReport:
    """Replicate sampling ``B`` times and summarise every estimator.

    Estimates are of the population mean (``target="mean"``) or total.
    Replicate ``b`` uses streams keyed by ``(seed, purpose, b)`` so results
    are identical for any ``threads``. An estimator failing on a replicate
    is recorded in its row rather than aborting the study.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    scale = 1.0 / pop.N if target == "mean" else 1.0
    theta = pop.Y * scale
    names = [e.name for e in estimators]
    if len(set(names)) != len(names):
        raise ValueError("estimator names must be unique")

    def one(b: int):
        sample = draw_sample(pop, design, stream(seed, "sample", b))
        out = {}
        for cfg in estimators:
            try:
                rep = evaluate(cfg, sample, pop, stream(seed, "estimator:" + cfg.name, b))
                var = raw = None
                if rep.variance is not None:
                    var, raw = rep.variance * scale**2, rep.variance_raw * scale**2
                out[cfg.name] = (rep.point * scale, var, None, raw)
            except Exception as exc:  # noqa: BLE001 - surfaced per row
                out[cfg.name] = (math.nan, None, f"{type(exc).__name__}: {exc}", None)
        return out

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]

    rows, estimates, variances, raws = {}, {}, {}, {}
    for cfg in estimators:
        vals = np.array([r[cfg.name][0] for r in results])
        errs = [r[cfg.name][2] for r in results if r[cfg.name][2]]
        ok = np.isfinite(vals)
        estimates[cfg.name] = vals
        if ok.sum() < 2:
            rows[cfg.name] = StudyRow(cfg.name, math.nan, math.nan, math.nan,
                                      failures=len(errs), error=errs[0] if errs else None)
            continue
        bias, mce, rmse = summarize(vals[ok], theta)
        row = StudyRow(cfg.name, bias, mce, rmse, failures=len(errs),
                       error=errs[0] if errs else None)
        vs = [r[cfg.name][1] for r in results]
        if cfg.variance and all(v is not None for v, k in zip(vs, ok) if k):
            var = np.array([v for v, k in zip(vs, ok) if k], dtype=float)
            variances[cfg.name] = var
            raws[cfg.name] = np.array([r[cfg.name][3] for r, k in zip(results, ok) if k], dtype=float)
            (row.var_bias, row.var_rmse, row.var_mc_error,
             row.mean_var, row.empirical_var) = _variance_stats(vals[ok], var)
        rows[cfg.name] = row
    fp = config_fingerprint({"design": design, "estimators": list(estimators), "B": B,
                             "seed": seed, "N": pop.N, "Y": pop.Y, "target": target})
    return StudyReport(rows, B, theta, seed, fp, estimates, variances, raws)


# ---------------------------------------------------------------------------
# exhaustive enumeration

def exhaustive_expectation(pop: Population, design: DesignSpec,
                           estimator: Callable, scheme: SubsampleSpec | None = None,
                           k: int = 1, combine: Callable | None = None,
                           budget: int = 10**6) -> tuple[float, float]:
    """Exact mean and variance of an estimator over the full design.

    * ``scheme=None``: ``estimator(sample)`` over p(s).
    * ``k=1``: ``estimator(sample, split)`` over the product law p(s) q(s1|s).
    * ``k>1``: ``estimator(sample, split)`` returns a per-split payload and
      ``combine(payloads)`` the value for ``k`` independent splits drawn
      from q, enumerated over all ordered k-tuples.
    """
    probs: list[float] = []
    values: list[float] = []
    for sample, p in enumerate_samples(pop, design, budget):
        if scheme is None:
            probs.append(p)
            values.append(float(estimator(sample)))
            continue
        splits = enumerate_splits(sample, scheme, budget)
        if k == 1:
            for sp, q in splits:
                probs.append(p * q)
                values.append(float(estimator(sample, sp)))
            continue
        if combine is None:
            raise ValueError("combine is required for k > 1")
        if len(splits) ** k > budget:
            raise ValueError(f"{len(splits)}^{k} split tuples exceed the budget {budget}")
        payloads = [estimator(sample, sp) for sp, _ in splits]
        qs = [q for _, q in splits]
        for combo in itertools.product(range(len(splits)), repeat=k):
            probs.append(p * math.prod(qs[c] for c in combo))
            values.append(float(combine([payloads[c] for c in combo])))
    pr = np.array(probs)
    vals = np.array(values)
    E = fsum(pr * vals)
    V = fsum(pr * (vals - E) ** 2)
    return E, V


@dataclass
class VarianceDecomposition:
    """Terms of ``V(rb) = E1 V2(y1 | s1) - Ep Vq(y1 | s)`` computed by enumeration."""

    E_y1: float
    V_y1: float
    E_rb: float
    V_rb: float
    E1_V2: float
    Ep_Vq: float
    p1_total: float


def variance_decomposition(pop: Population, design: DesignSpec, scheme: SubsampleSpec,
                           learner: LearnerSpec) -> VarianceDecomposition:
    """Enumerate (s, s1) pairs and compute both sides of the RB variance identity.

    The conditional terms are obtained by grouping on ``s1`` with
    ``p1(s1) = sum_{s contains s1} q(s1|s) p(s)`` and
    ``p2(s2|s1) = p(s) q(s1|s) / p1(s1)``.
    """
    by_s1: dict[bytes, list[tuple[float, float]]] = defaultdict(list)
    rb_terms: list[tuple[float, float, float]] = []
    for sample, p in enumerate_samples(pop, design):
        splits = enumerate_splits(sample, scheme)
        vals = np.array([split_estimate(sp, pop, learner) for sp, _ in splits])
        qs = np.array([q for _, q in splits])
        rb = fsum(qs * vals)
        vq = fsum(qs * (vals - rb) ** 2)
        rb_terms.append((p, rb, vq))
        for (sp, q), v in zip(splits, vals):
            by_s1[sp.s1.tobytes()].append((p * q, v))
    E1V2 = 0.0
    p1_total = 0.0
    all_p, all_v = [], []
    for items in by_s1.values():
        w = np.array([a for a, _ in items])
        v = np.array([b for _, b in items])
        p1 = fsum(w)
        e2 = fsum(w * v) / p1
        v2 = fsum(w * (v - e2) ** 2) / p1
        E1V2 += p1 * v2
        p1_total += p1
        all_p.extend(w)
        all_v.extend(v)
    all_p, all_v = np.array(all_p), np.array(all_v)
    E_y1 = fsum(all_p * all_v)
    V_y1 = fsum(all_p * (all_v - E_y1) ** 2)
    ps = np.array([t[0] for t in rb_terms])
    rbs = np.array([t[1] for t in rb_terms])
    vqs = np.array([t[2] for t in rb_terms])
    E_rb = fsum(ps * rbs)
    V_rb = fsum(ps * (rbs - E_rb) ** 2)
    return VarianceDecomposition(E_y1, V_y1, E_rb, V_rb, E1V2, fsum(ps * vqs), p1_total)
