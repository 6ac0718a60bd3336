"""Finite-sample diagnostics for the consistency conditions of delete-one RB.

Each statistic measures, on one realised sample, how far a condition is
from holding: how much the predictor moves when one (or two) units are
deleted, whether the delete-one size estimators reweight predictions
correctly, and whether the design makes the delete-one expansion of y
consistent. :func:`stability_trace` follows the median statistic over a
growing sequence of sample sizes and summarises it by a log-log slope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Population, fsum
from .designs import DesignSpec, SampleDraw, delete_one_split, draw_sample
from .learners import LearnerSpec, Predictor, TrainingSet, fit
from .rng import stream

PROBE_CAP = 500
PAIR_CAP = 200
EXHAUSTIVE_PAIRS_MAX_N = 20
LOG_FLOOR = 1e-15
CONDITIONS = ("q", "twice-q", "p", "pq", "loo-consistency")


def probe_grid(N: int, cap: int = PROBE_CAP) -> np.ndarray:
    """All population positions, or ``cap`` evenly spaced ones when ``N > cap``."""
    if N <= cap:
        return np.arange(N)
    return np.unique(np.linspace(0, N - 1, cap).round().astype(np.int64))


def _fit_subset(pop: Population, sample: SampleDraw, keep: np.ndarray,
                learner: LearnerSpec) -> Predictor:
    return fit(TrainingSet.from_population(pop, sample.indices[keep], sample.pi[keep]), learner)


def _delete_one_predictions(sample, learner, pop, xq) -> np.ndarray:
    """Row j holds predictions at ``xq`` of the learner trained without sampled unit j."""
    n = sample.n
    out = np.empty((n, len(xq)))
    for j in range(n):
        keep = np.arange(n) != j
        out[j] = _fit_subset(pop, sample, keep, learner).predict(xq)
    return out


def q_stability_stat(sample: SampleDraw, learner: LearnerSpec, pop: Population,
                     probe: np.ndarray | None = None) -> float:
    """``max_{j in s, k in probe} |mu(x_k, s_j) - mu(x_k, s)|``."""
    if sample.n < 2:
        raise ValueError("q-stability needs n >= 2")
    probe = probe_grid(pop.N) if probe is None else probe
    xq = pop.x[probe]
    full = _fit_subset(pop, sample, np.ones(sample.n, bool), learner).predict(xq)
    loo = _delete_one_predictions(sample, learner, pop, xq)
    return float(np.max(np.abs(loo - full)))


def _pairs(n: int, rng: np.random.Generator | None, cap: int) -> np.ndarray:
    """Ordered pairs ``(i, j)``, ``i != j``: all of them for small n, else ``cap`` distinct ones."""
    if n <= EXHAUSTIVE_PAIRS_MAX_N:
        return np.array([(i, j) for j in range(n) for i in range(n) if i != j])
    rng = rng if rng is not None else stream(0, "stability-pairs", n)
    flat = rng.choice(n * (n - 1), size=min(cap, n * (n - 1)), replace=False)
    j, r = np.divmod(flat, n - 1)
    i = np.where(r >= j, r + 1, r)
    return np.column_stack([i, j])


def twice_q_stability_stat(sample: SampleDraw, learner: LearnerSpec, pop: Population,
                           rng: np.random.Generator | None = None,
                           probe: np.ndarray | None = None,
                           pair_cap: int = PAIR_CAP) -> tuple[float, float]:
    """First- and second-order delete stability.

    ``first`` is :func:`q_stability_stat`; ``second`` is
    ``max |mu(x_k, s_ij) - mu(x_k, s_j)|`` over ordered pairs ``i != j``,
    all pairs for ``n <= 20`` and ``pair_cap`` random pairs otherwise.
    """
    n = sample.n
    if n < 3:
        raise ValueError("twice-q stability needs n >= 3")
    probe = probe_grid(pop.N) if probe is None else probe
    xq = pop.x[probe]
    full = _fit_subset(pop, sample, np.ones(n, bool), learner).predict(xq)
    loo = _delete_one_predictions(sample, learner, pop, xq)
    first = float(np.max(np.abs(loo - full)))
    second = 0.0
    for i, j in _pairs(n, rng, pair_cap):
        keep = np.ones(n, bool)
        keep[[i, j]] = False
        mu_ij = _fit_subset(pop, sample, keep, learner).predict(xq)
        second = max(second, float(np.max(np.abs(mu_ij - loo[j]))))
    return first, second


def loo_n_hat(sample: SampleDraw, method: str = "auto") -> tuple[np.ndarray, bool]:
    """Delete-one size estimators ``N_j = 1/pi_2j + (n - 1)`` and whether they are exact.

    Under SRS ``1/pi_2j = N - n + 1`` is formed in integer arithmetic so that
    ``N_j = N`` holds exactly.
    """
    n, N = sample.n, sample.N
    kind = sample.design.kind
    if kind == "srs" and method == "auto":
        return np.full(n, float(N)), True
    if kind == "stratified" and method == "auto":
        Nh = np.asarray(sample.stratum_sizes)[sample.strata]
        nh = np.bincount(sample.strata, minlength=len(sample.stratum_sizes))[sample.strata]
        return (Nh - nh + 1 + n - 1).astype(float), True
    inv = np.empty(n)
    exact = True
    for j in range(n):
        sp = delete_one_split(sample, j, method)
        inv[j] = 1.0 / sp.pi2[0]
        exact = exact and sp.pi2_exact
    return inv + (n - 1), exact


def p_stability_stat(sample: SampleDraw, learner: LearnerSpec, pop: Population,
                     method: str = "auto", variant: str = "p") -> float:
    """``|(1/n) sum_j (N_j/N) mu(x_j, .) - (1/N) sum_U mu(x_k, s)|``.

    ``variant="p"`` uses the full-sample predictor at x_j; ``variant="pq"``
    uses the delete-j predictor ``mu(x_j, s_j)`` instead.
    """
    if variant not in ("p", "pq"):
        raise ValueError("variant must be 'p' or 'pq'")
    n, N = sample.n, sample.N
    pred = _fit_subset(pop, sample, np.ones(n, bool), learner)
    mu_U = pred.predict(pop.x)
    xs = pop.x[sample.indices]
    if variant == "p":
        mu_s = pred.predict(xs)
    else:
        mu_s = np.array([_fit_subset(pop, sample, np.arange(n) != j, learner).predict(xs[j:j + 1])[0]
                         for j in range(n)])
    n_hat, _ = loo_n_hat(sample, method)
    return abs(fsum(n_hat / N * mu_s) / n - fsum(mu_U) / N)


def loo_consistency_stat(sample: SampleDraw, pop: Population, method: str = "auto") -> float:
    """``|(1/n) sum_j y_j N_j / N - Ybar|``; the sample mean gap under SRS."""
    n_hat, _ = loo_n_hat(sample, method)
    y = pop.y[sample.indices]
    return abs(fsum(y * (n_hat / sample.N)) / sample.n - pop.Y / pop.N)


# ---------------------------------------------------------------------------
# traces

@dataclass
class StabilityTrace:
    condition_tag: str
    sample_sizes: np.ndarray
    statistics: np.ndarray
    slope: float
    replicates: np.ndarray = field(repr=False, default=None)
    caps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"condition": self.condition_tag, "sample_sizes": [int(v) for v in self.sample_sizes],
                "median_statistics": [float(v) for v in self.statistics], "slope": self.slope,
                "caps": self.caps}


def loglog_slope(sizes, stats, floor: float = LOG_FLOOR) -> float:
    """OLS slope of ``log(max(stat, floor))`` on ``log(n)``; 0 for a flat trace."""
    s = np.maximum(np.asarray(stats, dtype=float), floor)
    if np.all(s == s[0]):
        return 0.0
    lx = np.log(np.asarray(sizes, dtype=float))
    ly = np.log(s)
    lx = lx - lx.mean()
    return float(np.dot(lx, ly - ly.mean()) / np.dot(lx, lx))


def stability_trace(pop: Population, design: DesignSpec, learner: LearnerSpec,
                    sizes, replicates: int = 50, seed: int = 0,
                    conditions=("q", "p", "loo-consistency"),
                    pair_cap: int = PAIR_CAP) -> dict[str, StabilityTrace]:
    """Median statistic per sample size for each requested condition.

    Replicate r at size n draws its sample from the stream
    ``(seed, "stability-sample", n, r)``. ``"twice-q"`` traces the
    second-order statistic (the first-order one is the ``"q"`` trace).
    """
    sizes = [int(v) for v in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    bad = [c for c in conditions if c not in CONDITIONS]
    if bad:
        raise ValueError(f"unknown stability condition(s) {bad}; choose from {CONDITIONS}")
    probe = probe_grid(pop.N)
    vals = {c: np.empty((len(sizes), replicates)) for c in conditions}
    for a, n in enumerate(sizes):
        d = replace(design, n=n)
        d.validate(pop)
        for r in range(replicates):
            sample = draw_sample(pop, d, stream(seed, "stability-sample", n, r))
            if "twice-q" in conditions:
                first, second = twice_q_stability_stat(
                    sample, learner, pop, stream(seed, "stability-pairs", n, r), probe, pair_cap)
                vals["twice-q"][a, r] = second
                if "q" in conditions:
                    vals["q"][a, r] = first
            elif "q" in conditions:
                vals["q"][a, r] = q_stability_stat(sample, learner, pop, probe)
            if "p" in conditions:
                vals["p"][a, r] = p_stability_stat(sample, learner, pop)
            if "pq" in conditions:
                vals["pq"][a, r] = p_stability_stat(sample, learner, pop, variant="pq")
            if "loo-consistency" in conditions:
                vals["loo-consistency"][a, r] = loo_consistency_stat(sample, pop)
    caps = {"probe_units": int(len(probe)), "pair_cap": pair_cap,
            "exhaustive_pairs_max_n": EXHAUSTIVE_PAIRS_MAX_N}
    out = {}
    for c in conditions:
        med = np.median(vals[c], axis=1)
        out[c] = StabilityTrace(c, np.array(sizes), med, loglog_slope(sizes, med), vals[c], caps)
    return out


def write_traces(traces: dict[str, StabilityTrace], csv_path, json_path,
                 fingerprint: str, seed: int) -> None:
    """Trace CSV (condition, n, replicate, statistic) and a JSON summary of slopes."""
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_fingerprint={fingerprint}\n# seed={seed}\n")
        fh.write("condition,n,replicate,statistic\n")
        for tr in traces.values():
            for a, n in enumerate(tr.sample_sizes):
                for r, v in enumerate(tr.replicates[a]):
                    fh.write(f"{tr.condition_tag},{int(n)},{r},{float(v)!r}\n")
    summary = {"config_fingerprint": fingerprint, "seed": seed,
               "traces": {k: t.to_dict() for k, t in traces.items()}}
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
