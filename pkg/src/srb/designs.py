"""Sampling designs, subsampling schemes and inclusion probabilities.

Three parent designs are supported: simple random sampling without
replacement (``"srs"``), stratified SRS (``"stratified"``) and conditional
Poisson sampling with probabilities proportional to a size feature
(``"cpoisson"``), implemented as rejective Poisson sampling with calibrated
working probabilities. Training/test splits are drawn by fixed-size SRS from
the sample (``"srs"``) or by leaving out one unit (``"delete-one"``).
"""

from __future__ import annotations

import itertools
import math
import weakref
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .core import Population, fsum

DESIGN_KINDS = ("srs", "stratified", "cpoisson")
SCHEME_KINDS = ("srs", "delete-one")
DEFAULT_BUDGET = 10**6


class DesignError(ValueError):
    """Invalid design or scheme for the population or sample at hand."""


class BudgetExceeded(DesignError):
    """Enumeration would exceed the configured combinatorial budget."""


@dataclass(frozen=True)
class DesignSpec:
    """Parent sampling design.

    ``n`` is the total sample size. For ``"stratified"``, ``allocation``
    gives per-stratum sizes (summing to ``n``); if omitted the allocation is
    proportional to stratum sizes. ``size_variable`` is the 0-based feature
    column used as size measure under ``"cpoisson"``.
    """

    kind: str = "srs"
    n: int = 1
    allocation: tuple[int, ...] | None = None
    size_variable: int | None = None

    def __post_init__(self):
        if self.kind not in DESIGN_KINDS:
            raise DesignError(f"design.kind must be one of {DESIGN_KINDS}, got {self.kind!r}")
        if self.allocation is not None:
            object.__setattr__(self, "allocation", tuple(int(a) for a in self.allocation))
            if sum(self.allocation) != self.n:
                raise DesignError(
                    f"design.allocation sums to {sum(self.allocation)}, expected design.n={self.n}"
                )
        if self.n < 1:
            raise DesignError(f"design.n must be >= 1, got {self.n}")
        if self.kind == "cpoisson" and self.size_variable is None:
            raise DesignError("design.size_variable is required for cpoisson")

    def validate(self, pop: Population) -> None:
        if self.n > pop.N:
            raise DesignError(f"design.n={self.n} exceeds population size N={pop.N}")
        if self.kind == "stratified":
            if pop.strata is None:
                raise DesignError("stratified design requires population strata")
            Nh = pop.stratum_sizes()
            alloc = self.stratum_allocation(pop)
            if len(alloc) != len(Nh):
                raise DesignError(
                    f"design.allocation has {len(alloc)} strata, population has {len(Nh)}"
                )
            for h, (nh, Nh_) in enumerate(zip(alloc, Nh)):
                if not 1 <= nh <= Nh_:
                    raise DesignError(f"design.allocation[{h}]={nh} outside [1, {Nh_}]")
        if self.kind == "cpoisson":
            k = self.size_variable
            if not 0 <= k < pop.p:
                raise DesignError(f"design.size_variable={k} outside [0, {pop.p})")
            if np.any(pop.x[:, k] <= 0):
                raise DesignError(f"size variable x{k + 1} must be strictly positive")

    def stratum_allocation(self, pop: Population) -> tuple[int, ...]:
        if self.allocation is not None:
            return self.allocation
        return proportional_allocation(pop.stratum_sizes(), self.n)


@dataclass(frozen=True)
class SubsampleSpec:
    """Training-subsample scheme q(s1 | s)."""

    kind: str = "delete-one"
    n1: int | None = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise DesignError(f"scheme.kind must be one of {SCHEME_KINDS}, got {self.kind!r}")
        if self.kind == "srs" and self.n1 is None:
            raise DesignError("scheme.n1 is required for SRS subsampling")

    def training_size(self, n: int) -> int:
        n1 = n - 1 if self.kind == "delete-one" else int(self.n1)
        if not 1 <= n1 <= n - 1:
            raise DesignError(f"scheme.n1={n1} must satisfy 1 <= n1 <= n-1 = {n - 1}")
        return n1


def proportional_allocation(stratum_sizes: Sequence[int], n: int) -> tuple[int, ...]:
    """Largest-remainder proportional allocation with at least one unit per stratum."""
    Nh = np.asarray(stratum_sizes, dtype=float)
    if n < len(Nh):
        raise DesignError(f"design.n={n} smaller than the number of strata {len(Nh)}")
    raw = n * Nh / Nh.sum()
    alloc = np.maximum(np.floor(raw).astype(int), 1)
    while alloc.sum() < n:
        room = np.where(alloc < Nh, raw - alloc, -np.inf)
        alloc[int(np.argmax(room))] += 1
    while alloc.sum() > n:
        room = np.where(alloc > 1, alloc - raw, -np.inf)
        alloc[int(np.argmax(room))] -= 1
    return tuple(int(a) for a in alloc)


@dataclass(frozen=True, eq=False)
class SampleDraw:
    """A realised sample with first-order inclusion probabilities.

    ``indices`` are sorted population positions. ``strata`` holds the
    stratum of each sampled unit (stratified designs) and ``odds`` the
    population-level conditional-Poisson odds, from which conditional test-set
    probabilities are obtained exactly.
    """

    indices: np.ndarray
    pi: np.ndarray
    design: DesignSpec
    N: int
    strata: np.ndarray | None = None
    stratum_sizes: tuple[int, ...] | None = None
    odds: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        pi = np.asarray(self.pi, dtype=float)
        if len(idx) != len(pi):
            raise DesignError("indices and pi must be aligned")
        if len(np.unique(idx)) != len(idx) or np.any(np.diff(idx) <= 0):
            raise DesignError("sample indices must be distinct and sorted")
        if len(idx) and (idx[0] < 0 or idx[-1] >= self.N):
            raise DesignError("sample indices outside [0, N)")
        if np.any(pi <= 0) or np.any(pi > 1):
            raise DesignError("inclusion probabilities must lie in (0, 1]")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "pi", pi)

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def design_tag(self) -> str:
        return self.design.kind


@dataclass(frozen=True, eq=False)
class Split:
    """Training/test partition ``(s1, s2)`` of a sample."""

    s1: np.ndarray
    s2: np.ndarray
    pi1: np.ndarray
    pi2: np.ndarray
    pi2_exact: bool
    sample: SampleDraw = field(repr=False)

    @property
    def n1(self) -> int:
        return len(self.s1)

    @property
    def n2(self) -> int:
        return len(self.s2)

    def complement(self) -> np.ndarray:
        """Population positions outside ``s1``."""
        mask = np.ones(self.sample.N, dtype=bool)
        mask[self.s1] = False
        return np.flatnonzero(mask)


# ---------------------------------------------------------------------------
# inclusion probabilities

def pps_inclusion_probs(sizes, n: int) -> np.ndarray:
    """Inclusion probabilities proportional to ``sizes`` summing to ``n``.

    Units whose proportional value would exceed one are fixed at one and the
    remaining mass is redistributed, repeated until no value exceeds one.
    """
    sizes = np.asarray(sizes, dtype=float)
    N = len(sizes)
    if np.any(sizes <= 0):
        raise DesignError("PPS sizes must be strictly positive")
    if not 1 <= n <= N:
        raise DesignError(f"n={n} outside [1, {N}]")
    pi = np.zeros(N)
    certain = np.zeros(N, dtype=bool)
    for _ in range(N):
        free = ~certain
        pi[free] = (n - certain.sum()) * sizes[free] / sizes[free].sum()
        over = free & (pi >= 1.0)
        if not over.any():
            break
        certain |= over
        pi[certain] = 1.0
    # exact unit sum on the free part
    free = ~certain
    if free.any():
        pi[free] *= (n - certain.sum()) / math.fsum(pi[free])
    return pi


def _esp_table(lam: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Prefix elementary symmetric polynomials e_0..e_m with per-row log scale.

    Row ``i`` holds e_r(lam[:i]) / exp(scale[i]).
    """
    N = len(lam)
    table = np.zeros((N + 1, m + 1))
    scale = np.zeros(N + 1)
    table[0, 0] = 1.0
    for i in range(N):
        row = table[i].copy()
        row[1:] += lam[i] * table[i, :-1]
        mx = row.max()
        table[i + 1] = row / mx
        scale[i + 1] = scale[i] + math.log(mx)
    return table, scale


def cp_inclusion_probs(odds, m: int) -> np.ndarray:
    """First-order inclusion probabilities of conditional Poisson sampling.

    Units are drawn independently with odds ``odds`` and the draw is
    accepted only if it has exactly ``m`` units, so that
    p(s) is proportional to the product of odds over s.
    """
    lam = np.asarray(odds, dtype=float)
    N = len(lam)
    if m == 0:
        return np.zeros(N)
    if m >= N:
        return np.ones(N)
    if m == 1:
        return lam / fsum(lam)
    pre, lp = _esp_table(lam, m)
    suf, ls = _esp_table(lam[::-1], m)
    suf, ls = suf[::-1], ls[::-1]
    # e_{m-1} of all units except i: combine prefix (units < i) and suffix (units > i)
    P = pre[:N, :m]
    S = suf[1:, :m][:, ::-1]
    excl = np.einsum("ir,ir->i", P, S)
    log_excl = np.log(np.maximum(excl, 1e-300)) + lp[:N] + ls[1:]
    log_total = math.log(pre[N, m]) + lp[N]
    return lam * np.exp(log_excl - log_total)


@dataclass(frozen=True, eq=False)
class CPCalibration:
    """Calibrated working odds for rejective sampling."""

    target: np.ndarray
    odds: np.ndarray  # inf for certainty units
    working: np.ndarray  # Bernoulli probabilities for the non-certain units
    certain: np.ndarray
    iterations: int
    max_error: float


def calibrate_cp(target, tol: float = 1e-8, max_iter: int = 1000) -> CPCalibration:
    """Find conditional-Poisson odds whose inclusion probabilities equal ``target``.

    Damped fixed-point iteration on the logit scale; the step is halved
    whenever the maximum error increases.
    """
    target = np.asarray(target, dtype=float)
    certain = target >= 1.0 - 1e-12
    free = ~certain
    m = int(round(target[free].sum()))
    t = target[free]
    eta = np.log(t / (1 - t))
    step, best = 1.0, np.inf
    pi = cp_inclusion_probs(np.exp(eta), m)
    it = 0
    for it in range(1, max_iter + 1):
        err = float(np.max(np.abs(pi - t))) if len(t) else 0.0
        if err < tol:
            break
        if err > best:
            step *= 0.5
        best = min(best, err)
        pc = np.clip(pi, 1e-15, 1 - 1e-15)
        eta = eta + step * (np.log(t / (1 - t)) - np.log(pc / (1 - pc)))
        eta -= eta.mean()
        pi = cp_inclusion_probs(np.exp(eta), m)
    lam = np.exp(eta)
    # rescale odds so the working Bernoulli probabilities sum to m (fast acceptance)
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s = np.sum(1 / (1 + np.exp(-(eta + mid))))
        lo, hi = (mid, hi) if s < m else (lo, mid)
    lam = lam * math.exp(0.5 * (lo + hi))
    odds = np.full(len(target), np.inf)
    odds[free] = lam
    return CPCalibration(
        target=target,
        odds=odds,
        working=lam / (1 + lam),
        certain=certain,
        iterations=it,
        max_error=float(np.max(np.abs(pi - t))) if len(t) else 0.0,
    )


_CP_CACHE: "weakref.WeakKeyDictionary[Population, dict]" = weakref.WeakKeyDictionary()


def _cp_for(pop: Population, design: DesignSpec) -> CPCalibration:
    cache = _CP_CACHE.setdefault(pop, {})
    key = (design.n, design.size_variable)
    if key not in cache:
        target = pps_inclusion_probs(pop.x[:, design.size_variable], design.n)
        cache[key] = calibrate_cp(target)
    return cache[key]


def inclusion_probs(pop: Population, design: DesignSpec) -> np.ndarray:
    """First-order inclusion probabilities of every population unit."""
    design.validate(pop)
    if design.kind == "srs":
        return np.full(pop.N, design.n / pop.N)
    if design.kind == "stratified":
        Nh = pop.stratum_sizes()
        nh = np.asarray(design.stratum_allocation(pop))
        return (nh / Nh)[pop.strata]
    return _cp_for(pop, design).target.copy()


def _make_sample(pop: Population, design: DesignSpec, idx: np.ndarray, pi_all: np.ndarray,
                 odds: np.ndarray | None = None) -> SampleDraw:
    idx = np.sort(np.asarray(idx, dtype=np.int64))
    strata = sizes = None
    if design.kind == "stratified":
        strata = pop.strata[idx]
        sizes = tuple(int(v) for v in pop.stratum_sizes())
    return SampleDraw(idx, pi_all[idx], design, pop.N, strata, sizes, odds)


def sample_from_indices(pop: Population, design: DesignSpec, idx) -> SampleDraw:
    """Wrap an externally selected set of population positions as a sample of ``design``."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != design.n:
        raise DesignError(f"sample has {len(idx)} units but design.n={design.n}")
    pi_all = inclusion_probs(pop, design)
    if design.kind == "stratified":
        got = np.bincount(pop.strata[idx], minlength=pop.n_strata)
        if tuple(int(v) for v in got) != design.stratum_allocation(pop):
            raise DesignError("sample stratum counts do not match the design allocation")
    odds = _cp_for(pop, design).odds if design.kind == "cpoisson" else None
    return _make_sample(pop, design, idx, pi_all, odds)


def draw_sample(pop: Population, design: DesignSpec, rng: np.random.Generator) -> SampleDraw:
    """Draw one sample from ``design``."""
    pi_all = inclusion_probs(pop, design)
    if design.kind == "srs":
        return _make_sample(pop, design, rng.choice(pop.N, design.n, replace=False), pi_all)
    if design.kind == "stratified":
        parts = []
        for h, nh in enumerate(design.stratum_allocation(pop)):
            members = np.flatnonzero(pop.strata == h)
            parts.append(rng.choice(members, nh, replace=False))
        return _make_sample(pop, design, np.concatenate(parts), pi_all)
    cal = _cp_for(pop, design)
    free = np.flatnonzero(~cal.certain)
    m = design.n - int(cal.certain.sum())
    w = cal.working
    while True:
        batch = rng.random((64, len(free))) < w
        hits = np.flatnonzero(batch.sum(axis=1) == m)
        if len(hits):
            chosen = free[batch[hits[0]]]
            break
    idx = np.concatenate([np.flatnonzero(cal.certain), chosen])
    return _make_sample(pop, design, idx, pi_all, cal.odds)


# ---------------------------------------------------------------------------
# conditional test-set probabilities

def cond_pi2(design: DesignSpec | str, n: int, n1: int, pi_j: float, N: int) -> tuple[float, bool]:
    """Conditional probability that unit j outside s1 enters s2.

    Under SRS the value ``(n - n1) / (N - n1)`` is exact. For a stratified
    design pass the stratum quantities ``n_h``, ``n1_h`` (training units in
    the stratum) and ``N_h``. Otherwise the low-sampling-fraction
    approximation ``n2 * pi_j / (n * (1 - n1/N))`` is returned with
    ``exact=False``; for n2 = 1 it is the delete-one approximation.
    """
    kind = design if isinstance(design, str) else design.kind
    if not 0 < pi_j <= 1:
        raise DesignError(f"pi_j={pi_j} outside (0, 1]")
    if not 0 <= n1 < n:
        raise DesignError(f"need 0 <= n1 < n, got n1={n1}, n={n}")
    if kind in ("srs", "stratified"):
        return (n - n1) / (N - n1), True
    value = (n - n1) * pi_j / (n * (1.0 - n1 / N))
    return min(value, 1.0), False


def split_pi2(sample: SampleDraw, s1: np.ndarray, s2: np.ndarray,
              method: str = "auto") -> tuple[np.ndarray, bool]:
    """Conditional inclusion probabilities of the units in ``s2`` given ``s1``.

    ``method="auto"`` uses exact values whenever the design determines them
    (SRS, stratified SRS, and conditional Poisson with known odds);
    ``method="approx"`` forces the low-sampling-fraction approximation.
    """
    n, n1, N = sample.n, len(s1), sample.N
    design = sample.design
    if method == "approx":
        pos = np.searchsorted(sample.indices, s2)
        vals = [cond_pi2("cpoisson", n, n1, float(p), N)[0] for p in sample.pi[pos]]
        return np.asarray(vals), False
    if design.kind == "srs":
        return np.full(len(s2), cond_pi2("srs", n, n1, 1.0, N)[0]), True
    if design.kind == "stratified":
        Nh = np.asarray(sample.stratum_sizes)
        pos1 = np.searchsorted(sample.indices, s1)
        pos2 = np.searchsorted(sample.indices, s2)
        n1h = np.bincount(sample.strata[pos1], minlength=len(Nh))
        n2h = np.bincount(sample.strata[pos2], minlength=len(Nh))
        h = sample.strata[pos2]
        return n2h[h] / (Nh[h] - n1h[h]), True
    if sample.odds is None:
        return split_pi2(sample, s1, s2, "approx")
    # p2(s2 | s1) is proportional to the product of odds over s2 (uniform q),
    # i.e. conditional Poisson of size n2 on U \ s1
    rest = np.ones(N, dtype=bool)
    rest[s1] = False
    rest_idx = np.flatnonzero(rest)
    lam = sample.odds[rest_idx]
    cert = ~np.isfinite(lam)
    pi_rest = np.ones(len(rest_idx))
    m = (n - n1) - int(cert.sum())
    pi_rest[~cert] = cp_inclusion_probs(lam[~cert], m)
    return pi_rest[np.searchsorted(rest_idx, s2)], True


def _split_from_positions(sample: SampleDraw, pos1: Sequence[int], method: str = "auto") -> Split:
    n = sample.n
    mask = np.zeros(n, dtype=bool)
    mask[list(pos1)] = True
    s1 = sample.indices[mask]
    s2 = sample.indices[~mask]
    pi1 = sample.pi[mask] * len(s1) / n
    pi2, exact = split_pi2(sample, s1, s2, method)
    return Split(s1, s2, pi1, pi2, exact, sample)


def draw_split(sample: SampleDraw, scheme: SubsampleSpec, rng: np.random.Generator,
               method: str = "auto") -> Split:
    """Draw a training subsample by uniform SRS of size n1 from the sample."""
    n1 = scheme.training_size(sample.n)
    pos1 = rng.choice(sample.n, n1, replace=False)
    return _split_from_positions(sample, pos1, method)


def delete_one_split(sample: SampleDraw, j: int, method: str = "auto") -> Split:
    """Split leaving out the sample unit at position ``j``."""
    return _split_from_positions(sample, [k for k in range(sample.n) if k != j], method)


# ---------------------------------------------------------------------------
# enumeration

def count_samples(pop: Population, design: DesignSpec) -> int:
    if design.kind == "srs":
        return math.comb(pop.N, design.n)
    if design.kind == "stratified":
        return math.prod(
            math.comb(int(Nh), nh)
            for Nh, nh in zip(pop.stratum_sizes(), design.stratum_allocation(pop))
        )
    raise DesignError("enumeration is not supported for conditional Poisson designs")


def enumerate_samples(pop: Population, design: DesignSpec,
                      budget: int = DEFAULT_BUDGET) -> Iterator[tuple[SampleDraw, float]]:
    """All samples of an SRS or stratified design with their probabilities.

    Samples come in lexicographic order (per stratum for stratified designs).
    """
    design.validate(pop)
    total = count_samples(pop, design)
    if total > budget:
        raise BudgetExceeded(f"{total} samples exceed the enumeration budget {budget}")
    pi_all = inclusion_probs(pop, design)
    prob = 1.0 / total

    def gen():
        if design.kind == "srs":
            for comb in itertools.combinations(range(pop.N), design.n):
                yield _make_sample(pop, design, np.array(comb), pi_all), prob
        else:
            groups = [
                itertools.combinations(np.flatnonzero(pop.strata == h).tolist(), nh)
                for h, nh in enumerate(design.stratum_allocation(pop))
            ]
            for combo in itertools.product(*[list(g) for g in groups]):
                idx = np.array([i for part in combo for i in part])
                yield _make_sample(pop, design, idx, pi_all), prob

    return gen()


def enumerate_splits(sample: SampleDraw, scheme: SubsampleSpec, budget: int = DEFAULT_BUDGET,
                     method: str = "auto") -> list[tuple[Split, float]]:
    """All training/test splits of ``sample`` with their q-probabilities.

    For ``delete-one`` the split at position j leaves out the j-th sampled unit.
    """
    n = sample.n
    n1 = scheme.training_size(n)
    total = math.comb(n, n1)
    if total > budget:
        raise BudgetExceeded(f"{total} splits exceed the enumeration budget {budget}")
    q = 1.0 / total
    if scheme.kind == "delete-one":
        return [(delete_one_split(sample, j, method), q) for j in range(n)]
    return [
        (_split_from_positions(sample, pos1, method), q)
        for pos1 in itertools.combinations(range(n), n1)
    ]


def pi2_factor(sample: SampleDraw, scheme: SubsampleSpec) -> np.ndarray:
    """Per-unit factor pi_i * E_q(1[i in s2] / pi_2i | s), by split enumeration."""
    acc = np.zeros(sample.n)
    for split, q in enumerate_splits(sample, scheme):
        pos = np.searchsorted(sample.indices, split.s2)
        acc[pos] += q / split.pi2
    return sample.pi * acc
