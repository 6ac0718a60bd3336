import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srb.core import Population
from srb.designs import DesignSpec, SubsampleSpec, draw_sample, enumerate_splits, sample_from_indices
from srb.estimators import FoldEstimates, fit_split, rb_exact, rb_loo, rb_mc, split_estimate, y1
from srb.learners import LearnerSpec
from srb.rng import stream
from srb.variance import (
    DesignMismatchWarning,
    VarianceReport,
    VarianceUnavailable,
    jackknife_for_design,
    jackknife_var,
    loo_mc_var,
    mc_q_var,
    mc_rb_var,
    rb_var,
    y1_var_srs,
)
from srb.simulation import ScenarioSpec, generate_scenario
from conftest import linear_population, rel

WLS = LearnerSpec("wls")
ONE = LearnerSpec("wls", intercept=False)
DELETE_ONE = SubsampleSpec("delete-one")


def ones_population(y):
    y = np.asarray(y, float)
    return Population(np.arange(len(y)), y, np.ones((len(y), 1)))


def test_jackknife_closed_form_constant_regressor():
    pop = ones_population(np.random.default_rng(0).gamma(2.0, 2.0, 25))
    for r in range(5):
        s = draw_sample(pop, DesignSpec("srs", 8), stream(r, "s"))
        rep, folds = rb_loo(s, ONE, pop)
        v = jackknife_var(folds, rep.point, pop.N, s.n)
        ys = pop.y[s.indices]
        expected = pop.N**2 / (s.n * (s.n - 1)) * math.fsum((ys - ys.mean()) ** 2)
        assert rel(v.value, expected) < 1e-12


def test_jackknife_identical_folds_and_census():
    f = FoldEstimates(np.full(5, 42.0), np.full(5, 0.2))
    assert jackknife_var(f, 42.0, 20, 5).value == 0.0
    census = jackknife_var(f, 42.0, 5, 5)
    assert census.value == 0.0 and any("census" in m for m in census.flags)
    with pytest.raises(VarianceUnavailable):
        jackknife_var(FoldEstimates([1.0], [1.0]), 1.0, 10, 1)


@given(st.integers(0, 500), st.floats(-100, 100))
@settings(max_examples=30, deadline=None)
def test_jackknife_shift_invariance(seed, c):
    pop = linear_population(30, seed=seed, p=2)
    s = draw_sample(pop, DesignSpec("srs", 8), stream(seed, "s"))
    rep, folds = rb_loo(s, WLS, pop)
    shifted = pop.with_y(pop.y + c)
    rep2, folds2 = rb_loo(s, WLS, shifted)
    z1 = (folds.values - s.n / pop.N * rep.point) / (pop.N - s.n)
    z2 = (folds2.values - s.n / pop.N * rep2.point) / (pop.N - s.n)
    scale = np.abs(folds.values).max() + pop.N * abs(c)
    assert np.allclose(z2 - z1, c, atol=1e-9 * scale / (pop.N - s.n))
    a = jackknife_var(folds, rep.point, pop.N, s.n).value
    b = jackknife_var(folds2, rep2.point, pop.N, s.n).value
    assert abs(a - b) <= 1e-6 * (a + 1) * (1 + abs(c))


def _split_with(pop, s1, s2):
    sample = sample_from_indices(pop, DesignSpec("srs", len(s1) + len(s2)), sorted(s1 + s2))
    for sp, _ in enumerate_splits(sample, SubsampleSpec("srs", n1=len(s1))):
        if sp.s1.tolist() == sorted(s1):
            return sp
    raise AssertionError("split not found")


def test_y1_var_conditionally_unbiased(pop8):
    s1 = [1, 5]
    rest = [i for i in range(8) if i not in s1]
    vals, vhats = [], []
    for s2 in itertools.combinations(rest, 2):
        sp = _split_with(pop8, s1, list(s2))
        pred = fit_split(sp, pop8, WLS)
        vals.append(y1(sp, pred, pop8))
        vhats.append(y1_var_srs(sp, pred, pop8))
    assert len(vals) == 15
    v2 = math.fsum((np.array(vals) - np.mean(vals)) ** 2) / len(vals)
    assert rel(np.mean(vhats), v2) < 1e-9


def test_y1_var_trivial_cases():
    exact = linear_population(10, seed=1, noise=0.0)
    sp = _split_with(exact, [0, 3, 6], [1, 8])
    assert y1_var_srs(sp, fit_split(sp, exact, WLS), exact) == pytest.approx(0.0, abs=1e-18 * exact.Y**2 + 1e-20)
    pop = linear_population(6, seed=2)
    sp = _split_with(pop, [0, 1], [2, 3, 4, 5])
    assert y1_var_srs(sp, fit_split(sp, pop, WLS), pop) == 0.0
    sp = _split_with(pop, [0, 1, 2], [3])
    with pytest.raises(VarianceUnavailable, match="n2 < 2"):
        y1_var_srs(sp, fit_split(sp, pop, WLS), pop)


def test_y1_var_unavailable_for_cpoisson():
    pop = linear_population(30, seed=3)
    s = draw_sample(pop, DesignSpec("cpoisson", 8, size_variable=0), stream(0, "s"))
    sp = enumerate_splits(s, SubsampleSpec("srs", n1=4))[0][0]
    with pytest.raises(VarianceUnavailable):
        y1_var_srs(sp, fit_split(sp, pop, WLS), pop)


@pytest.mark.parametrize("average", [False, True])
def test_rb_var_unbiased_by_enumeration(pop8, average):
    design, scheme = DesignSpec("srs", 4), SubsampleSpec("srs", n1=2)
    points, probs, ev = [], [], 0.0
    for idx in itertools.combinations(range(8), 4):
        s = sample_from_indices(pop8, design, idx)
        p = 1 / 70
        points.append(rb_exact(s, scheme, WLS, pop8)[0].point)
        probs.append(p)
        if average:
            ev += p * rb_var(s, scheme, WLS, pop8, average=True).raw_value
        else:
            for sp, q in enumerate_splits(s, scheme):
                ev += p * q * rb_var(s, scheme, WLS, pop8, split=sp).raw_value
    points = np.array(points)
    V = math.fsum(np.array(probs) * (points - points.mean()) ** 2)
    assert rel(ev, V) < 1e-9


def test_rb_var_perfect_predictor_is_zero():
    pop = linear_population(12, seed=4, noise=0.0)
    s = draw_sample(pop, DesignSpec("srs", 6), stream(0, "s"))
    rep = rb_var(s, SubsampleSpec("srs", n1=3), WLS, pop, rng=stream(0, "q"))
    assert rep.value == pytest.approx(0.0, abs=1e-12 * pop.Y**2)
    assert set(rep.components) == {"v_y1", "v_q"}


def test_rb_var_requires_rng_or_split(pop8):
    s = sample_from_indices(pop8, DesignSpec("srs", 4), [0, 1, 2, 3])
    with pytest.raises(ValueError, match="rng"):
        rb_var(s, SubsampleSpec("srs", n1=2), WLS, pop8)


def test_mc_rb_var_trivial_cases():
    rep = mc_rb_var([5.0, 5.0, 5.0], [2.5, 2.5, 2.5])
    assert rep.value == 2.5 and not rep.truncated
    assert mc_rb_var([1.0, 1.0], [0.0, 0.0]).value == 0.0
    r = np.array([1.0, 2.0, 4.0, 7.0])
    rep = mc_rb_var(r, np.zeros(4))
    assert rep.truncated and rep.value == 0.0
    assert rep.raw_value == pytest.approx(-np.var(r))
    assert rep.components["v_q_hat"] == pytest.approx(mc_q_var(r))
    with pytest.raises(ValueError):
        mc_rb_var([1.0], [1.0])
    with pytest.raises(ValueError):
        mc_rb_var([1.0, 2.0], [1.0])


def test_mc_rb_var_perfect_predictor():
    pop = linear_population(12, seed=5, noise=0.0)
    s = draw_sample(pop, DesignSpec("srs", 6), stream(0, "s"))
    scheme = SubsampleSpec("srs", n1=3)
    _, reps = rb_mc(s, scheme, WLS, 5, stream(0, "mc"), pop)
    v = [y1_var_srs(sp, fit_split(sp, pop, WLS), pop) for sp in reps.splits]
    assert mc_rb_var(reps.values, v).value == pytest.approx(0.0, abs=1e-12 * pop.Y**2)


def test_loo_mc_var_cases():
    pop = linear_population(20, seed=6)
    s = draw_sample(pop, DesignSpec("srs", 6), stream(0, "s"))
    rep, folds = rb_loo(s, WLS, pop)
    jk = jackknife_var(folds, rep.point, pop.N, s.n)
    assert loo_mc_var(folds, 0.0, pop.N, s.n).raw_value == jk.raw_value
    # K = n with every fold drawn once coincides with the exact folds
    mc = loo_mc_var(folds, 3.5, pop.N, s.n)
    assert mc.raw_value == pytest.approx(jk.raw_value + 3.5, rel=1e-14)
    assert mc.components == {"jackknife": jk.raw_value, "mc": 3.5}


def test_loo_mc_var_tracks_empirical_variance_on_s1():
    pop = generate_scenario(ScenarioSpec("S1", seed=0))
    est, var = [], []
    for b in range(150):
        s = draw_sample(pop, DesignSpec("srs", 20), stream(b, "s"))
        rep, reps = rb_mc(s, DELETE_ONE, WLS, 50, stream(b, "mc"), pop)
        folds = FoldEstimates(reps.values, np.full(50, 1 / 50))
        var.append(loo_mc_var(folds, mc_q_var(reps.values), pop.N, s.n).value)
        est.append(rep.point)
    emp = np.var(est, ddof=1)
    assert abs(np.mean(var) / emp - 1) < 0.25


def test_stratified_jackknife_sums_strata(pop8_strat):
    s = draw_sample(pop8_strat, DesignSpec("stratified", 6), stream(0, "s"))
    rep, folds = rb_loo(s, WLS, pop8_strat)
    v = jackknife_var(folds, rep.point, 8, 6, s.stratum_sizes)
    assert set(v.components) == {"stratum_0", "stratum_1"}
    assert v.raw_value == pytest.approx(sum(v.components.values()), rel=1e-14)
    with pytest.raises(ValueError, match="stratum_sizes"):
        jackknife_var(folds, rep.point, 8, 6)


def test_jackknife_warns_for_cpoisson():
    pop = linear_population(40, seed=7)
    s = draw_sample(pop, DesignSpec("cpoisson", 8, size_variable=0), stream(0, "s"))
    rep, folds = rb_loo(s, WLS, pop)
    with pytest.warns(DesignMismatchWarning):
        v = jackknife_for_design(folds, rep.point, s)
    assert any(f.startswith("design-mismatch") for f in v.flags)
    srs = draw_sample(pop, DesignSpec("srs", 8), stream(0, "s"))
    rep, folds = rb_loo(srs, WLS, pop)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not jackknife_for_design(folds, rep.point, srs).flags


@given(st.floats(-1e6, 1e6))
def test_truncation_invariant(raw):
    rep = VarianceReport.from_raw(raw)
    assert rep.value == max(raw, 0.0)
    assert rep.truncated == (raw < 0)
    assert rep.value >= 0 and rep.raw_value == raw
    assert rep.to_dict()["truncated"] == rep.truncated
