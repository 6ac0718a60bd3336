"""Replicated study on the S1 population under SRS and conditional Poisson.

HT ignores the auxiliaries, GREG uses them through a linear fit on the
whole sample, and the delete-one RB estimator uses the same linear learner
but corrects with leave-one-out errors. Expect GREG and RB to be close and
both far ahead of HT. Under SRS the jackknife variance is roughly right;
it is not computed under conditional Poisson, where it was not derived.
"""

from srb import DesignSpec, LearnerSpec
from srb.simulation import EstimatorConfig, ScenarioSpec, generate_scenario, run_study

pop = generate_scenario(ScenarioSpec("S1", seed=0))
wls = LearnerSpec("wls")

for kind in ("srs", "cpoisson"):
    design = DesignSpec(kind, 20, size_variable=1 if kind == "cpoisson" else None)
    cfgs = [
        EstimatorConfig("HT", "ht"),
        EstimatorConfig("GREG", "greg", wls),
        EstimatorConfig("RB-LOO", "rb_loo", wls, variance="jackknife" if kind == "srs" else None),
    ]
    rep = run_study(pop, design, cfgs, B=500, seed=7)
    print(f"\n{kind}, n=20, B=500, target Ybar={rep.theta:.4f}")
    print(f"{'estimator':10s} {'bias':>9s} {'(mc)':>8s} {'rmse':>8s} {'mean var':>10s} {'emp var':>10s}")
    for name, r in rep.rows.items():
        mv = "" if r.mean_var is None else f"{r.mean_var:10.5f}"
        ev = "" if r.empirical_var is None else f"{r.empirical_var:10.5f}"
        print(f"{name:10s} {r.bias:9.4f} {r.mc_error:8.4f} {r.rmse:8.4f} {mv:>10s} {ev:>10s}")
