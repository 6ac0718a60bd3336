"""Finite-sample stability diagnostics for a linear and a forest learner.

Prints the median statistic per sample size and the log-log slope. For the
linear learner the delete-one perturbation shrinks roughly like 1/n.
"""

from srb import DesignSpec, LearnerSpec
from srb.simulation import ScenarioSpec, generate_scenario
from srb.stability import stability_trace

pop = generate_scenario(ScenarioSpec("S1", N=1000, seed=0))
sizes = [50, 100, 200, 400]
for label, learner, reps in (("wls", LearnerSpec("wls"), 50),
                             ("forest", LearnerSpec("forest", n_trees=25), 5)):
    traces = stability_trace(pop, DesignSpec("srs", 50), learner, sizes, replicates=reps, seed=1,
                             conditions=("q", "p", "loo-consistency"))
    print(f"\n{label}")
    for tag, tr in traces.items():
        meds = "  ".join(f"{v:.2e}" for v in tr.statistics)
        print(f"  {tag:16s} {meds}   slope {tr.slope:+.2f}")
