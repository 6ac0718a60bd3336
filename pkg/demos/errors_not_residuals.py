"""Why the correction term must use prediction errors, not residuals.

Enumerates every SRS sample and every training/test split of a tiny
population. The single-split estimator built from a predictor trained on
s1 only is exactly unbiased; reusing the same formula with a predictor that
has also seen the test units (so the "errors" are really residuals) is not.
"""

import itertools
import math

import numpy as np

from srb import DesignSpec, LearnerSpec, SubsampleSpec, enumerate_splits, sample_from_indices
from srb.estimators import fit_split, y1
from srb.learners import fit_on
from srb.simulation import ScenarioSpec, generate_scenario

pop = generate_scenario(ScenarioSpec("S3", N=9, seed=2))
design = DesignSpec("srs", 5)
scheme = SubsampleSpec("srs", n1=3)
tree = LearnerSpec("tree", max_depth=2, min_leaf=1)

honest, leaky = [], []
combos = list(itertools.combinations(range(pop.N), design.n))
for idx in combos:
    s = sample_from_indices(pop, design, idx)
    for sp, q in enumerate_splits(s, scheme):
        w = q / len(combos)
        honest.append((w, y1(sp, fit_split(sp, pop, tree), pop)))
        # same formula, predictor fitted on all of s
        pred = fit_on(pop, s.indices, s.pi, tree)
        rest = sp.complement()
        mu = pred.predict(pop.x[rest])
        e = pop.y[sp.s2] - pred.predict(pop.x[sp.s2])
        leaky.append((w, math.fsum(pop.y[sp.s1]) + math.fsum(mu) + math.fsum(e / sp.pi2)))

for name, vals in (("errors (trained on s1)", honest), ("residuals (trained on s)", leaky)):
    E = math.fsum(w * v for w, v in vals)
    print(f"{name:26s} E = {E:10.5f}   Y = {pop.Y:10.5f}   relative bias {E / pop.Y - 1:+.2e}")
