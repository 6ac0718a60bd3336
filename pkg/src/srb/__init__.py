"""Design-unbiased model-assisted estimation by subsampling Rao-Blackwellisation.

Typical use::

    from srb import DesignSpec, LearnerSpec, ScenarioSpec, draw_sample, generate_scenario, rb_loo, stream
    pop = generate_scenario(ScenarioSpec("S1", seed=1))
    s = draw_sample(pop, DesignSpec("srs", 20), stream(1, "sample"))
    report, folds = rb_loo(s, LearnerSpec("wls"), pop)
"""

from .core import Population, PopulationError, UnitRecord, load_population, population_totals, save_population
from .designs import (
    BudgetExceeded,
    DesignError,
    DesignSpec,
    SampleDraw,
    Split,
    SubsampleSpec,
    cond_pi2,
    draw_sample,
    draw_split,
    enumerate_samples,
    enumerate_splits,
    inclusion_probs,
    pps_inclusion_probs,
    sample_from_indices,
)
from .estimators import (
    ContractViolation,
    EstimateReport,
    FoldEstimates,
    greg,
    greg_jackknife_avg,
    ht,
    rb_exact,
    rb_linear_weights,
    rb_loo,
    rb_mc,
    y1,
)
from .learners import LearnerSpec, TrainingSet, fit, forest_fit, tree_fit, wls_fit
from .rng import stream
from .simulation import (
    EstimatorConfig,
    ScenarioSpec,
    StudyReport,
    exhaustive_expectation,
    generate_scenario,
    run_study,
    variance_decomposition,
)
from .stability import (
    StabilityTrace,
    loo_consistency_stat,
    p_stability_stat,
    q_stability_stat,
    stability_trace,
    twice_q_stability_stat,
)
from .variance import (
    VarianceReport,
    VarianceUnavailable,
    jackknife_var,
    loo_mc_var,
    mc_rb_var,
    rb_var,
    y1_var_srs,
)

__version__ = "0.1.0"
