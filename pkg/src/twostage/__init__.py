"""Design-based two-stage survey sampling toolkit.

Estimation of totals and smooth functions of totals under two-stage designs
(SI, SIR or Bernoulli sampling of PSUs, arbitrary equal-probability
subsampling inside), coupled joint draws of with/without-replacement
designs, the with-replacement bootstrap of PSUs, and a deterministic
parallel Monte Carlo harness for bias/stability/coverage studies.
"""

from .bootstrap import (
    BootstrapConfig,
    ReplicateSet,
    bootstrap_variance,
    percentile_ci,
    resample_wr,
    stratified_proportion_resample,
    studentized_ci,
)
from .coupling import (
    BoundReport,
    CoupledBeSiDraw,
    CoupledSirSiDraw,
    DecayReport,
    SharedMultinomial,
    coupled_be_si,
    coupled_sir_si,
    shared_multinomial,
    verify_decay,
    verify_hajek_bound,
    verify_sir_si_bound,
)
from .designs import (
    DesignSpec,
    FirstStageDraw,
    SecondStageDraw,
    draw_be,
    draw_second_stage,
    draw_si,
    draw_sir,
    draw_stratified_si,
    draw_systematic,
)
from .estimators import (
    CorrelationEstimand,
    ProportionEstimand,
    PsuEstimate,
    RatioEstimand,
    TotalEstimand,
    TotalEstimate,
    hh_total_sir,
    ht_total_be,
    ht_total_si,
    linearized_values,
    normal_ci,
    normal_quantile,
    plugin_estimate,
    population_value,
    theoretical_variance,
    variance_estimate,
)
from .frame import (
    Frame,
    PrimaryUnit,
    SecondaryUnit,
    SyntheticConfig,
    calibrate_model,
    frame_to_csv,
    generate_population,
    ingest_frame,
    population_summary,
)
from .montecarlo import (
    MCReport,
    Scenario,
    approximate_true_variance,
    coverage_stats,
    normality_screen,
    run_scenario,
    scaling_study,
)
from .rng import GENERATOR_ID, substream

__version__ = "0.1.0"
