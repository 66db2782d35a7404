"""Adaptive sequential Monte Carlo for the Darcy-flow permeability inverse problem.

The package infers the Fourier coefficients of a positive permeability
field from noisy pressure observations: a uniform prior over coefficients
in [-1, 1], an elliptic pressure solve as the forward map, a tempered
Gaussian likelihood, and an adaptive tempering particle sampler whose
Monte Carlo error is checked to be independent of the parameter dimension.
"""

from .config import ConfigError, RunConfig
from .field import (
    FieldConfig,
    deviation_bound,
    evaluate_field,
    evaluate_field_batch,
    evaluate_field_grid,
    param_count,
    sample_prior,
    scaled_amplitude,
)
from .model import Dataset, generate_data, incremental_log_weight, make_misfit_fn, misfit
from .pde import (
    Grid,
    SolverError,
    SourceSpec,
    assemble,
    forward_map,
    observe,
    solve,
    write_pressure_csv,
)
from .smc import (
    Ensemble,
    RunTrace,
    SMCConfig,
    StagnationError,
    adapt_rho,
    adapt_steps,
    derived_rng,
    ess,
    mutate,
    next_temperature,
    reflect,
    resample_multinomial,
    resample_systematic,
    run,
    weighted_field_mean,
    weighted_mean,
)
from .validation import (
    BallSpec,
    ProductTarget,
    ball_probability,
    exact_moments,
    rate_study,
    rmse_to_truth,
    sampling_operator_error,
)

__version__ = "0.1.0"
