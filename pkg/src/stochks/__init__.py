"""Stochastic Keller-Segel chemotaxis on [0, 1]: simulation and verification tools."""

from .conversion import CorrectionConvention, EffectiveParams, effective_params, stratonovich_correction
from .diagnostics import (
    ConstraintInapplicable,
    LyapunovParams,
    MomentReport,
    energy_E,
    holder_seminorm,
    lyapunov_W,
    moment_functionals,
    positivity_report,
    validate_constants,
)
from .dynamics import ModelParams, State, diffusion_action, drift_u, drift_v
from .field_space import Field, GridSpec, NegativeValueError, SpectralField, norm
from .integrator import (
    NumericalFailure,
    SchemeConfig,
    Trajectory,
    integrate,
    integrate_wong_zakai,
    step_exponential,
    step_semi_implicit,
)
from .truncation import CutoffSpec, RunningFunctionals, run_concatenated, smooth_cutoff
from .wiener import BrownianPath, NoiseSpec, RngStream, gamma_constant, make_noise_spec, path_streams

__version__ = "0.1.0"
