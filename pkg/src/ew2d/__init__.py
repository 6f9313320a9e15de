"""Two-dimensional stochastic heat equation with logarithmically attenuated
mollified noise, its Edwards-Wilkinson fluctuation limit, and the Monte Carlo
machinery that compares the two."""

from .errors import (BlowUpError, ConfigurationError, DivergentIntegralError,
                     DomainError, EW2DError, FixedPointFailure, SchemeFailure,
                     ValidationError)
from .kernel import (Correlation, Mollifier, TestFunction, clipped_singular_integral,
                     correlation_of, covariance_cij, heat_kernel, sigma_gT)
from .limit import (BetaThreshold, ConditionalField, JSquaredSolution, LimitCoefficient,
                    beta_threshold, closed_form_linear, effective_coefficient,
                    limit_coefficient, sample_xi, solve_fbsde_picard, solve_j_squared)
from .noise import GridSpec, NoiseIncrement, NoiseStream, make_stream, next_increment
from .solver import (FieldState, SigmaFunction, SolverConfig, evolve, micro_params,
                     sigma_linear, sigma_saturating, step)
from .stats import (EnsembleReport, fluctuation_statistic, moment_diagnostic,
                    normality_test, one_point_test, path_increment_diagnostic,
                    run_ensemble)

__version__ = "0.1.0"
