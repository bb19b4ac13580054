"""Distributional stability of statistical parameters under KL shifts."""

from svalues.core import (Dataset, Estimand, StabilityReport, kl_to_uniform,
                          tilt_weights, uniform_weights)
from svalues.estimands import (Conditioning, LinearModel, LogisticModel,
                               ate_plugin_estimand, fit_conditional,
                               glm_coefficient_estimand, mean_estimand,
                               ols_coefficient_estimand)
from svalues.mm import (MMConfig, check_first_order, profile, svalue_general,
                        svalue_general_directional)
from svalues.tilt import (TiltProblem, plugin_single_component, solve_tilt,
                          svalue_mean, svalue_mean_directional,
                          svalue_score_vector,
                          svalue_score_vector_directional)

__version__ = "0.1.0"
