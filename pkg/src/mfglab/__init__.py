"""Particle approximation of potential mean field games and their master equations."""

__version__ = "0.1.0"

from .data import (Certificate, DataModel, bump_phi1, discrete_convexity_check, displacement_modulus,
                   eval_F, eval_U0, fourier_monotonicity, grad_w_F, grad_w_U0)
from .errors import (ConfigError, ConjugatePointError, FlowBlowUpError, InvalidInputError, InversionError,
                     MfgError, ModelError, OptimizationError, ResolutionError)
from .flow import (BlockSystemSpec, PhaseTrajectory, block_ode_scaling, block_ode_study, integrate_forward,
                   invert_flow, jacobian_determinant, solve_bvp, variational_integrate)
from .master import (MasterSample, MeasurePath, counterexample_hopf_lax, master_gradient, master_value,
                     measure_flow, scalar_master_residual, vectorial_master_residual)
from .measures import EmpiricalMeasure, WeightedMeasure, displacement_interpolate, optimal_coupling, w2_distance
from .model import AuditRegion, HamiltonianModel, derivative_check, legendre_check
from .value import (hessian_kernel, hj_residual, scaling_study, value, wasserstein_gradient)
