"""Guided flow matching for forward and inverse PDE problems with sparse
observations, plus a numerical harness for the guided-sampler convergence
theory."""

from .fields import (FieldFormatError, FieldLayout, read_field, write_field)
from .guidance import (GuidanceConfig, ObservationSet, adaptive_zeta, clip_gradient,
                       composite_gradient, observation_loss, observation_loss_grad,
                       pde_loss, pde_loss_grad)
from .pde import (GRFParams, PDEProblem, SolverError, StabilityError, burgers_problem,
                  darcy_problem, generate_dataset, helmholtz_problem, poisson_problem,
                  relative_error, sample_grf, sample_observations, solve_burgers,
                  solve_static)
from .samplers import (DivergenceError, SampleTrace, SamplerConfig, deterministic_step,
                       sample, stochastic_step)
from .scheduler import (Scheduler, TimeGrid, geometric_grid, guidance_coefficients,
                        hybrid_grid, scheduler_eval, uniform_grid, validate_grid)
from .theory import (TheoryInstance, VerificationReport, compare_sampler_mixes,
                     simulate_1d_recursion, steady_state_loss_constant,
                     verify_det_contraction, verify_lower_bound, verify_moment_bounds)
from .training import (TrainConfig, VelocityNet, WeightFormatError, cfm_loss,
                       load_weights, save_weights, train)
from .velocity import (GaussianFlow, LinearOU, TrainedVelocity, endpoint_prediction,
                       evaluate, vjp_endpoint, vjp_euler)

__version__ = "0.1.0"
