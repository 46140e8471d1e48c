"""Gaussian-process regression with derivative observations and shape constraints."""

__version__ = "0.1.0"

from .errors import (ConditioningError, ConfigError, ConvergenceError, DataError,  # noqa: E402
                     DiagnosticError, DomainError, InitializationError, InputShapeError,
                     MonoGPError, SchemeError)
from .kernel import (DerivativeSpec, Hyperparameters, InputPoint, JointCovariance,  # noqa: E402
                     assemble_joint, cov_deriv_deriv, cov_deriv_value, kronecker_cov,
                     se_ard_cov)
from .model import (ObservationSet, PriorSpec, log_joint, log_lik_gaussian,  # noqa: E402
                    log_lik_sign, log_prior)
from .inference import (PosteriorSamples, PredictiveDistribution, SamplerConfig,  # noqa: E402
                        condition_gaussian, effective_sample_size, predict,
                        sample_hyperparameters, sample_latents_constrained, split_rhat)
from .evaluation import CvConfig, CvScheme, EvalReport, loo_pit, run_cv  # noqa: E402
from .data import (RawDataset, SimulationConfig, StandardizedDataset, VirtualConfig,  # noqa: E402
                   build_virtual_sets, ingest, simulate, standardize)
