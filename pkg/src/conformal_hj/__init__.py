"""Conformally calibrated learned Hamilton-Jacobi safety filters."""

from .certify import (BetaDist, CertificationResult, beta_cdf, beta_pdf, beta_quantile,
                      central_interval, certify, coverage_selfcheck, trajectory_margin)
from .conformal import (CalibratedValueFunction, CalibrationPoint, build_calibration_set,
                        calibrate, conditional_coverage_beta, conformal_index,
                        conformal_quantile, lower_bound, nonconformity, rollout_vstar)
from .dynamics import DoubleIntegrator, DubinsCar, SystemModel, control_grid, failure_margin, step
from .exceptions import (ArtifactError, ConfigurationError, ContractError, ControlClampWarning,
                         ConvergenceError, IntegrityError, ResolutionError, TrainingError,
                         UnsupportedVersionError)
from .filter import (EnsembleSwitchedPolicy, NominalPolicy, Strategy, SwitchedPolicy,
                     ensemble_step, run_episode, switched_step)
from .highway import HighwayConfig, HighwaySystem, Outcome, classify
from .learn import MLP, SafetyValueRegressor, TrainConfig, fit_value_function, train_ensemble
from .oracle import GridValueIteration, StateGrid, bellman_backup, value_iteration
from .systems import make_system

__version__ = "0.1.0"

__all__ = [
    "ArtifactError", "BetaDist", "CalibratedValueFunction", "CalibrationPoint",
    "CertificationResult", "ConfigurationError", "ContractError", "ControlClampWarning",
    "ConvergenceError", "DoubleIntegrator", "DubinsCar", "EnsembleSwitchedPolicy",
    "GridValueIteration", "HighwayConfig", "HighwaySystem", "IntegrityError", "MLP",
    "NominalPolicy", "Outcome", "ResolutionError", "SafetyValueRegressor", "StateGrid",
    "Strategy", "SwitchedPolicy", "SystemModel", "TrainConfig", "TrainingError",
    "UnsupportedVersionError", "bellman_backup", "beta_cdf", "beta_pdf", "beta_quantile",
    "build_calibration_set", "calibrate", "central_interval", "certify", "classify",
    "conditional_coverage_beta", "conformal_index", "conformal_quantile", "control_grid",
    "coverage_selfcheck", "ensemble_step", "failure_margin", "fit_value_function",
    "lower_bound", "make_system", "nonconformity", "rollout_vstar", "run_episode", "step",
    "switched_step", "train_ensemble", "trajectory_margin", "value_iteration",
]
