"""Online control-informed learning: EKF parameter estimation with exact optimal-control trajectory gradients."""

from .estimator import EstimatorState, NoiseModel, ResidualSpec, ekf_predict, ekf_update
from .models import make_environment
from .modes import (ImitationMode, PolicyTuningMode, SysIdMode, cumulative_loss, ocil_step, run_offline_phase,
                    run_online_phase)
from .ocp import OCProblem, solve_ocp
from .pdp import trajectory_gradient

__version__ = "0.1.0"

__all__ = [
    "EstimatorState", "NoiseModel", "ResidualSpec", "ekf_predict", "ekf_update", "make_environment",
    "ImitationMode", "PolicyTuningMode", "SysIdMode", "cumulative_loss", "ocil_step", "run_offline_phase",
    "run_online_phase", "OCProblem", "solve_ocp", "trajectory_gradient",
]
