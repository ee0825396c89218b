"""Smooth pulse synthesis and neural interpolation of parameterized quantum gate families."""

from .quantum import ControlSystem, GateFamily, gate_family, gate_fidelity, make_system
from .trajectory import AugmentedTrajectory, rollout
from .solver import (DirectSumProblem, EdgeMode, SmoothPulseProblem, SolverOptions, solve_direct_sum,
                     solve_mintime, solve_smooth_pulse, synthesis_defaults, synthesize_references)
from .network import InterpolatorNetwork, TrainingConfig, pretrain, train
from .calibration import exact_last_layer_correction, sample_transfer, transfer_learn

__version__ = "0.1.0"
