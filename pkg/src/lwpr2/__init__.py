"""Online vehicle-dynamics model adaptation with locally weighted regression
pseudo-rehearsal.

The package combines four pieces:

* ``dynamics``  -- a ground-truth bicycle-model vehicle simulator used to
  generate system-identification datasets and online data streams,
* ``lwpr`` / ``gmm`` -- an incremental locally weighted regression ensemble
  and a frozen Gaussian mixture sampler that together manufacture synthetic
  training pairs,
* ``mlp`` / ``trainer`` -- a small feedforward dynamics network adapted
  online with a constrained gradient rule that cannot move against the
  synthetic (rehearsal) gradient,
* ``mppi`` / ``harness`` -- a sampling-based MPC loop and the experiment
  protocols (offline / online / active / soak).
"""

from lwpr2.dynamics import (
    Control,
    DynamicState,
    KinematicState,
    TrainingPair,
    VehicleParams,
    apply_regime,
    step,
)
from lwpr2.gmm import GmmModel, fit_em, sample_gmm, select_k
from lwpr2.lwpr import LwprEnsemble, LwprModel
from lwpr2.mlp import AdamState, MlpParams, adam_step, forward, mse_gradient
from lwpr2.standardize import Standardizer
from lwpr2.trainer import LocalOperatingSet, OnlineTrainer, TrainerConfig, constrained_alpha

__all__ = [
    "AdamState",
    "Control",
    "DynamicState",
    "GmmModel",
    "KinematicState",
    "LocalOperatingSet",
    "LwprEnsemble",
    "LwprModel",
    "MlpParams",
    "OnlineTrainer",
    "Standardizer",
    "TrainerConfig",
    "TrainingPair",
    "VehicleParams",
    "adam_step",
    "apply_regime",
    "constrained_alpha",
    "fit_em",
    "forward",
    "mse_gradient",
    "sample_gmm",
    "select_k",
    "step",
]
