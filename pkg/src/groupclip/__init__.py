"""Differentially private training with group-wise per-example gradient clipping."""

from .clip import AdaptivePerLayer, FixedPerLayer, Flat, ParamGroup, clip_per_group, flat_two_phase, naive_oracle
from .nn import Model, forward, loss, mlp
from .optim import SGD, Adam, Fixed, LRSchedule, OptimizerConfig, Poisson, TrainState, dp_step, init_state, train
from .privacy import PrivacySpec, calibrate_sigma, make_noise_plan, rdp_sgm, split_budget

__version__ = "0.1.0"

__all__ = [
    "AdaptivePerLayer", "FixedPerLayer", "Flat", "ParamGroup", "clip_per_group", "flat_two_phase", "naive_oracle",
    "Model", "forward", "loss", "mlp",
    "SGD", "Adam", "Fixed", "LRSchedule", "OptimizerConfig", "Poisson", "TrainState", "dp_step", "init_state", "train",
    "PrivacySpec", "calibrate_sigma", "make_noise_plan", "rdp_sgm", "split_budget",
]
