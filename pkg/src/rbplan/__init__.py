"""Offline diffusion planning for MF-TDMA resource-block allocation.

Modules
-------
netsim      frame-stepped cluster simulator, reward, reference policies
dataset     offline trajectory collection, normalization, window sampling
neuralcore  init, guarded Adam, EMA, finite-difference checks, checkpoints
diffusion   noise schedule, temporal U-Net denoiser, guided DDPM/DDIM sampling
invdyn      autoregressive inverse-dynamics and behavior-cloning heads
ood         smoothed distance to data, the Lipschitz error bound, training penalty
agent       joint training loop, receding-horizon planner, evaluation
policies    batch baselines (oracle, uniform, random, behavior, BC)
cli         ``rbplan`` command line
"""
from .netsim import ScenarioSpec, SimConfig, Simulator, reward
from .dataset import OfflineDataset, collect_dataset
from .agent import PlannerConfig, TrainConfig, TrainedModels, Trainer, evaluate, summarize

__all__ = [
    "ScenarioSpec", "SimConfig", "Simulator", "reward",
    "OfflineDataset", "collect_dataset",
    "PlannerConfig", "TrainConfig", "TrainedModels", "Trainer", "evaluate", "summarize",
]
__version__ = "0.1.0"
