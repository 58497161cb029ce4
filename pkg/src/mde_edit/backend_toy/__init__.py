"""Self-trained toy text-conditioned latent denoiser and its synthetic shapes world."""
from .backend import DenoiserBackend, ToyBackend
from .checkpoint import load_backend, save_backend
from .model import ToyArch, ToyDenoiser
from .sampling import ddim_sample
from .scenes import Background, Shape, SyntheticScene, generate_dataset, random_scene, read_dataset, write_dataset
from .schedule import NoiseSchedule, ddim_move
from .train import DivergedTraining, TrainConfig, heldout_loss, train_toy

__all__ = [
    "Background",
    "DenoiserBackend",
    "DivergedTraining",
    "NoiseSchedule",
    "Shape",
    "SyntheticScene",
    "ToyArch",
    "ToyBackend",
    "ToyDenoiser",
    "TrainConfig",
    "ddim_move",
    "ddim_sample",
    "generate_dataset",
    "heldout_loss",
    "load_backend",
    "random_scene",
    "read_dataset",
    "save_backend",
    "train_toy",
    "write_dataset",
]
