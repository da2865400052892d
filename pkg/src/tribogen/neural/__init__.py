"""Self-contained MLP / VAE / CVAE stack in numpy."""
from ..params import postprocess
from .io import load_checkpoint, save_checkpoint
from .model import (Checkpoint, NetworkSpec, NumericError, VAE, backward, forward, infer,
                    init_network, loss, reconstruct)
from .optim import TrainConfig, adamw_step, kl_beta, onecycle_lr
from .train import ScaledData, TrainingDiverged, load_scaled, parameter_smape, train

__all__ = ["Checkpoint", "NetworkSpec", "NumericError", "VAE", "TrainConfig", "ScaledData",
           "TrainingDiverged", "adamw_step", "backward", "forward", "infer", "init_network",
           "kl_beta", "load_checkpoint", "load_scaled", "loss", "onecycle_lr", "parameter_smape",
           "postprocess", "reconstruct", "save_checkpoint", "train"]
