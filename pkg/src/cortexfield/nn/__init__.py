"""Hand-written network: encoder, hypercolumns, conditioned decoder, training."""
from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import DecoderConfig
from .encoder import EncoderConfig, FeaturePyramid
from .layers import loss_bce, loss_l1
from .model import FieldModel, matched_ablation
from .train import Adam, TrainingConfig, TrainResult, train

__all__ = [
    "Adam", "DecoderConfig", "EncoderConfig", "FeaturePyramid", "FieldModel", "TrainResult",
    "TrainingConfig", "load_checkpoint", "loss_bce", "loss_l1", "matched_ablation", "save_checkpoint", "train",
]
