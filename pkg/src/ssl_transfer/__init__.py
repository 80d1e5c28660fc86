"""Contrastive self-supervised pretraining and label-efficient transfer for fundus images."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datasets import LabelScheme, SplitSpec, load_manifest, stratified_split, subset_by_fraction
from .metrics import compute_metrics
from .model import ClassifierHeadConfig, EncoderConfig, ProjectionHeadConfig, build_model, transfer_encoder
from .objective import nt_xent_loss
from .optim import LarsHyper, OptimizerState, lars_step
from .trainer import FinetuneConfig, PretextConfig, evaluate, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ClassifierHeadConfig", "EncoderConfig", "FinetuneConfig", "LabelScheme", "LarsHyper",
    "OptimizerState", "PretextConfig", "ProjectionHeadConfig", "SplitSpec", "build_model", "compute_metrics",
    "evaluate", "finetune", "lars_step", "load_checkpoint", "load_manifest", "nt_xent_loss", "pretrain",
    "save_checkpoint", "stratified_split", "subset_by_fraction", "transfer_encoder",
]
