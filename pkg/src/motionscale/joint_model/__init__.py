"""Encoder-decoder joint motion model."""
from .checkpoint import load_checkpoint, save_checkpoint
from .model import JointModel, ModelConfig, batch_targets
from .planner import finetune_planner, planner_from, planner_view, without_route
from .sampling import JointRollout, RolloutSet, sample_rollouts, sample_tokens
from .train import TrainConfig, TrainingDiverged, batch_order, evaluate, lr_at, train

__all__ = [
    "JointModel", "ModelConfig", "batch_targets", "TrainConfig", "TrainingDiverged", "train", "evaluate",
    "lr_at", "batch_order", "JointRollout", "RolloutSet", "sample_rollouts", "sample_tokens", "finetune_planner",
    "planner_from", "planner_view", "without_route", "save_checkpoint", "load_checkpoint",
]
