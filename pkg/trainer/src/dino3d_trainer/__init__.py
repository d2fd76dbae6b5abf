"""Toy self-distillation pretraining for 3D volumes.

Trains a small 3D vision transformer with a student/teacher pair
(momentum teacher, masked student, cross-view class-token distillation,
masked-token prediction, and an embedding-spread penalty), then exports
dense patch-token features in an exchange format that volumetric
registration tools can consume.
"""

from .ema import ema_update
from .objectives import (
    KOLEO_EPS,
    RunningCenter,
    distillation_loss,
    koleo_loss,
    masked_token_loss,
    pair_distance,
    soften_teacher,
)
from .schedules import (
    DinoSchedules,
    ema_momentum_at,
    lr_at,
    sample_mask_ratio,
    teacher_temp_at,
)
from .train import (
    StepRecord,
    TrainConfig,
    TrainingAbort,
    build_models,
    save_checkpoint,
    smoothed,
    train_toy,
)
from .vit3d import ProjectionHead, Vit3d, Vit3dConfig, count_parameters

__all__ = [
    "KOLEO_EPS",
    "DinoSchedules",
    "ProjectionHead",
    "RunningCenter",
    "StepRecord",
    "TrainConfig",
    "TrainingAbort",
    "Vit3d",
    "Vit3dConfig",
    "build_models",
    "count_parameters",
    "distillation_loss",
    "ema_momentum_at",
    "ema_update",
    "koleo_loss",
    "lr_at",
    "masked_token_loss",
    "pair_distance",
    "sample_mask_ratio",
    "save_checkpoint",
    "smoothed",
    "soften_teacher",
    "teacher_temp_at",
    "train_toy",
]

__version__ = "0.1.0"
