"""DenseNet training engine with pre-dropout, dropout granularities and survival schedules."""

from densedrop.dropout import DropoutMode, Granularity, MaskRNG, apply_mask, mask_family, sample_mask
from densedrop.models import ModelConfig, build_model, count_params, mask_attachment_plan
from densedrop.schedules import ScheduleKind, build_schedule
from densedrop.tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "DropoutMode",
    "Granularity",
    "MaskRNG",
    "ModelConfig",
    "ScheduleKind",
    "Tensor",
    "apply_mask",
    "backward",
    "build_model",
    "build_schedule",
    "count_params",
    "mask_attachment_plan",
    "mask_family",
    "sample_mask",
]
