from .bounce import BouncePointSet, relative_distances, sample_bounce_points
from .inras import InrasField
from .losses import (LossConfig, decay_curve, loss_decay, loss_naf, loss_stft_multires,
                     total_loss)
from .naf import NafField
from .train import FieldConfig, RirSet, TrainSchedule, build_field, predict, train

__all__ = [
    "BouncePointSet", "relative_distances", "sample_bounce_points", "InrasField", "NafField",
    "LossConfig", "decay_curve", "loss_decay", "loss_naf", "loss_stft_multires", "total_loss",
    "FieldConfig", "RirSet", "TrainSchedule", "build_field", "predict", "train",
]
