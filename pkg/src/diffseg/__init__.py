"""diffseg: a desk-scale lab for diffusion-based segmentation experiments."""

__version__ = "0.1.0"

from .analysis import (
    CalibrationReport,
    FingerprintEntry,
    FingerprintSummary,
    TimestepProfile,
    bayes_pixel_mmse,
    derivative_weights,
    ece,
    fingerprint,
    iou,
    profile_mask_error,
    profile_training_loss,
    smooth,
)
from .data import DatasetSpec, MaskImagePair, generate_dataset, split_train_val
from .diffusion import (
    DiffusionSchedule,
    TimestepWeights,
    ddpm_sample,
    decode_mask,
    encode_mask,
    eps_to_x0,
    epsilon_loss,
    forward_sample,
    linear_schedule,
    x0_loss,
    x0_to_eps,
)
from .errors import (
    ConfigError,
    DataError,
    DiffsegError,
    FormatError,
    IoError,
    ShapeError,
    SingularityError,
    StateError,
)
from .models import DenoiserModel, ModelConfig, build_model, load_model, save_model
from .training import (
    ENSEMBLE_PRESETS,
    RunRecord,
    TrainConfig,
    ensemble_predict,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "CalibrationReport",
    "ConfigError",
    "DataError",
    "DatasetSpec",
    "DenoiserModel",
    "DiffsegError",
    "DiffusionSchedule",
    "ENSEMBLE_PRESETS",
    "FingerprintEntry",
    "FingerprintSummary",
    "FormatError",
    "IoError",
    "MaskImagePair",
    "ModelConfig",
    "RunRecord",
    "ShapeError",
    "SingularityError",
    "StateError",
    "TimestepProfile",
    "TimestepWeights",
    "TrainConfig",
    "bayes_pixel_mmse",
    "build_model",
    "ddpm_sample",
    "decode_mask",
    "derivative_weights",
    "ece",
    "encode_mask",
    "eps_to_x0",
    "epsilon_loss",
    "fingerprint",
    "forward_sample",
    "generate_dataset",
    "iou",
    "linear_schedule",
    "load_checkpoint",
    "load_model",
    "profile_mask_error",
    "profile_training_loss",
    "save_checkpoint",
    "save_model",
    "smooth",
    "split_train_val",
    "train",
    "x0_loss",
    "x0_to_eps",
    "__version__",
]
