"""Normal-guided sparse-attention stereo matching with a synthetic training corpus."""

__version__ = "0.1.0"

from greaten.synthdata import (
    SceneConfig,
    StereoSample,
    generate_scene,
    read_sample,
    write_sample,
)
from greaten.augment import StaConfig, apply_sta
from greaten.config import RunConfig, TrainConfig, load_run_config
from greaten.loss_metrics import compute_metrics, stereo_loss
from greaten.model import (
    GreatenModel,
    ModelConfig,
    build_model,
    load_checkpoint,
    samples_to_batch,
    save_checkpoint,
    train_step,
)

__all__ = [
    "GreatenModel",
    "ModelConfig",
    "RunConfig",
    "SceneConfig",
    "StaConfig",
    "StereoSample",
    "TrainConfig",
    "apply_sta",
    "build_model",
    "compute_metrics",
    "generate_scene",
    "load_checkpoint",
    "load_run_config",
    "read_sample",
    "samples_to_batch",
    "save_checkpoint",
    "stereo_loss",
    "train_step",
    "write_sample",
    "__version__",
]
