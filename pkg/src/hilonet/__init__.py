"""hilonet: a dual-branch window-attention backbone, its frequency-aware
masked-image pretraining pipeline, and the tooling around them, built on
a small numpy autodiff core."""

from .analyzer import CostReport, analyze, count_flops, count_params, hf_overhead, verify_against_model
from .datakit import Dataset, load_checkpoint, load_image, load_image_dir, save_checkpoint, synth_corpus
from .errors import ChecksumError, ConfigError, DataError, ShapeError, ShapeMismatchError, VersionError
from .freq import Band, FreqClass, classify_patch, dft2, high_pass, idft2, low_pass, radial_energy_ratio
from .freqmim import MaskParams, MaskPlan, PretrainConfig, PretrainModel, apply_mask, plan_mask, pretrain_loop
from .gradcheck import run_model_check, run_op_suite
from .model import HiLoNet, ModelConfig, cross_entropy, init_weights
from .optim import Adam, adam_step, sgd_step
from .tensor import GradTape, Tensor, set_default_dtype, using_dtype

__version__ = "0.1.0"

__all__ = [
    "Adam", "Band", "ChecksumError", "ConfigError", "CostReport", "DataError",
    "Dataset", "FreqClass", "GradTape", "HiLoNet", "MaskParams", "MaskPlan",
    "ModelConfig", "PretrainConfig", "PretrainModel", "ShapeError",
    "ShapeMismatchError", "Tensor", "VersionError", "adam_step", "analyze",
    "apply_mask", "classify_patch", "count_flops", "count_params",
    "cross_entropy", "dft2", "hf_overhead", "high_pass", "idft2",
    "init_weights", "load_checkpoint", "load_image", "load_image_dir",
    "low_pass", "plan_mask", "pretrain_loop", "radial_energy_ratio",
    "run_model_check", "run_op_suite", "save_checkpoint", "set_default_dtype",
    "sgd_step", "synth_corpus", "using_dtype", "verify_against_model",
]
