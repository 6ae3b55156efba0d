"""fxdl: two-stage few-step distillation with block caching, on toy worlds."""
from .autograd import ContractError, NumericError, ParamSet, Tensor, grad_eval, no_grad, precision
from .cache import Compensator, CompensatorBank, effective_nfe, profile_reuse_error, select_segment
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .denoiser import BlockStackModel, SegmentSpec, copy_weights
from .diffusion import GuidanceConfig, Schedule, euler_sample, shift_time
from .kernels import BACKEND
from .worlds import MixtureSpec, preset

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BlockStackModel", "CheckpointError", "Compensator", "CompensatorBank", "ConfigError",
    "ContractError", "GuidanceConfig", "MixtureSpec", "NumericError", "ParamSet", "RunConfig", "Schedule",
    "SegmentSpec", "Tensor", "copy_weights", "effective_nfe", "euler_sample", "grad_eval", "load_checkpoint",
    "load_config", "no_grad", "precision", "preset", "profile_reuse_error", "save_checkpoint", "select_segment",
    "shift_time",
]
