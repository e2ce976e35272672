"""3D CNN backbones with selective state-space (Mamba) token mixing, on a small numpy autodiff core."""
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, UndefinedMetricError
from .kernels import BACKEND
from .models import ModelConfig, build_cls_model, build_landmark_model, build_model, build_seg_model
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "ContractError", "DimensionError", "FormatError", "ModelConfig", "NumericError",
    "Tensor", "UndefinedMetricError", "backward", "build_cls_model", "build_landmark_model", "build_model",
    "build_seg_model", "no_grad", "__version__",
]
