"""Two-stream RGB-D transformer for egocentric action recognition, built on a small numpy autodiff core."""

from .model import ModelConfig, Trear, positional_encoding
from .tensor import Tensor

__all__ = ["ModelConfig", "Trear", "Tensor", "positional_encoding"]
__version__ = "0.1.0"
