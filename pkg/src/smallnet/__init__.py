"""smallNet: float training, Q16.16 inference and a cycle-counting datapath model."""

from .fixedpoint import Fx32, SigmoidLut
from .netcore import NetworkParams, forward, forward_batch
from .quantizer import QuantizedParams, quantize_params

__all__ = ["Fx32", "SigmoidLut", "NetworkParams", "QuantizedParams",
           "forward", "forward_batch", "quantize_params"]
__version__ = "0.1.0"
