"""
Base quantizer class for EquiQuant
All quantizers attached to a model inherit from this class
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Tuple, Union

import numpy as np

from tensor_core import Tensor


logger = logging.getLogger('EquiQuant.Quantizers')

MIN_STEP = 1e-8
PER_TENSOR = 'per-tensor'
PER_CHANNEL = 'per-channel'

OFF = 'off'
OBSERVE = 'observe'
ON = 'on'


class QuantizationError(ValueError):
    """Raised on invalid quantizer parameters, unknown schemes or unfrozen layers"""


def qrange(bits: int, signed: bool) -> Tuple[int, int]:
    """Integer grid [q_min, q_max] for a bit-width"""
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


@dataclass
class QuantParams:
    """Scale, zero-point, bit-width, signedness and granularity of one quantizer"""
    bits: int
    signed: bool
    scale: Union[float, np.ndarray]
    zero_point: int = 0
    granularity: str = PER_TENSOR
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise QuantizationError(f"bits must lie in [2, 8], got {self.bits}")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise QuantizationError(f"Unknown granularity: {self.granularity}")
        scale = np.asarray(self.scale, dtype=np.float32)
        if scale.size == 0 or not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")
        if self.granularity == PER_TENSOR and scale.size != 1:
            raise QuantizationError("per-tensor params carry exactly one scale")
        if self.zero_point != 0:
            raise QuantizationError("only zero_point = 0 is supported")
        self.scale = scale.reshape(()) if self.granularity == PER_TENSOR else scale.reshape(-1)

    @property
    def qmin(self) -> int:
        return qrange(self.bits, self.signed)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits, self.signed)[1]


class BaseQuantizer(ABC):
    """
    Base class for all quantizers

    A quantizer is in one of three states: off (identity), observe (identity
    forward while collecting statistics) or on (fake quantization).
    """

    def __init__(self, name: str, bits: int, signed: bool):
        """
        Initialize the quantizer

        Args:
            name: Attachment-point name, used in checkpoints and logs
            bits: Bit-width
            signed: Whether the integer grid is signed
        """
        if not 2 <= bits <= 8:
            raise QuantizationError(f"{name}: bits must lie in [2, 8], got {bits}")
        self.name = name
        self.bits = bits
        self.signed = signed
        self.state = OFF
        self.frozen = False

    def __call__(self, x: Tensor) -> Tensor:
        if self.state == OFF:
            return x
        if self.state == OBSERVE:
            self.observe(x.data)
            return x
        if not self.frozen:
            raise QuantizationError(f"{self.name}: quantizer switched on before freeze()")
        return self.forward(x)

    def set_state(self, state: str):
        if state not in (OFF, OBSERVE, ON):
            raise QuantizationError(f"Unknown quantizer state: {state}")
        self.state = state

    @abstractmethod
    def forward(self, x: Tensor) -> Tensor:
        """
        Fake-quantize a tensor

        Args:
            x: Input tensor

        Returns:
            Tensor on the quantization grid, recorded on the active tape
        """
        pass

    @abstractmethod
    def observe(self, data: np.ndarray):
        """Accumulate running statistics from one activation or weight sample"""
        pass

    @abstractmethod
    def freeze(self):
        """Turn observed statistics into the step size used from now on"""
        pass

    @abstractmethod
    def parameters(self) -> List[Tensor]:
        """Trainable step-size tensors"""
        pass

    @abstractmethod
    def get_name(self) -> str:
        """
        Get the quantizer kind

        Returns:
            Kind name (e.g., 'uniform', 'mddq', 'naive')
        """
        pass

    def clamp_steps(self):
        """Keep learned step sizes positive after an optimizer update"""
        for step in self.parameters():
            np.maximum(step.data, MIN_STEP, out=step.data)
