"""
Magnitude-direction decoupled quantization for EquiQuant
Vectors are split into a norm on an unsigned grid and a unit direction on a fixed
[-1, 1] grid, and the quantized direction is renormalized
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

import tensor_core as tc
from tensor_core import Tensor, squared_norm

from quantizers.base import PER_TENSOR, BaseQuantizer, QuantizationError, QuantParams
from quantizers.uniform import MaxObserver, fake_quantize


logger = logging.getLogger('EquiQuant.Quantizers.Mddq')

ZERO_VECTOR_THRESHOLD = 1e-12


def direction_params(bits: int) -> QuantParams:
    """Signed grid covering [-1, 1] exactly"""
    return QuantParams(bits=bits, signed=True, scale=1.0 / (2 ** (bits - 1) - 1))


@dataclass
class MddqParams:
    """Unsigned magnitude grid plus fixed-range signed direction grid"""
    mag: QuantParams
    dir: QuantParams

    def __post_init__(self):
        if self.mag.signed:
            raise QuantizationError("MDDQ magnitude quantizer must be unsigned")
        expected = direction_params(self.dir.bits).scale
        if not self.dir.signed or self.dir.scale != expected:
            raise QuantizationError(f"MDDQ direction grid must be signed with step {float(expected)}")

    @classmethod
    def create(cls, mag_scale: float, bits: int = 8, dir_bits: Optional[int] = None) -> 'MddqParams':
        return cls(mag=QuantParams(bits=bits, signed=False, scale=mag_scale),
                   dir=direction_params(dir_bits or bits))


def mddq_quantize(h, mp: MddqParams, mag_step: Optional[Tensor] = None) -> Tensor:
    """
    Quantize vectors (last axis of length 3) by magnitude and direction

    Zero vectors (norm below 1e-12) map to zero. If the quantized direction
    collapses to zero, the unquantized direction is used instead. Rounding is
    straight-through; the norm and renormalization are differentiated exactly.

    Args:
        h: Tensor of shape [..., 3]
        mp: Magnitude and direction parameters
        mag_step: Trainable magnitude step overriding mp.mag.scale

    Returns:
        Tensor of the same shape
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    raw_norm = np.sqrt(squared_norm(h.data))
    zero = raw_norm < ZERO_VECTOR_THRESHOLD

    r = tc.l2norm(h)
    unit = tc.div(h, r)
    d = fake_quantize(unit, mp.dir)
    collapsed = np.sqrt(squared_norm(d.data)) < ZERO_VECTOR_THRESHOLD
    direction = tc.div(d, tc.l2norm(d))
    if np.any(collapsed & ~zero):
        direction = tc.where(collapsed, unit, direction)
    out = tc.mul(fake_quantize(r, mp.mag, mag_step), direction)
    if np.any(zero):
        out = tc.where(zero, 0.0, out)
    return out


class MddqQuantizer(BaseQuantizer):
    """Attachment point for equivariant vector channels"""

    def __init__(self, name: str, bits: int = 8, dir_bits: Optional[int] = None):
        super().__init__(name, bits, signed=False)
        self.dir_bits = dir_bits or bits
        self.mag_step = Tensor.parameter(np.ones((), dtype=np.float32), name=f"{name}.mag_step")
        self.observer = MaxObserver(signed=False)

    def forward(self, x: Tensor) -> Tensor:
        return mddq_quantize(x, self.params(), self.mag_step)

    def observe(self, data: np.ndarray):
        self.observer.update(np.sqrt(squared_norm(np.asarray(data, dtype=np.float32))))

    def freeze(self):
        if self.observer.n_samples:
            self.mag_step.data[...] = self.observer.step(self.bits)
            if np.any(self.observer.running_max <= 0):
                logger.warning(f"{self.name}: degenerate magnitude calibration")
        else:
            logger.warning(f"{self.name}: freeze() without observations, keeping step {self.mag_step.data}")
        self.frozen = True

    def parameters(self) -> List[Tensor]:
        return [self.mag_step]

    def params(self) -> MddqParams:
        return MddqParams(mag=QuantParams(bits=self.bits, signed=False, scale=self.mag_step.data.copy(),
                                          granularity=PER_TENSOR),
                          dir=direction_params(self.dir_bits))

    def load_params(self, mp: MddqParams):
        self.bits, self.dir_bits = mp.mag.bits, mp.dir.bits
        self.mag_step.data[...] = mp.mag.scale
        self.frozen = True

    def get_name(self) -> str:
        return 'mddq'
