"""
Uniform symmetric quantization for EquiQuant
Max observers, fake quantization with learned step sizes and the matching integer helpers
"""

import logging
from typing import Iterable, List, Optional

import numpy as np

import tensor_core as tc
from tensor_core import Tensor, round_half_away

from quantizers.base import (MIN_STEP, OBSERVE, PER_CHANNEL, PER_TENSOR, BaseQuantizer,
                             QuantParams, qrange)


logger = logging.getLogger('EquiQuant.Quantizers.Uniform')


class MaxObserver:
    """Running max over a stream (|x| when signed, x when unsigned)"""

    def __init__(self, signed: bool, channel_axis: Optional[int] = None):
        self.signed = signed
        self.channel_axis = channel_axis
        self.running_max: Optional[np.ndarray] = None
        self.n_samples = 0

    def update(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float32)
        values = np.abs(data) if self.signed else np.maximum(data, 0)
        if self.channel_axis is None:
            current = np.asarray(values.max() if values.size else 0.0, dtype=np.float32)
        else:
            axis = self.channel_axis % values.ndim
            reduce = tuple(a for a in range(values.ndim) if a != axis)
            current = values.max(axis=reduce) if values.size else np.zeros(values.shape[axis], np.float32)
        self.running_max = current if self.running_max is None else np.maximum(self.running_max, current)
        self.n_samples += 1

    def step(self, bits: int) -> np.ndarray:
        """Step size covering the observed range; 1e-8 floor for all-zero streams"""
        qmax = qrange(bits, self.signed)[1]
        peak = np.zeros((), np.float32) if self.running_max is None else self.running_max
        return np.maximum(peak.astype(np.float64) / qmax, MIN_STEP).astype(np.float32)


def observe_calibrate(samples: Iterable[np.ndarray], signed: bool, bits: int,
                      channel_axis: Optional[int] = None) -> QuantParams:
    """
    Calibrate a symmetric (or unsigned-from-zero) quantizer from a sample stream

    Args:
        samples: Iterable of arrays
        signed: Signed grid (scale from max|x|) or unsigned grid (scale from max x)
        bits: Bit-width
        channel_axis: Axis holding output channels for per-channel calibration

    Returns:
        QuantParams; degenerate is set when every sample was zero
    """
    observer = MaxObserver(signed, channel_axis)
    for sample in samples:
        observer.update(sample)
    if observer.n_samples == 0:
        raise ValueError("observe_calibrate needs at least one sample")
    scale = observer.step(bits)
    degenerate = bool(np.any(observer.running_max <= 0))
    if degenerate:
        logger.warning(f"Degenerate calibration: all-zero stream, step floored at {MIN_STEP}")
    return QuantParams(bits=bits, signed=signed, scale=scale,
                       granularity=PER_TENSOR if channel_axis is None else PER_CHANNEL,
                       degenerate=degenerate)


def fake_quantize(x, p: QuantParams, step: Optional[Tensor] = None) -> Tensor:
    """
    clamp(round(x / step), q_min, q_max) * step with straight-through rounding

    The gradient with respect to x is the identity inside the clamp range and
    zero outside; the gradient with respect to a learned step follows from the
    same expression.

    Args:
        x: Input tensor
        p: Quantizer parameters (bits, signedness, scale)
        step: Trainable step tensor overriding p.scale
    """
    step = Tensor(p.scale) if step is None else step
    q = tc.clamp(tc.ste_round(tc.div(x, step)), p.qmin, p.qmax)
    return tc.mul(q, step)


def fake_quantize_bias(b, scale: np.ndarray) -> Tensor:
    """Round a bias onto the 32-bit accumulator grid of scale = in_scale * w_scale"""
    scale = Tensor(np.asarray(scale, dtype=np.float32))
    return tc.mul(tc.ste_round(tc.div(b, scale)), scale)


def quantize_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Integer codes of x on the grid of p (same float32 arithmetic as fake_quantize)"""
    ratio = np.asarray(x, dtype=np.float32) / p.scale
    return np.clip(round_half_away(ratio), p.qmin, p.qmax).astype(np.int32)


def dequantize_array(q: np.ndarray, p: QuantParams) -> np.ndarray:
    return q.astype(np.float32) * p.scale


class UniformQuantizer(BaseQuantizer):
    """Symmetric uniform quantizer with a learned step size"""

    def __init__(self, name: str, bits: int = 8, signed: bool = True,
                 channel_axis: Optional[int] = None, n_channels: int = 1):
        super().__init__(name, bits, signed)
        self.channel_axis = channel_axis
        shape = () if channel_axis is None else (n_channels,)
        self.step = Tensor.parameter(np.ones(shape, dtype=np.float32), name=f"{name}.step")
        self.observer = MaxObserver(signed, channel_axis)

    @property
    def granularity(self) -> str:
        return PER_TENSOR if self.channel_axis is None else PER_CHANNEL

    def forward(self, x: Tensor) -> Tensor:
        return fake_quantize(x, self.params(), self.step)

    def observe(self, data: np.ndarray):
        self.observer.update(data)

    def freeze(self):
        if self.observer.n_samples == 0:
            logger.warning(f"{self.name}: freeze() without observations, keeping step {self.step.data}")
        else:
            self.step.data[...] = self.observer.step(self.bits)
            if np.any(self.observer.running_max <= 0):
                logger.warning(f"{self.name}: degenerate calibration, step floored at {MIN_STEP}")
        self.frozen = True
        logger.debug(f"{self.name}: frozen at step {np.round(self.step.data, 6)}")

    def calibrate(self, data: np.ndarray):
        """Observe a single array (weights) and freeze immediately"""
        state = self.state
        self.set_state(OBSERVE)
        self.observe(data)
        self.freeze()
        self.set_state(state)

    def parameters(self) -> List[Tensor]:
        return [self.step]

    def params(self) -> QuantParams:
        return QuantParams(bits=self.bits, signed=self.signed, scale=self.step.data.copy(),
                           granularity=self.granularity)

    def load_params(self, p: QuantParams):
        self.bits, self.signed = p.bits, p.signed
        self.step.data[...] = p.scale
        self.frozen = True

    def get_name(self) -> str:
        return 'uniform'
