"""
EquiQuant Quantizers Package
Uniform, magnitude-direction decoupled and per-component vector quantizers
"""

from quantizers.base import (OBSERVE, OFF, ON, BaseQuantizer, QuantizationError, QuantParams,
                             qrange)
from quantizers.factory import QuantizerFactory
from quantizers.mddq import MddqParams, MddqQuantizer, direction_params, mddq_quantize
from quantizers.naive import NaiveVectorQuantizer, naive_vec_quantize
from quantizers.report import angular_error_report
from quantizers.uniform import (UniformQuantizer, dequantize_array, fake_quantize,
                                fake_quantize_bias, observe_calibrate, quantize_array)

__all__ = [
    'BaseQuantizer', 'QuantParams', 'QuantizationError', 'qrange', 'OFF', 'OBSERVE', 'ON',
    'UniformQuantizer', 'MddqQuantizer', 'NaiveVectorQuantizer', 'QuantizerFactory',
    'MddqParams', 'direction_params', 'fake_quantize', 'fake_quantize_bias', 'observe_calibrate',
    'quantize_array', 'dequantize_array', 'mddq_quantize', 'naive_vec_quantize',
    'angular_error_report',
]
