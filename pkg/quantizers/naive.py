"""
Per-component vector quantization for EquiQuant
Baseline that rounds every Cartesian component of a vector independently
"""

from tensor_core import Tensor

from quantizers.base import QuantParams
from quantizers.uniform import UniformQuantizer, fake_quantize


def naive_vec_quantize(h, p: QuantParams) -> Tensor:
    """Componentwise fake quantization of [..., 3] vectors"""
    return fake_quantize(h, p)


class NaiveVectorQuantizer(UniformQuantizer):
    """Signed per-tensor grid shared by all three components"""

    def __init__(self, name: str, bits: int = 8):
        super().__init__(name, bits=bits, signed=True)

    def get_name(self) -> str:
        return 'naive'
