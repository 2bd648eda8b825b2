"""
Quantizer factory for EquiQuant
Creates quantizer instances by kind
"""

import logging
from typing import Any

from quantizers.base import BaseQuantizer, QuantizationError
from quantizers.mddq import MddqQuantizer
from quantizers.naive import NaiveVectorQuantizer
from quantizers.uniform import UniformQuantizer


logger = logging.getLogger('EquiQuant.QuantizerFactory')


class QuantizerFactory:
    """Factory for creating quantizer instances"""

    # Registry of available quantizers
    _quantizers = {
        'uniform': UniformQuantizer,
        'mddq': MddqQuantizer,
        'naive': NaiveVectorQuantizer,
    }

    @classmethod
    def create(cls, kind: str, name: str, **options: Any) -> BaseQuantizer:
        """
        Create a quantizer instance

        Args:
            kind: Quantizer kind (e.g., 'uniform', 'mddq')
            name: Attachment-point name
            options: Constructor options (bits, signed, channel_axis, ...)

        Returns:
            Quantizer instance
        """
        kind = kind.lower()
        if kind not in cls._quantizers:
            logger.error(f"Unknown quantizer kind: {kind}")
            logger.info(f"Available quantizers: {', '.join(cls._quantizers.keys())}")
            raise QuantizationError(f"Unknown quantizer kind: {kind}")
        return cls._quantizers[kind](name, **options)

    @classmethod
    def register(cls, kind: str, quantizer_class: type):
        """
        Register a new quantizer kind

        Args:
            kind: Kind identifier
            quantizer_class: Quantizer class (must inherit from BaseQuantizer)
        """
        if not issubclass(quantizer_class, BaseQuantizer):
            raise ValueError(f"{quantizer_class} must inherit from BaseQuantizer")
        cls._quantizers[kind.lower()] = quantizer_class
        logger.info(f"Registered new quantizer: {kind}")

    @classmethod
    def list_quantizers(cls) -> list:
        """Get list of available quantizer kinds"""
        return list(cls._quantizers.keys())
