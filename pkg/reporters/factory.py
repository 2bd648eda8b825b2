"""
Reporter factory for EquiQuant
Creates reporter instances based on output format
"""

import logging
from typing import Any, Dict, Optional

from reporters.base import BaseReporter
from reporters.jsonl import JsonlReporter
from reporters.text import TextReporter


logger = logging.getLogger('EquiQuant.ReporterFactory')


class ReporterFactory:
    """Factory for creating reporter instances"""

    # Registry of available reporters
    _reporters = {
        'text': TextReporter,
        'jsonl': JsonlReporter,
        'json': JsonlReporter,
    }

    @classmethod
    def create(cls, reporter_type: str, config: Optional[Dict[str, Any]] = None) -> Optional[BaseReporter]:
        """
        Create a reporter instance

        Args:
            reporter_type: Output format (e.g., 'text', 'jsonl')
            config: Configuration dictionary

        Returns:
            Reporter instance or None if the format is not supported
        """
        reporter_type = reporter_type.lower()

        if reporter_type not in cls._reporters:
            logger.error(f"Unknown reporter type: {reporter_type}")
            logger.info(f"Available reporters: {', '.join(cls._reporters.keys())}")
            return None

        return cls._reporters[reporter_type](config)

    @classmethod
    def register(cls, reporter_type: str, reporter_class: type):
        """
        Register a new reporter type

        Args:
            reporter_type: Type identifier (e.g., 'csv')
            reporter_class: Reporter class (must inherit from BaseReporter)
        """
        if not issubclass(reporter_class, BaseReporter):
            raise ValueError(f"{reporter_class} must inherit from BaseReporter")

        cls._reporters[reporter_type.lower()] = reporter_class
        logger.info(f"Registered new reporter: {reporter_type}")

    @classmethod
    def list_reporters(cls) -> list:
        """Get list of available reporter types"""
        return list(cls._reporters.keys())
