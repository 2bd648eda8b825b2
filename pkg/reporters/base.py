"""
Base reporter class for EquiQuant
All table emitters inherit from this class
"""

import sys
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, TextIO


@dataclass
class Table:
    """Named table: ordered columns and one dict per row"""
    name: str
    columns: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)


class BaseReporter(ABC):
    """Base class for all table reporters"""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        """
        Initialize the reporter

        Args:
            config: Configuration dictionary
                - stream: open text stream to write to (default stdout)
        """
        self.config = config or {}
        self.stream: TextIO = self.config.get('stream') or sys.stdout

    @abstractmethod
    def emit(self, table: Table):
        """
        Write one table

        Args:
            table: Table to write; rows may hold numpy scalars
        """
        pass

    @abstractmethod
    def get_name(self) -> str:
        """
        Get the reporter name

        Returns:
            Reporter name (e.g., 'text', 'jsonl')
        """
        pass

    def flush(self):
        self.stream.flush()
