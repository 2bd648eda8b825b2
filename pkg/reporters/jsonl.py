"""
JSON-lines record reporter for EquiQuant
One object per table row, tagged with the table name
"""

import json
from typing import Any, Dict, Iterable, List

import numpy as np

from reporters.base import BaseReporter, Table


def _plain(value: Any):
    """numpy scalars and arrays to JSON-native values"""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Cannot encode {type(value).__name__} as JSON")


def dumps_record(table_name: str, row: Dict[str, Any]) -> str:
    # repr-exact floats, so a parsed line gives back the reported value
    return json.dumps({'table': table_name, **row}, default=_plain, allow_nan=True)


def parse_records(lines: Iterable[str]) -> List[Dict[str, Any]]:
    """Records from JSON lines, blank lines skipped"""
    return [json.loads(line) for line in lines if line.strip()]


class JsonlReporter(BaseReporter):
    """Machine-readable records, one JSON object per line"""

    def emit(self, table: Table):
        for row in table.rows:
            self.stream.write(dumps_record(table.name, row) + '\n')

    def get_name(self) -> str:
        return 'jsonl'
