"""
Human-readable table reporter for EquiQuant
"""

from numbers import Integral, Real
from typing import Any, Dict, Optional

from reporters.base import BaseReporter, Table


class TextReporter(BaseReporter):
    """Aligned plain-text columns with a title line"""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        super().__init__(config)
        self.precision = int(self.config.get('precision', 6))

    def _cell(self, value: Any) -> str:
        if value is None:
            return '-'
        if isinstance(value, bool) or isinstance(value, Integral):
            return str(value)
        if isinstance(value, Real):
            return f"{float(value):.{self.precision}g}"
        if isinstance(value, (list, tuple)):
            return ','.join(self._cell(v) for v in value)
        return str(value)

    def format(self, table: Table) -> str:
        cells = [[self._cell(row.get(c)) for c in table.columns] for row in table.rows]
        widths = [max([len(c)] + [len(r[k]) for r in cells]) for k, c in enumerate(table.columns)]
        lines = [f"# {table.name}",
                 '  '.join(c.ljust(w) for c, w in zip(table.columns, widths)).rstrip()]
        for r in cells:
            lines.append('  '.join(v.rjust(w) for v, w in zip(r, widths)).rstrip())
        if not cells:
            lines.append('(empty)')
        return '\n'.join(lines) + '\n'

    def emit(self, table: Table):
        self.stream.write(self.format(table))
        self.stream.write('\n')

    def get_name(self) -> str:
        return 'text'
