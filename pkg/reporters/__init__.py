"""
EquiQuant Reporters Package
Text and JSON-lines emitters for result tables
"""

from reporters.base import BaseReporter, Table
from reporters.factory import ReporterFactory
from reporters.jsonl import JsonlReporter, dumps_record, parse_records
from reporters.text import TextReporter

__all__ = ['BaseReporter', 'Table', 'TextReporter', 'JsonlReporter', 'ReporterFactory',
           'dumps_record', 'parse_records']
