"""
Unit tests for EquiQuant reporters
"""

import io
import math
import unittest

import numpy as np

from reporters import (BaseReporter, JsonlReporter, ReporterFactory, Table, TextReporter,
                       parse_records)


def sample_table():
    table = Table('eval', ['scheme', 'e_mae_mev', 'n'])
    table.add(scheme='fp32', e_mae_mev=np.float64(1.0 / 3.0), n=np.int64(12))
    table.add(scheme='int8-full', e_mae_mev=2.5e-7, n=12)
    return table


class TestReporterFactory(unittest.TestCase):
    """Test reporter factory"""

    def test_create_text_reporter(self):
        """Test creating a text reporter"""
        reporter = ReporterFactory.create('text')
        self.assertIsInstance(reporter, TextReporter)
        self.assertEqual(reporter.get_name(), 'text')

    def test_create_jsonl_reporter(self):
        """Test creating a JSON-lines reporter, also under its alias"""
        self.assertIsInstance(ReporterFactory.create('JSONL'), JsonlReporter)
        self.assertIsInstance(ReporterFactory.create('json'), JsonlReporter)

    def test_create_unknown_reporter(self):
        """Test creating an unknown reporter returns None"""
        self.assertIsNone(ReporterFactory.create('html'))

    def test_register_requires_base(self):
        """Test only BaseReporter subclasses can be registered"""
        with self.assertRaises(ValueError):
            ReporterFactory.register('bogus', dict)

    def test_register_custom(self):
        """Test a registered reporter becomes available"""

        class CountingReporter(BaseReporter):
            def emit(self, table):
                self.stream.write(f"{len(table)}\n")

            def get_name(self):
                return 'count'

        ReporterFactory.register('count', CountingReporter)
        self.assertIn('count', ReporterFactory.list_reporters())
        stream = io.StringIO()
        ReporterFactory.create('count', {'stream': stream}).emit(sample_table())
        self.assertEqual(stream.getvalue(), '2\n')


class TestJsonlReporter(unittest.TestCase):
    """Test machine-readable records"""

    def test_values_parse_back_exactly(self):
        """Test every reported value, numpy scalars included, parses back exactly"""
        stream = io.StringIO()
        JsonlReporter({'stream': stream}).emit(sample_table())
        records = parse_records(stream.getvalue().splitlines())
        self.assertEqual(len(records), 2)
        self.assertEqual(records[0], {'table': 'eval', 'scheme': 'fp32', 'e_mae_mev': 1.0 / 3.0, 'n': 12})
        self.assertEqual(records[1]['e_mae_mev'], 2.5e-7)

    def test_nan_round_trip(self):
        """Test a non-finite value survives as NaN"""
        stream = io.StringIO()
        table = Table('lee', ['lee'])
        table.add(lee=float('nan'))
        JsonlReporter({'stream': stream}).emit(table)
        self.assertTrue(math.isnan(parse_records([stream.getvalue()])[0]['lee']))

    def test_empty_table(self):
        """Test an empty table writes no records"""
        stream = io.StringIO()
        JsonlReporter({'stream': stream}).emit(Table('diag', ['bits']))
        self.assertEqual(stream.getvalue(), '')


class TestTextReporter(unittest.TestCase):
    """Test human-readable tables"""

    def test_layout(self):
        """Test title, header and aligned rows"""
        stream = io.StringIO()
        TextReporter({'stream': stream, 'precision': 4}).emit(sample_table())
        lines = stream.getvalue().splitlines()
        self.assertEqual(lines[0], '# eval')
        self.assertTrue(lines[1].startswith('scheme'))
        self.assertIn('0.3333', lines[2])
        self.assertIn('2.5e-07', lines[3])
        self.assertEqual(len(lines[2]), len(lines[3]))

    def test_empty_table(self):
        """Test an empty table is marked"""
        text = TextReporter().format(Table('diag', ['bits', 'mean_angle']))
        self.assertIn('(empty)', text)


if __name__ == '__main__':
    unittest.main()
