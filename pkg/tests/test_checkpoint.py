"""
Unit tests for the binary checkpoint container
"""

import os
import shutil
import tempfile
import unittest

import numpy as np

from checkpoint import (Checkpoint, CheckpointError, decode, encode, load_checkpoint,
                        pack_int4, save_checkpoint, unpack_int4)
from quantizers import QuantParams


class TestCheckpoint(unittest.TestCase):
    """Checkpoint encoding, decoding and durable writes"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        rng = np.random.default_rng(0)
        self.ckpt = Checkpoint(config={'scheme': 'int8-full', 'F0': 8, 'lr': 1e-4})
        self.ckpt.add('embed', rng.normal(size=(10, 8)))
        self.ckpt.add('layer0.wq.weight', rng.integers(-127, 128, size=(8, 4)), 'i8',
                      QuantParams(bits=8, signed=True, scale=rng.uniform(0.01, 0.1, size=4),
                                  granularity='per-channel'))
        self.ckpt.add('layer0.wv.weight', rng.integers(-8, 8, size=(3, 5)), 'i4',
                      QuantParams(bits=4, signed=True, scale=np.full(5, 0.3, np.float32),
                                  granularity='per-channel'))
        self.ckpt.add('layer0.wq.bias', rng.integers(-10**6, 10**6, size=4), 'i32')
        self.ckpt.add('layer0.wq.act_in', np.float32(0.05), 'f32',
                      QuantParams(bits=8, signed=True, scale=0.05))

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_round_trip_bytes(self):
        """Test write-read-write gives identical bytes"""
        raw = encode(self.ckpt)
        self.assertEqual(encode(decode(raw)), raw)
        self.assertTrue(raw.startswith(b'EQNT'))

    def test_round_trip_values(self):
        """Test arrays, dtypes, quant params and config survive"""
        loaded = decode(encode(self.ckpt))
        self.assertEqual(loaded.names(), self.ckpt.names())
        self.assertEqual(loaded.config, self.ckpt.config)
        for name in self.ckpt.names():
            a, b = self.ckpt.get(name), loaded.get(name)
            self.assertEqual(a.dtype, b.dtype)
            np.testing.assert_array_equal(a.array, b.array)
            self.assertEqual(a.quant is None, b.quant is None)
            if a.quant is not None:
                np.testing.assert_array_equal(a.quant.scale, b.quant.scale)
                self.assertEqual((a.quant.bits, a.quant.signed, a.quant.granularity),
                                 (b.quant.bits, b.quant.signed, b.quant.granularity))

    def test_int4_packing(self):
        """Test nibble packing stores two values per byte"""
        values = np.array([-8, 7, -1, 0, 3], dtype=np.int8)
        raw = pack_int4(values)
        self.assertEqual(len(raw), 3)
        np.testing.assert_array_equal(unpack_int4(raw, 5), values)
        self.assertEqual(self.ckpt.get('layer0.wv.weight').data_nbytes, 8)

    def test_int4_range_checked(self):
        """Test values outside the 4-bit range are rejected"""
        with self.assertRaises(CheckpointError):
            Checkpoint().add('w', np.array([9]), 'i4')

    def test_bad_magic(self):
        """Test corrupted magic is rejected"""
        raw = bytearray(encode(self.ckpt))
        raw[0:4] = b'NOPE'
        with self.assertRaises(CheckpointError):
            decode(bytes(raw))

    def test_truncated(self):
        """Test every truncation point is rejected, never misread"""
        raw = encode(self.ckpt)
        for cut in (3, 10, 40, len(raw) // 2, len(raw) - 1):
            with self.subTest(cut=cut):
                with self.assertRaises(CheckpointError):
                    decode(raw[:cut])

    def test_trailing_bytes(self):
        """Test extra bytes after the config echo are rejected"""
        with self.assertRaises(CheckpointError):
            decode(encode(self.ckpt) + b'\x00')

    def test_bad_version(self):
        """Test an unsupported version is rejected"""
        raw = bytearray(encode(self.ckpt))
        raw[4] = 99
        with self.assertRaises(CheckpointError):
            decode(bytes(raw))

    def test_save_and_load(self):
        """Test durable write and read-back of a file"""
        path = os.path.join(self.test_dir, 'sub', 'model.eqnt')
        save_checkpoint(self.ckpt, path)
        self.assertFalse(os.path.exists(path + '.tmp'))
        self.assertEqual(encode(load_checkpoint(path)), encode(self.ckpt))

    def test_missing_file(self):
        """Test a missing file raises a checkpoint error"""
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.test_dir, 'absent.eqnt'))


if __name__ == '__main__':
    unittest.main()
