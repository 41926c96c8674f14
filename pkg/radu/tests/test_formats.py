import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from radu.exceptions import ContractError, FormatError
from radu.formats import (decode_rten, encode_rten, load_checkpoint, read_json, read_pfm, read_rten, save_checkpoint,
                          write_json, write_pfm, write_rten)
from radu.network import ModelParams, NetworkConfig
from radu.training import AdamState, adam_step


class RtenTests(SimpleTestCase):

    def test_layout(self):
        data = encode_rten(np.arange(6, dtype=np.float32).reshape(2, 3))
        self.assertEqual(data[:4], b'RTEN')
        self.assertEqual(data[4], 1)
        header_len = struct.unpack('<I', data[5:9])[0]
        self.assertIn(b'"shape":[2,3]', data[9:9 + header_len])
        self.assertEqual(len(data), 9 + header_len + 24)
        self.assertEqual(np.frombuffer(data[-4:], dtype='<f4')[0], 5.0)

    def test_dtype_preserved(self):
        array = np.random.default_rng(0).normal(size=(2, 3, 4))
        decoded = decode_rten(encode_rten(array))
        self.assertEqual(decoded.dtype, np.float64)
        assert_array_equal(decoded, array)
        self.assertEqual(decode_rten(encode_rten(array.astype(np.float32))).dtype, np.float32)

    def test_scalar(self):
        decoded = decode_rten(encode_rten(np.float64(2.5)))
        self.assertEqual(decoded.shape, ())
        self.assertEqual(float(decoded), 2.5)

    def test_bad_magic(self):
        data = b'RTEX' + encode_rten(np.ones(2))[4:]
        with self.assertRaises(FormatError) as ctx:
            decode_rten(data)
        self.assertEqual(ctx.exception.offset, 0)

    def test_bad_version(self):
        data = bytearray(encode_rten(np.ones(2)))
        data[4] = 2
        with self.assertRaises(FormatError) as ctx:
            decode_rten(bytes(data))
        self.assertEqual(ctx.exception.offset, 4)

    def test_truncated_payload(self):
        data = encode_rten(np.ones(4))
        with self.assertRaises(FormatError) as ctx:
            decode_rten(data[:-3])
        self.assertEqual(ctx.exception.offset, len(data) - 32)

    def test_truncated_header(self):
        with self.assertRaises(FormatError):
            decode_rten(b'RTE')
        with self.assertRaises(FormatError) as ctx:
            decode_rten(encode_rten(np.ones(2))[:12])
        self.assertEqual(ctx.exception.offset, 9)

    def test_file_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'nested' / 'a.rten'
            write_rten(path, np.eye(3))
            assert_array_equal(read_rten(path), np.eye(3))

    def test_error_names_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'broken.rten'
            path.write_bytes(b'nope-nope-nope')
            with self.assertRaises(FormatError) as ctx:
                read_rten(path)
        self.assertIn('broken.rten', str(ctx.exception))


class PfmTests(SimpleTestCase):

    def test_rows_stored_bottom_up(self):
        image = np.arange(6, dtype=np.float32).reshape(2, 3)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'map.pfm'
            write_pfm(path, image)
            data = path.read_bytes()
            restored = read_pfm(path)
        self.assertTrue(data.startswith(b'Pf\n3 2\n-1.0\n'))
        assert_array_equal(np.frombuffer(data[-12:], dtype='<f4'), [0.0, 1.0, 2.0])
        assert_array_equal(restored, image)

    def test_big_endian(self):
        image = np.array([[1.5, -2.0]], dtype=np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'be.pfm'
            path.write_bytes(b'Pf\n2 1\n1.0\n' + image.astype('>f4').tobytes())
            assert_array_equal(read_pfm(path), image)

    def test_colour_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'rgb.pfm'
            path.write_bytes(b'PF\n1 1\n-1.0\n' + bytes(12))
            with self.assertRaises(FormatError):
                read_pfm(path)

    def test_only_2d(self):
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(ContractError):
            write_pfm(Path(tmp) / 'x.pfm', np.zeros((2, 2, 2)))


class JsonTests(SimpleTestCase):

    def test_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'sub' / 'data.json'
            write_json(path, {'path': 'a/b', 'value': [1, 2]})
            self.assertIn('a/b', path.read_text(encoding='utf-8'))
            self.assertEqual(read_json(path), {'path': 'a/b', 'value': [1, 2]})


class CheckpointTests(SimpleTestCase):

    def test_params_and_adam_state(self):
        params = ModelParams.init(NetworkConfig.tiny(), seed=3)
        state = adam_step(params, AdamState(), 1e-3, {name: np.ones_like(t.data) for name, t in params.items()})
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(Path(tmp), params, state, extra={'epoch': 4})
            self.assertTrue((Path(tmp) / 'params' / 'radu.1.w2.rten').exists())
            loaded, loaded_state, manifest = load_checkpoint(Path(tmp))
        self.assertEqual(manifest['epoch'], 4)
        self.assertEqual(loaded.config, params.config)
        self.assertEqual(loaded_state.step, 1)
        for name, tensor in params.items():
            assert_array_equal(loaded[name].data, tensor.data)
            assert_array_equal(loaded_state.m[name], state.m[name])
            assert_array_equal(loaded_state.v[name], state.v[name])

    def test_without_adam_state(self):
        params = ModelParams.init(NetworkConfig.tiny(), seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(Path(tmp), params)
            _, state, manifest = load_checkpoint(Path(tmp))
        self.assertIsNone(state)
        self.assertIsNone(manifest['adam'])

    def test_missing_manifest(self):
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(FormatError):
            load_checkpoint(Path(tmp))

    def test_shape_mismatch(self):
        params = ModelParams.init(NetworkConfig.tiny(), seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(Path(tmp), params)
            write_rten(Path(tmp) / 'params' / 'radu.1.w2.rten', np.zeros((1, 1), dtype=np.float32))
            with self.assertRaises(FormatError):
                load_checkpoint(Path(tmp))
