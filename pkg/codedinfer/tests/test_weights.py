
import unittest
from pathlib import Path

import numpy as np
import pytest

from codedinfer.core.errors import ChecksumError, FormatVersionError, IoError, ShapeMismatch
from codedinfer.core.model import init_weights, load_model
from codedinfer.core.types import DType
from codedinfer.core.weights import (
    BIAS_FLAG,
    CODED_FLAG,
    WeightStore,
    coded_record_id,
    dumps_weights,
    load_weights,
    loads_weights,
    save_weights,
)

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"


def sample_store(dtype=DType.F32):
    model = load_model(FIXTURES / "models" / "tiny.json")
    store = init_weights(model, seed=9, dtype=dtype)
    store.coded[(2, 0)] = np.ones((4, 36), dtype=dtype.numpy)
    store.coded_biases[(2, 0)] = np.full(4, 0.25, dtype=dtype.numpy)
    return store


class TestWeightStoreFormat(unittest.TestCase):
    def test_round_trip_is_bit_exact(self):
        for dtype in DType:
            store = sample_store(dtype)
            loaded = loads_weights(dumps_weights(store))
            self.assertIs(loaded.dtype, dtype)
            self.assertTrue(loaded.equals(store))
            np.testing.assert_array_equal(loaded.coded[(2, 0)], store.coded[(2, 0)])

    def test_empty_store_keeps_element_width(self):
        for dtype in DType:
            data = dumps_weights(WeightStore(dtype))
            self.assertEqual(data[:4], b"CDCW")
            loaded = loads_weights(data)
            self.assertEqual(list(loaded.records()), [])
            self.assertIs(loaded.dtype, dtype)
            self.assertTrue(loaded.equals(WeightStore(dtype)))

    def test_header_width_must_match_records(self):
        data = bytearray(dumps_weights(sample_store(DType.F32)))
        self.assertEqual(data[6], DType.F32.code)
        data[6] = DType.F64.code
        with self.assertRaises(FormatVersionError):
            loads_weights(bytes(data))
        data[6] = 7
        with self.assertRaises(FormatVersionError):
            loads_weights(bytes(data))

    def test_mixed_widths_not_written(self):
        store = sample_store(DType.F32)
        store.coded[(2, 0)] = store.coded[(2, 0)].astype(np.float64)
        with self.assertRaises(FormatVersionError):
            dumps_weights(store)

    def test_truncation_detected(self):
        data = dumps_weights(sample_store())
        for cut in (3, 11, len(data) // 2, len(data) - 1):
            with self.assertRaises(ChecksumError):
                loads_weights(data[:cut])

    def test_flipped_payload_byte_detected(self):
        data = bytearray(dumps_weights(sample_store()))
        data[40] ^= 0x01
        with self.assertRaises(ChecksumError):
            loads_weights(bytes(data))

    def test_trailing_bytes_rejected(self):
        with self.assertRaises(ChecksumError):
            loads_weights(dumps_weights(sample_store()) + b"\x00")

    def test_bad_magic_and_version(self):
        data = dumps_weights(sample_store())
        with self.assertRaises(FormatVersionError):
            loads_weights(b"XXXX" + data[4:])
        with self.assertRaises(FormatVersionError):
            loads_weights(data[:4] + b"\x09\x00" + data[6:])

    def test_record_ids(self):
        self.assertEqual(coded_record_id(3, 1), CODED_FLAG | (3 << 8) | 1)
        ids = [record_id for record_id, _ in sample_store().records()]
        self.assertEqual(ids, sorted(ids))
        self.assertIn(BIAS_FLAG | 0, ids)
        with self.assertRaises(ValueError):
            coded_record_id(1, 256)


class TestWeightStoreFiles:
    def test_save_and_load(self, tmp_path):
        store = sample_store(DType.F64)
        path = tmp_path / "nested" / "tiny.cdcw"
        save_weights(store, path)
        assert load_weights(path).equals(store)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_weights(tmp_path / "absent.cdcw")

    def test_directory_is_not_writable_as_file(self, tmp_path):
        with pytest.raises(IoError):
            save_weights(WeightStore(), tmp_path)


class TestWeightStoreValidation(unittest.TestCase):
    def test_wrong_shape_names_layer(self):
        model = load_model(FIXTURES / "models" / "tiny.json")
        store = init_weights(model)
        store.weights[2] = np.zeros((8, 35), dtype=np.float32)
        with self.assertRaises(ShapeMismatch) as ctx:
            store.validate(model)
        self.assertEqual(ctx.exception.layer_id, 2)

    def test_missing_layer(self):
        model = load_model(FIXTURES / "models" / "tiny.json")
        store = init_weights(model)
        del store.weights[3]
        with self.assertRaises(ShapeMismatch):
            store.validate(model)

    def test_astype_changes_width(self):
        store = sample_store(DType.F32).astype(DType.F64)
        self.assertIs(store.dtype, DType.F64)
        self.assertTrue(all(a.dtype == np.float64 for _, a in store.records()))
