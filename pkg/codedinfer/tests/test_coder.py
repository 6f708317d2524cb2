
import itertools
import unittest
from pathlib import Path

import numpy as np
import pytest

from codedinfer.core.coder import (
    DecodeStats,
    Undecodable,
    decodability,
    decode_single,
    default_groups,
    encode,
    hardware_cost,
    is_decodable,
    peel_decode,
)
from codedinfer.core.errors import (
    ExplosionGuard,
    NothingMissing,
    TooManyMissing,
    UnknownDevice,
    UnsuitableMethod,
)
from codedinfer.core.matrix import rel_error, tolerance
from codedinfer.core.model import init_weights, layer_forward, load_model
from codedinfer.core.splitter import execute_task, extract_device_task, merge, plan_split
from codedinfer.core.types import DType, SplitMethod
from codedinfer.core.weights import WeightStore

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"


def coded_run(coded, weights, x, lost, stats=None):
    """Run every base and coded task, drop the devices in ``lost`` and decode."""
    received = {}
    for device in range(coded.n):
        if device not in lost:
            received[device] = execute_task(extract_device_task(coded.base, weights, device), x)
    received_coded = {dev.index: execute_task(dev.task, x) for dev in coded.coded
                      if coded.n + dev.index not in lost}
    return peel_decode(coded, received, received_coded, stats=stats)


class TestDecodeSingle(unittest.TestCase):
    def test_subtracts_received_from_coded(self):
        coded = np.array([[10.0], [20.0]])
        received = {0: np.array([[1.0], [2.0]]), 1: np.array([[3.0], [4.0]])}
        np.testing.assert_array_equal(decode_single(coded, received, 2), [[6.0], [14.0]])

    def test_strips_row_padding(self):
        coded = np.array([[5.0], [7.0], [1.0]])
        out = decode_single(coded, {0: np.array([[2.0], [3.0], [1.0]])}, 1, out_shape=(2, 1))
        np.testing.assert_array_equal(out, [[3.0], [4.0]])

    def test_counts_operations(self):
        stats = DecodeStats()
        decode_single(np.ones((4, 1)), {0: np.zeros((4, 1)), 1: np.zeros((4, 1))}, 2, stats=stats)
        self.assertEqual(stats.subtractions, 4)
        self.assertEqual(stats.additions, 4)

    def test_too_many_missing(self):
        with self.assertRaises(TooManyMissing):
            decode_single(np.ones((2, 1)), {0: np.ones((2, 1))}, [1, 2])

    def test_nothing_missing(self):
        with self.assertRaises(NothingMissing):
            decode_single(np.ones((2, 1)), {0: np.ones((2, 1))}, [])


class TestPeeling(unittest.TestCase):
    def test_single_group(self):
        self.assertTrue(is_decodable(3, [[0, 1, 2]], [1]))
        self.assertTrue(is_decodable(3, [[0, 1, 2]], [3]))
        self.assertFalse(is_decodable(3, [[0, 1, 2]], [0, 1]))
        self.assertFalse(is_decodable(3, [[0, 1, 2]], [2, 3]))

    def test_two_overlapping_groups_peel(self):
        groups = [[0, 1, 2], [1, 2, 3]]
        self.assertTrue(is_decodable(4, groups, [0, 1]))
        self.assertTrue(is_decodable(4, groups, [0, 3]))
        self.assertFalse(is_decodable(4, groups, [1, 2]))

    def test_decodability_fractions(self):
        report = decodability(4, default_groups(4, 2), 2)
        self.assertEqual([r.total for r in report.rows], [1, 6, 15])
        self.assertEqual(report.fraction(0), 1.0)
        self.assertEqual(report.fraction(1), 1.0)
        self.assertAlmostEqual(report.fraction(2), 0.8)
        self.assertEqual(report.to_dict()["hardware_cost"], 1.5)

    def test_single_group_cannot_lose_two(self):
        report = decodability(4, default_groups(4, 1), 2)
        self.assertEqual(report.fraction(1), 1.0)
        self.assertEqual(report.fraction(2), 0.0)

    def test_explosion_guard(self):
        with self.assertRaises(ExplosionGuard) as ctx:
            decodability(40, [range(40)], 30, cap=1_000_000)
        self.assertEqual(ctx.exception.cap, 1_000_000)

    def test_explosion_guard_counts_all_failure_sizes(self):
        # C(15, 15) is a single pattern; all sizes together are 2^15
        with self.assertRaises(ExplosionGuard) as ctx:
            decodability(14, [range(14)], 15, cap=100)
        self.assertEqual(ctx.exception.patterns, 2 ** 15)

        report = decodability(3, [range(3)], 4, cap=16)
        self.assertEqual(sum(row.total for row in report.rows), 16)
        with self.assertRaises(ExplosionGuard):
            decodability(3, [range(3)], 4, cap=15)

    def test_failures_out_of_range(self):
        with self.assertRaises(ValueError):
            decodability(3, [[0, 1, 2]], 5)

    def test_group_members_must_be_base_devices(self):
        with self.assertRaises(UnknownDevice):
            decodability(3, [[0, 3]], 1)


def rank_decodable(n, groups, failed):
    """Every lost base block lies in the row space of what arrived (base rows e_i, coded rows 1_g)."""
    failed = set(failed)
    eye = np.eye(n)
    rows = [np.zeros(n)] + [eye[i] for i in range(n) if i not in failed]
    for g, members in enumerate(groups):
        if n + g not in failed:
            row = np.zeros(n)
            row[list(members)] = 1.0
            rows.append(row)
    arrived = np.array(rows)
    rank = np.linalg.matrix_rank(arrived)
    return all(np.linalg.matrix_rank(np.vstack([arrived, eye[j]])) == rank for j in failed if j < n)


ORACLE_CASES = [(n, default_groups(n, g)) for n in range(2, 7) for g in (1, 2)] + [
    (3, [[0, 1], [1, 2]]),
    (4, [[0, 1], [2, 3]]),
    (5, [[0, 1, 2, 3, 4], [3, 4]]),
]


@pytest.mark.parametrize("n,groups", ORACLE_CASES)
def test_decodability_agrees_with_rank_oracle(n, groups):
    total = n + len(groups)
    report = decodability(n, groups, total)
    for f, row in enumerate(report.rows):
        patterns = list(itertools.combinations(range(total), f))
        verdicts = [rank_decodable(n, groups, p) for p in patterns]
        for pattern, expected in zip(patterns, verdicts):
            assert is_decodable(n, groups, pattern) == expected, pattern
        assert row.total == len(patterns)
        assert row.recoverable == sum(verdicts)


def test_peel_decode_agrees_with_rank_oracle():
    model = load_model(FIXTURES / "models" / "fc.json")
    weights = init_weights(model, seed=5, dtype=DType.F64)
    layer = model.layers[0]
    groups = default_groups(4, 2)
    coded = encode(plan_split(layer, SplitMethod.FC_OUTPUT, 4), weights, groups)
    x = np.random.default_rng(5).standard_normal(16)
    expected = layer_forward(layer, weights, x)
    for f in range(3):
        for pattern in itertools.combinations(range(6), f):
            result = coded_run(coded, weights, x, lost=set(pattern))
            if rank_decodable(4, groups, pattern):
                assert not isinstance(result, Undecodable), pattern
                assert rel_error(merge(coded.base, result), expected) <= 1e-10
            else:
                assert isinstance(result, Undecodable), pattern


class TestCost(unittest.TestCase):
    def test_hardware_cost(self):
        self.assertEqual(hardware_cost(2), 1.5)
        self.assertEqual(hardware_cost(4, 2), 1.5)
        self.assertAlmostEqual(hardware_cost(8), 1.125)

    def test_default_groups(self):
        self.assertEqual(default_groups(3), [[0, 1, 2]])
        self.assertEqual(default_groups(4, 2), [[0, 1, 2], [1, 2, 3]])
        self.assertEqual(default_groups(2, 2), [[0, 1], [0, 1]])
        with self.assertRaises(ValueError):
            default_groups(4, 3)


class TestEncode(unittest.TestCase):
    def setUp(self):
        self.model = load_model(FIXTURES / "models" / "tiny.json")
        self.weights = init_weights(self.model, seed=7, dtype=DType.F64)

    def test_unsuitable_methods_rejected(self):
        conv = self.model.layers[0]
        for method in (SplitMethod.CONV_SPATIAL, SplitMethod.CONV_FILTER):
            with self.assertRaises(UnsuitableMethod) as ctx:
                encode(plan_split(conv, method, 2), self.weights)
            self.assertIn("suitable=no", ctx.exception.row)
        with self.assertRaises(UnsuitableMethod):
            encode(plan_split(self.model.layers[2], SplitMethod.FC_INPUT, 2), self.weights)

    def test_coded_block_is_sum_of_group(self):
        plan = plan_split(self.model.layers[2], SplitMethod.FC_OUTPUT, 2)
        coded = encode(plan, self.weights)
        w = self.weights.weights[2]
        np.testing.assert_allclose(coded.coded[0].weight, w[:4] + w[4:])
        self.assertEqual(coded.hardware_cost, 1.5)
        self.assertEqual(coded.recovery_map(), {0: [0], 1: [0]})

    def test_store_round_trip(self):
        plan = plan_split(self.model.layers[2], SplitMethod.FC_OUTPUT, 3)
        coded = encode(plan, self.weights)
        store = WeightStore(DType.F64, dict(self.weights.weights), dict(self.weights.biases))
        self.assertTrue(coded.matches_store(store))
        coded.store_into(store)
        self.assertIn((2, 0), store.coded)
        self.assertTrue(coded.matches_store(store))
        store.coded[(2, 0)] = store.coded[(2, 0)] + 1.0
        self.assertFalse(coded.matches_store(store))

    def test_two_missing_in_one_group_is_undecodable(self):
        layer = self.model.layers[2]
        coded = encode(plan_split(layer, SplitMethod.FC_OUTPUT, 3), self.weights)
        x = np.random.default_rng(0).standard_normal(36)
        result = coded_run(coded, self.weights, x, lost={0, 1})
        self.assertIsInstance(result, Undecodable)
        self.assertEqual(result.missing, (0, 1))


CHANNEL_MODEL = {
    "name": "channels",
    "layers": [
        {"id": 0, "kind": "conv", "input": [6, 6, 3], "filters": 8, "size": 3, "padding": 1,
         "activation": "relu"},
        {"id": 1, "kind": "pool", "window": 2, "mode": "max"},
    ],
}


def assert_single_loss_decodes(coded, weights, x, expected, lost, dtype):
    stats = DecodeStats()
    partials = coded_run(coded, weights, x, lost={lost}, stats=stats)
    assert not isinstance(partials, Undecodable)
    actual = merge(coded.base, partials)
    tol = tolerance(dtype.numpy)
    assert rel_error(actual, expected) <= tol
    # one subtraction per element of the coded block, nothing when only the coded device is lost
    coded_size = execute_task(coded.coded[0].task, x).size
    assert stats.subtractions == (coded_size if lost < coded.n else 0)


@pytest.mark.parametrize("dtype", [DType.F32, DType.F64])
@pytest.mark.parametrize("n", range(2, 9))
def test_fc_output_decode_for_every_lost_device(n, dtype):
    model = load_model(FIXTURES / "models" / "fc.json")
    weights = init_weights(model, seed=n, dtype=dtype)
    layer = model.layers[0]
    coded = encode(plan_split(layer, SplitMethod.FC_OUTPUT, n), weights)
    x = np.random.default_rng(n).standard_normal(16).astype(dtype.numpy)
    expected = layer_forward(layer, weights, x)
    for lost in range(n + 1):
        assert_single_loss_decodes(coded, weights, x, expected, lost, dtype)


@pytest.mark.parametrize("dtype", [DType.F32, DType.F64])
@pytest.mark.parametrize("n", range(2, 9))
def test_conv_channel_decode_with_fused_pooling(n, dtype):
    model = load_model(CHANNEL_MODEL)
    weights = init_weights(model, seed=11, dtype=dtype)
    conv, pool = model.layers[0], model.layers[1]
    coded = encode(plan_split(conv, SplitMethod.CONV_CHANNEL, n, post=[pool]), weights)
    x = np.random.default_rng(n).standard_normal(conv.input_shape).astype(dtype.numpy)
    expected = layer_forward(pool, weights, layer_forward(conv, weights, x))
    for lost in range(n + 1):
        assert_single_loss_decodes(coded, weights, x, expected, lost, dtype)


def test_two_groups_recover_two_failures():
    model = load_model(FIXTURES / "models" / "fc.json")
    weights = init_weights(model, seed=0, dtype=DType.F64)
    layer = model.layers[0]
    coded = encode(plan_split(layer, SplitMethod.FC_OUTPUT, 4), weights, default_groups(4, 2))
    x = np.linspace(-2, 2, 16)
    partials = coded_run(coded, weights, x, lost={0, 3})
    np.testing.assert_allclose(merge(coded.base, partials), layer_forward(layer, weights, x),
                               rtol=1e-9, atol=1e-12)
