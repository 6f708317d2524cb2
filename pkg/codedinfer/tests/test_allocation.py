
import unittest
from pathlib import Path

from codedinfer.core.allocation import (
    allocation_from_dict,
    fallback_select,
    load_allocation,
    load_catalog,
    save_allocation,
    validate_allocation,
)
from codedinfer.core.errors import AllocationInvalid, NoFeasibleAllocation, ParseError
from codedinfer.core.model import load_model
from codedinfer.core.types import SplitMethod

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"
ALLOCATIONS = FIXTURES / "allocations"


def tiny_doc(**stage_overrides):
    stages = [
        {"layers": [0, 1], "method": "conv_channel", "devices": [0, 1]},
        {"layers": [2], "method": "fc_output", "devices": [2, 3]},
        {"layers": [3], "method": "whole", "devices": [4]},
    ]
    for index, patch in stage_overrides.items():
        stages[int(index[1:])].update(patch)
    return {
        "name": "tiny-test",
        "model": "../models/tiny.json",
        "stages": stages,
        "roster": [{"id": i} for i in range(8)],
    }


class TestLoadAllocation(unittest.TestCase):
    def setUp(self):
        self.model = load_model(FIXTURES / "models" / "tiny.json")

    def test_fixture(self):
        alloc = load_allocation(ALLOCATIONS / "case2_coded.json")
        self.assertEqual(alloc.name, "case2-coded")
        self.assertEqual(alloc.device_count, 6)
        stage = alloc.stages[1]
        self.assertEqual(stage.method, SplitMethod.FC_OUTPUT)
        self.assertEqual(stage.groups, ((0, 1),))
        self.assertEqual(stage.coded_devices, (5,))
        self.assertEqual(alloc.model_path().resolve(), (FIXTURES / "models" / "case1.json").resolve())
        validate_allocation(alloc, load_model(alloc.model_path()))

    def test_save_round_trip(self):
        import tempfile

        alloc = load_allocation(ALLOCATIONS / "tiny_coded.json")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "copy.json"
            save_allocation(alloc, path)
            self.assertEqual(load_allocation(path), alloc)

    def test_malformed(self):
        with self.assertRaises(ParseError):
            allocation_from_dict({"model": "m.json", "stages": [], "roster": [{"id": 0}]})
        with self.assertRaises(ParseError):
            allocation_from_dict(tiny_doc(s0={"method": "diagonal"}))
        with self.assertRaises(ParseError):
            load_allocation(ALLOCATIONS / "absent.json")

    def test_valid_document(self):
        validate_allocation(allocation_from_dict(tiny_doc()), self.model)

    def test_layers_must_be_covered_in_order(self):
        doc = tiny_doc(s2={"layers": [3, 4]})
        with self.assertRaises(AllocationInvalid):
            validate_allocation(allocation_from_dict(doc), self.model)
        doc = tiny_doc(s1={"layers": [3]}, s2={"layers": [2]})
        with self.assertRaises(AllocationInvalid):
            validate_allocation(allocation_from_dict(doc), self.model)

    def test_whole_stage_runs_on_one_device(self):
        with self.assertRaises(AllocationInvalid):
            validate_allocation(allocation_from_dict(tiny_doc(s2={"devices": [4, 5]})), self.model)

    def test_unknown_roster_device(self):
        with self.assertRaises(AllocationInvalid):
            validate_allocation(allocation_from_dict(tiny_doc(s2={"devices": [9]})), self.model)

    def test_method_must_match_layer(self):
        with self.assertRaises(AllocationInvalid):
            validate_allocation(allocation_from_dict(tiny_doc(s1={"method": "conv_channel"})), self.model)

    def test_too_many_devices(self):
        doc = tiny_doc(s0={"devices": [0, 1, 5, 6, 7]})
        with self.assertRaises(AllocationInvalid):
            validate_allocation(allocation_from_dict(doc), self.model)

    def test_coding_needs_suitable_method(self):
        doc = tiny_doc(s0={"method": "conv_spatial", "coded": {"groups": [[0, 1]], "devices": [5]}})
        with self.assertRaises(AllocationInvalid) as ctx:
            validate_allocation(allocation_from_dict(doc), self.model)
        self.assertIn("suitable=no", str(ctx.exception))

    def test_group_indexes_stage_devices(self):
        doc = tiny_doc(s1={"coded": {"groups": [[0, 2]], "devices": [5]}})
        with self.assertRaises(AllocationInvalid):
            validate_allocation(allocation_from_dict(doc), self.model)

    def test_one_coded_device_per_group(self):
        doc = tiny_doc(s1={"coded": {"groups": [[0, 1]], "devices": [5, 6]}})
        with self.assertRaises(AllocationInvalid):
            validate_allocation(allocation_from_dict(doc), self.model)


class TestFallback(unittest.TestCase):
    def setUp(self):
        self.catalog = load_catalog([ALLOCATIONS / "case1_4dev.json", ALLOCATIONS / "case1_5dev.json"])

    def test_catalog_sorted_by_device_count(self):
        self.assertEqual([a.device_count for a in self.catalog], [5, 4])

    def test_all_alive_keeps_largest(self):
        self.assertEqual(fallback_select(self.catalog, range(5)).name, self.catalog[0].name)

    def test_lost_device_selects_smaller(self):
        chosen = fallback_select(self.catalog, {0, 1, 2, 4})
        self.assertEqual(chosen.device_count, 4)

    def test_nothing_fits(self):
        with self.assertRaises(NoFeasibleAllocation):
            fallback_select(self.catalog, {0, 2, 4})
