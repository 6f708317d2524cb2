
import unittest
from pathlib import Path

import numpy as np
import pytest

from codedinfer.core.allocation import load_allocation, validate_allocation
from codedinfer.core.analytics import fit_lognormal, lognormal_cdf, lognormal_spec
from codedinfer.core.campaign import CampaignRow, check_order_statistic, parse_sweep, run_campaign
from codedinfer.core.errors import AllocationInvalid, OrderStatisticViolation, ParseError, UnsuitableMethod
from codedinfer.core.latency import LatencyModel, parse_latency
from codedinfer.core.model import init_weights, load_model
from codedinfer.core.planning import code_allocation, resize_stage, sweep_stage
from codedinfer.core.types import Policy, RequestRecord, RunReport, StageRecord

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"
ALLOCATIONS = FIXTURES / "allocations"


def load(name):
    alloc = load_allocation(ALLOCATIONS / name)
    model = load_model(alloc.model_path())
    return alloc, model


class TestCodeAllocation(unittest.TestCase):
    def test_codes_split_stage(self):
        alloc, model = load("fc_2dev.json")
        weights = init_weights(model)
        coded, store, costs = code_allocation(alloc, model, weights, code=True)
        stage = coded.stages[0]
        self.assertEqual(stage.coded_devices, (3,))
        self.assertEqual(stage.groups, ((0, 1),))
        self.assertEqual(coded.device_count, 4)
        self.assertEqual([c.hardware_cost for c in costs], [1.5])
        np.testing.assert_allclose(store.coded[(0, 0)], weights.weights[0][:4] + weights.weights[0][4:])
        self.assertEqual(weights.coded, {})
        validate_allocation(coded, model)

    def test_two_failure_tolerance(self):
        alloc, model = load("fc_2dev.json")
        coded, _, costs = code_allocation(alloc, model, init_weights(model), code=True, tolerance=2)
        self.assertEqual(coded.stages[0].coded_devices, (3, 4))
        self.assertEqual(costs[0].groups, 2)
        self.assertEqual(costs[0].hardware_cost, 2.0)

    def test_existing_groups_are_kept(self):
        alloc, model = load("tiny_coded.json")
        coded, store, costs = code_allocation(alloc, model, init_weights(model))
        self.assertEqual(coded, alloc)
        self.assertEqual(sorted(store.coded), [(0, 0), (2, 0)])
        self.assertEqual([c.stage for c in costs], [0, 1])

    def test_pass_through(self):
        alloc, model = load("fc_2dev.json")
        coded, store, costs = code_allocation(alloc, model, init_weights(model), code=True, stages={1})
        self.assertEqual(coded, alloc)
        self.assertEqual(costs, [])
        self.assertEqual(store.coded, {})

    def test_unsuitable_split(self):
        alloc, model = load("case1_spatial.json")
        with self.assertRaises(UnsuitableMethod) as ctx:
            code_allocation(alloc, model, init_weights(model), code=True)
        self.assertIn("conv_spatial", ctx.exception.row)


class TestResizeStage(unittest.TestCase):
    def setUp(self):
        self.alloc, self.model = load("campaign.json")

    def test_sweep_stage(self):
        self.assertEqual(sweep_stage(self.alloc), 1)

    def test_paired_allocations_share_ids(self):
        plain = resize_stage(self.alloc, 1, 4)
        coded = resize_stage(self.alloc, 1, 4, coded=1)
        self.assertEqual(plain.stages[1].devices, (1, 2, 5, 6))
        self.assertEqual(coded.stages[1].devices, (1, 2, 5, 6))
        self.assertEqual(coded.stages[1].coded_devices, (4,))
        self.assertEqual(coded.stages[1].groups, ((0, 1, 2, 3),))
        self.assertEqual((plain.name, coded.name), ("campaign-n4", "campaign-n4-coded"))
        validate_allocation(plain, self.model)
        validate_allocation(coded, self.model)

    def test_roster_keeps_links(self):
        resized = resize_stage(self.alloc, 1, 3, coded=1)
        self.assertEqual(resized.link_overrides(), {0: "det:5", 3: "det:5"})
        self.assertEqual(sorted(resized.required_devices), [0, 1, 2, 3, 4, 5])

    def test_shrinking(self):
        resized = resize_stage(self.alloc, 1, 2, coded=1)
        self.assertEqual(resized.stages[1].devices, (1, 2))

    def test_invalid_requests(self):
        with self.assertRaises(ValueError):
            resize_stage(self.alloc, 1, 1)
        with self.assertRaises(AllocationInvalid):
            resize_stage(self.alloc, 0, 3)
        with self.assertRaises(AllocationInvalid):
            resize_stage(self.alloc, 7, 3)


class TestParseSweep(unittest.TestCase):
    def test_forms(self):
        self.assertEqual(parse_sweep("2..5"), [2, 3, 4, 5])
        self.assertEqual(parse_sweep("devices=2..8"), list(range(2, 9)))
        self.assertEqual(parse_sweep("2,3, 6"), [2, 3, 6])

    def test_rejected(self):
        for text in ("1..4", "a..b", "", "devices=", "3..2"):
            with self.assertRaises(ParseError):
                parse_sweep(text)


def stage_report(policy, latencies, arrivals, completed):
    report = RunReport(allocation="x", policy=policy, seed=0)
    for i, (lat, arr, done) in enumerate(zip(latencies, arrivals, completed)):
        record = RequestRecord(i, "x", 0.0, lat, "ok")
        record.stages.append(StageRecord(stage=0, start_ms=0.0, arrivals=arr, completed_ms=done))
        report.requests.append(record)
    return report


class TestOrderStatistic(unittest.TestCase):
    def test_holds(self):
        asap = stage_report(Policy.DECODE_ASAP, [30.0], [{0: 10.0, 2: 30.0}], [30.0])
        wait = stage_report(Policy.WAIT_ALL, [50.0], [{0: 10.0, 1: 50.0}], [50.0])
        check_order_statistic(2, 0, asap, wait)

    def test_completion_not_at_nth_arrival(self):
        asap = stage_report(Policy.DECODE_ASAP, [40.0], [{0: 10.0, 2: 30.0}], [40.0])
        wait = stage_report(Policy.WAIT_ALL, [50.0], [{0: 10.0, 1: 50.0}], [50.0])
        with self.assertRaises(OrderStatisticViolation) as ctx:
            check_order_statistic(2, 0, asap, wait)
        self.assertEqual(ctx.exception.request_id, 0)

    def test_slower_than_wait_all(self):
        asap = stage_report(Policy.DECODE_ASAP, [60.0], [{0: 10.0, 2: 60.0}], [60.0])
        wait = stage_report(Policy.WAIT_ALL, [50.0], [{0: 10.0, 1: 50.0}], [50.0])
        with self.assertRaises(OrderStatisticViolation):
            check_order_statistic(2, 0, asap, wait)

    def test_improvement(self):
        row = CampaignRow(2, 10, 100.0, 75.0, None, None, 0)
        self.assertEqual(row.improvement_pct, 25.0)
        self.assertEqual(row.to_dict()["improvement_pct"], 25.0)


@pytest.mark.slow
class TestRunCampaign:
    @pytest.fixture(scope="class")
    def setup(self):
        alloc, model = load("campaign.json")
        weights = init_weights(model)
        x = np.random.default_rng(0).standard_normal(64).astype(np.float32)
        return alloc, model, weights, x

    def test_lognormal_stragglers(self, setup):
        alloc, model, weights, x = setup
        # median link delay 12.18 ms, 34% of links slower than 16.95 ms
        mu, sigma = fit_lognormal((12.18, 0.5), (16.95, 0.66))
        assert lognormal_cdf(16.95, mu, sigma) == pytest.approx(0.66)
        latency = LatencyModel(parse_latency(lognormal_spec(mu, sigma))).with_overrides(alloc.link_overrides())
        result = run_campaign(alloc, model, weights, x, latency, [2, 3, 4], seed=0, requests=200,
                              thresholds=[1000.0])
        assert [r.n for r in result.rows] == [2, 3, 4]
        improvements = result.improvements
        assert all(pct > 0 for pct in improvements)
        assert all(a <= b for a, b in zip(improvements, improvements[1:])), improvements
        assert all(r.timeouts == 0 for r in result.rows)
        assert [t.n for t in result.thresholds] == [2, 3, 4]
        assert all(t.timeouts == 0 for t in result.thresholds)

    def test_deterministic_links_gain_nothing(self, setup):
        alloc, model, weights, x = setup
        latency = LatencyModel(parse_latency("det:5"))
        result = run_campaign(alloc, model, weights, x, latency, [2, 3], requests=5)
        assert all(abs(pct) < 1e-9 for pct in result.improvements)
