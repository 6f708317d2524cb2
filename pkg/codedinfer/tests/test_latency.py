
import numpy as np
import pytest

from codedinfer.core.errors import ParseError
from codedinfer.core.latency import (
    DownInterval,
    DropProbability,
    LatencyKind,
    LatencyModel,
    PermanentAt,
    Purpose,
    parse_failures,
    parse_latency,
    stream,
)


class TestParseLatency:
    def test_deterministic(self):
        link = parse_latency("det:10")
        assert link.kind is LatencyKind.DETERMINISTIC
        assert link.sample(np.random.default_rng(0)) == 10.0
        assert link.spec == "det:10"

    def test_uniform_bounds(self):
        link = parse_latency("uniform:5..50")
        rng = np.random.default_rng(1)
        draws = [link.sample(rng) for _ in range(200)]
        assert min(draws) >= 5.0 and max(draws) <= 50.0
        assert link.mean() == 27.5

    def test_lognormal_mean(self):
        link = parse_latency("lognorm:2,0.5")
        assert link.params == (2.0, 0.5)
        assert link.mean() == pytest.approx(np.exp(2.125))

    def test_empirical_relative_to_base_dir(self, tmp_path):
        (tmp_path / "samples.txt").write_text("1.5, 2.5\n3.5\n")
        link = parse_latency("emp:samples.txt", base_dir=tmp_path)
        assert link.samples == (1.5, 2.5, 3.5)
        assert link.sample(np.random.default_rng(0)) in link.samples
        assert link.mean() == pytest.approx(2.5)

    @pytest.mark.parametrize("spec", [
        "det", "det:", "det:-1", "det:abc", "uniform:5", "uniform:9..3",
        "lognorm:1", "lognorm:1,-0.5", "gamma:1,2", "emp:/no/such/file",
    ])
    def test_rejected_specs(self, spec):
        with pytest.raises(ParseError):
            parse_latency(spec)


class TestLatencyModel:
    def test_overrides_and_payload(self):
        model = LatencyModel(parse_latency("det:1"), ms_per_kib=0.5).with_overrides({3: "det:7"})
        rng = np.random.default_rng(0)
        assert model.sample(0, 2048, rng) == 2.0
        assert model.sample(3, 0, rng) == 7.0

    def test_negative_payload_term(self):
        with pytest.raises(ValueError):
            LatencyModel(parse_latency("det:1"), ms_per_kib=-1.0)


class TestStreams:
    def test_same_key_same_draws(self):
        a = stream(7, 2, 10, 1, Purpose.INPUT_LINK).random(5)
        b = stream(7, 2, 10, 1, Purpose.INPUT_LINK).random(5)
        np.testing.assert_array_equal(a, b)

    def test_keys_are_independent(self):
        base = stream(7, 2, 10, 1, Purpose.INPUT_LINK).random()
        assert stream(7, 3, 10, 1, Purpose.INPUT_LINK).random() != base
        assert stream(7, 2, 11, 1, Purpose.INPUT_LINK).random() != base
        assert stream(7, 2, 10, 1, Purpose.REPLY_LINK).random() != base
        assert stream(8, 2, 10, 1, Purpose.INPUT_LINK).random() != base


class TestFailures:
    def test_parse_all_kinds(self):
        model = parse_failures("3:perm@1000, 1:down@10-20,2:drop@0.25")
        assert model.schedules[3] == (PermanentAt(1000.0),)
        assert model.schedules[1] == (DownInterval(10.0, 20.0),)
        assert model.schedules[2] == (DropProbability(0.25),)
        assert model.devices == (1, 2, 3)

    def test_permanent_and_interval(self):
        model = parse_failures("3:perm@1000,1:down@10-20")
        assert not model.is_down(3, 999.9)
        assert model.is_down(3, 1000.0)
        assert model.is_down(1, 10.0)
        assert not model.is_down(1, 20.0)
        assert not model.is_down(0, 1e9)

    def test_drops_are_deterministic_per_request(self):
        model = parse_failures("2:drop@0.5", seed=4)
        first = [model.drops(2, r, 0) for r in range(100)]
        assert first == [model.drops(2, r, 0) for r in range(100)]
        assert 20 < sum(first) < 80
        assert not any(parse_failures("2:drop@0").drops(2, r, 0) for r in range(20))
        assert all(parse_failures("2:drop@1").drops(2, r, 0) for r in range(20))

    def test_empty_spec(self):
        assert parse_failures("").devices == ()

    @pytest.mark.parametrize("spec", ["3:perm", "x:perm@1", "1:down@20-10", "1:drop@1.5", "1:crash@5"])
    def test_rejected(self, spec):
        with pytest.raises(ParseError):
            parse_failures(spec)
