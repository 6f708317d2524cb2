
import json
from pathlib import Path

import numpy as np
import pytest

from codedinfer.core.allocation import load_allocation
from codedinfer.core.analytics import CoverageScheme, compare_coverage, histogram, topology
from codedinfer.core.coder import decodability
from codedinfer.core.errors import IoError, ParseError
from codedinfer.core.export import LATENCY_HEADER, emit_report, load_run_report, to_csv, to_json
from codedinfer.core.latency import LatencyModel, parse_failures, parse_latency
from codedinfer.core.model import init_weights, load_model
from codedinfer.core.runtime import run_inference

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"


@pytest.fixture(scope="module")
def run_report():
    alloc = load_allocation(FIXTURES / "allocations" / "tiny_coded.json")
    model = load_model(alloc.model_path())
    weights = init_weights(model)
    x = np.ones(model.input_shape, dtype=np.float32)
    return run_inference(alloc, weights, x, LatencyModel(parse_latency("uniform:1..20")),
                         parse_failures("5:perm@0"), requests=5, model=model)


def test_latency_csv(run_report):
    lines = to_csv(run_report).splitlines()
    assert lines[0] == ",".join(LATENCY_HEADER)
    assert len(lines) == 6
    first = lines[1].split(",")
    assert first[0] == "0"
    assert first[1] == "tiny-coded"
    assert first[2] == "ok"


def test_histogram_csv():
    body = to_csv(histogram([1.0, 12.0], 10.0))
    assert body == "bin_start,bin_end,count\n0,10,1\n10,20,1\n"


def test_coverage_csv_drops_assignment():
    reports = compare_coverage(topology((2, True), 1), 1)
    lines = to_csv(list(reports.values())).splitlines()
    assert lines[0] == "scheme,budget,covered,total,fraction,extra_devices,hardware_cost"
    assert lines[2].startswith("cdc+2mr,1,2,3,")
    single = to_csv(reports[CoverageScheme.TWO_MR]).splitlines()
    assert single[1].startswith("2mr,1,1,3,")


def test_decodability_csv():
    lines = to_csv(decodability(3, [[0, 1, 2]], 1)).splitlines()
    assert lines == ["failures,total,recoverable,fraction", "0,1,1,1", "1,4,4,1"]


def test_unknown_type():
    with pytest.raises(ValueError):
        to_csv(object())
    with pytest.raises(ValueError):
        to_csv([])


def test_json_report_round_trip(run_report, tmp_path):
    path = tmp_path / "report.json"
    emit_report(run_report, "json", path)
    text = path.read_text()
    assert text.endswith("\n")
    assert json.loads(text)["aggregate"]["count"] == 5
    assert load_run_report(path).to_dict() == run_report.to_dict()


def test_to_json_list():
    doc = json.loads(to_json([{"a": 1}, {"a": 2}]))
    assert doc == [{"a": 1}, {"a": 2}]


def test_emit_creates_directories(tmp_path):
    path = tmp_path / "nested" / "hist.csv"
    emit_report(histogram([3.0], 1.0), "csv", path)
    assert path.read_text().startswith("bin_start")


def test_emit_rejects_bad_arguments(tmp_path):
    with pytest.raises(IoError):
        emit_report(histogram([3.0], 1.0), "csv", "")
    with pytest.raises(ValueError):
        emit_report(histogram([3.0], 1.0), "xml", tmp_path / "x")
    with pytest.raises(IoError):
        emit_report(histogram([3.0], 1.0), "csv", tmp_path)


def test_load_rejects_non_reports(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ParseError):
        load_run_report(bad)
    bad.write_text('{"allocation": "a"}')
    with pytest.raises(ParseError):
        load_run_report(bad)
    with pytest.raises(ParseError):
        load_run_report(tmp_path / "absent.json")
