"""
Export utilities for CSV and JSON reports.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Union

from codedinfer.core.analytics import CoverageReport, LatencyHistogram
from codedinfer.core.coder import DecodabilityReport
from codedinfer.core.errors import IoError, ParseError
from codedinfer.core.types import FallbackEvent, Policy, RequestRecord, RunReport, StageRecord

FORMATS = ("csv", "json")

LATENCY_HEADER = (
    "request_id", "allocation", "status", "start_ms", "end_ms", "latency_ms",
    "decode_events", "late_partials",
)


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    if value is None:
        return ""
    return str(value)


def _table(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def _rows_table(rows: Sequence[Mapping[str, Any]]) -> str:
    if not rows:
        raise ValueError("cannot export an empty table")
    header = list(rows[0])
    return _table(header, ([row.get(k) for k in header] for row in rows))


def latency_rows(report: RunReport) -> List[List[Any]]:
    return [
        [r.request_id, r.allocation, r.status, r.start_ms, r.end_ms, r.latency_ms,
         r.decode_events, sum(len(s.late) for s in r.stages)]
        for r in report.requests
    ]


def to_csv(report: Any) -> str:
    """CSV body for any report type the package produces."""
    if isinstance(report, LatencyHistogram):
        return _table(("bin_start", "bin_end", "count"), report.bins)
    if isinstance(report, RunReport):
        return _table(LATENCY_HEADER, latency_rows(report))
    if isinstance(report, CoverageReport):
        report = [report]
    if isinstance(report, DecodabilityReport):
        return _rows_table([r.to_dict() for r in report.rows])
    if isinstance(report, (list, tuple)):
        rows = [r.to_dict() if hasattr(r, "to_dict") else r for r in report]
        if rows and "assignment" in rows[0]:
            rows = [{k: v for k, v in r.items() if k not in ("assignment", "definition")} for r in rows]
        return _rows_table(rows)
    raise ValueError(f"cannot export {type(report).__name__} as csv")


def to_json(report: Any) -> str:
    if isinstance(report, (list, tuple)):
        document: Any = [r.to_dict() if hasattr(r, "to_dict") else r for r in report]
    elif hasattr(report, "to_dict"):
        document = report.to_dict()
    else:
        document = report
    return json.dumps(document, indent=2) + "\n"


def emit_report(report: Any, format: str, path: Union[str, Path]):
    """
    Write a report as CSV or JSON.

    Args:
        report: LatencyHistogram, RunReport, CoverageReport, DecodabilityReport,
            or a list of such reports / plain row dicts
        format: "csv" or "json"
        path: output file

    Raises:
        IoError: empty or unwritable path
    """
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {format!r}")
    if path is None or str(path).strip() == "":
        raise IoError("output path is empty")
    body = to_csv(report) if format == "csv" else to_json(report)

    output_path = Path(path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", newline="") as f:
            f.write(body)
    except OSError as e:
        raise IoError(f"cannot write {output_path}: {e}")


# --- Reading saved run reports back ---

def _stage_record(d: Dict[str, Any]) -> StageRecord:
    return StageRecord(
        stage=d["stage"],
        start_ms=d["start_ms"],
        arrivals={int(k): v for k, v in d.get("arrivals", {}).items()},
        completed_ms=d.get("completed_ms"),
        decoded=list(d.get("decoded", [])),
        late=list(d.get("late", [])),
        missing=list(d.get("missing", [])),
        subtractions=d.get("subtractions", 0),
    )


def run_report_from_dict(document: Dict[str, Any]) -> RunReport:
    try:
        report = RunReport(
            allocation=document["allocation"],
            policy=Policy(document["policy"]),
            seed=document["seed"],
            failures_observed=list(document.get("failures_observed", [])),
        )
        for r in document.get("requests", []):
            report.requests.append(RequestRecord(
                request_id=r["request_id"],
                allocation=r["allocation"],
                start_ms=r["start_ms"],
                end_ms=r["end_ms"],
                status=r["status"],
                stages=[_stage_record(s) for s in r.get("stages", [])],
                max_rel_error=r.get("max_rel_error"),
                output_ok=r.get("output_ok"),
            ))
        for f in document.get("fallbacks", []):
            report.fallbacks.append(FallbackEvent(f["at_ms"], f["request_id"], f["from"], f["to"],
                                                  list(f["suspected"])))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"not a run report: {e}")
    return report


def load_run_report(path: Union[str, Path]) -> RunReport:
    """
    Raises:
        ParseError
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read report {path}: {e}")
    except json.JSONDecodeError as e:
        raise ParseError(f"report {path} is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ParseError(f"report {path} must be a JSON object")
    return run_report_from_dict(document)
