import json

import numpy as np
import pytest

from utils.errors import ReportError
from utils.report_generator import ExperimentReport, ReportGenerator, load_report, validate_report


@pytest.fixture
def report():
    return ExperimentReport(
        spec={"mode": "predict"}, mode="predict", seed=3, coefficients_source="fixture.txt",
        predictions={"scaling": [{"h": 6144, "L": 40, "n": 1, "B": 1024, "m": 64, "s": 128,
                                  "speedup": np.float64(1.8)}]},
        timings=[{"preset": "T1", "kind": "topk", "encode_median": 1e-3, "decode_median": 2e-3,
                  "encode_samples": [1e-3], "decode_samples": [2e-3]}],
    )


def test_to_dict_is_plain_json(report):
    data = report.to_dict()
    assert data["schema_version"] == "1"
    assert data["provenance"]["seed"] == 3
    assert type(data["predictions"]["scaling"][0]["speedup"]) is float
    assert validate_report(data) == (True, [])


def test_json_is_deterministic(report):
    assert report.to_json() == report.to_json()
    assert list(json.loads(report.to_json())) == sorted(report.to_dict())


def test_schema_rejects_unknown_block(report):
    data = report.to_dict()
    data["extra"] = {}
    ok, errors = validate_report(data)
    assert not ok and errors


def test_write_and_load(tmp_path, report):
    path = tmp_path / "report.json"
    ReportGenerator().write(report, path)
    assert load_report(path.read_text())["provenance"]["coefficients_source"] == "fixture.txt"


def test_load_rejects_garbage():
    with pytest.raises(ReportError):
        load_report("{not json")
    with pytest.raises(ReportError):
        load_report(json.dumps({"schema_version": "1"}))


def test_write_refuses_invalid_report(tmp_path, report):
    report.bytes = {"records": [{"layer": -1}]}
    with pytest.raises(ReportError):
        ReportGenerator().write(report, tmp_path / "bad.json")
    assert not (tmp_path / "bad.json").exists()


def test_export_scaling_csv(report):
    csv = ReportGenerator().export_table(report, "scaling")
    header, row = csv.strip().splitlines()
    assert header == "h,L,n,B,m,s,speedup"
    assert row.startswith("6144,40,1,1024,64,128,1.8")


def test_export_drops_raw_samples(report):
    header = ReportGenerator().export_table(report, "timings").splitlines()[0]
    assert "samples" not in header


def test_export_unknown_table(report):
    with pytest.raises(ReportError):
        ReportGenerator().export_table(report, "gpu_hours")
    with pytest.raises(ReportError):
        ReportGenerator().export_table(report, "scaling", format_type="xlsx")


def test_summary_markdown(report):
    text = ReportGenerator().summary_markdown(report)
    assert text.startswith("# PREDICT REPORT")
    assert "| 6144 | 40 | 1 | 1024 | 64 | 1.800x |" in text
    assert "T1: encode" in text


def test_schema_rejects_unknown_prediction_field(report):
    data = report.to_dict()
    data["predictions"]["scaling"][0]["gpu_hours"] = 3.0
    ok, errors = validate_report(data)
    assert not ok and errors[0].startswith("predictions.scaling.0")


def test_schema_rejects_unknown_timing_field(report):
    data = report.to_dict()
    data["timings"][0]["watts"] = 250
    ok, errors = validate_report(data)
    assert not ok and errors[0].startswith("timings.0")


def test_schema_rejects_unknown_prediction_block(report):
    data = report.to_dict()
    data["predictions"]["memory"] = []
    assert not validate_report(data)[0]
