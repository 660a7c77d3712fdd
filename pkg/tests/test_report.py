from __future__ import annotations

import pytest

from curriclm.curriculum import LossTrace, TracePoint
from curriclm.errors import ValidationError
from curriclm.metrics import EvalReport
from curriclm.report import emit_report, loss_curves_csv, loss_curves_svg, metrics_csv


def traces_fixture():
    return {
        "none": [LossTrace("target", [TracePoint(0, 3.0, 3.1), TracePoint(5, 2.5, 2.8)])],
        "ctl": [
            LossTrace("pseudo", [TracePoint(0, 3.0, 3.0), TracePoint(5, 2.0, 2.2)]),
            LossTrace("target", [TracePoint(5, 2.1, 2.3), TracePoint(10, 1.9, 2.1)]),
        ],
    }


def test_csv_row_count_matches_evaluations():
    body = loss_curves_csv(traces_fixture())
    rows = body.strip().splitlines()
    assert rows[0] == "curriculum,stage,step,train_loss,val_loss"
    assert len(rows) - 1 == 6  # total evaluations across traces


def test_svg_one_series_per_curriculum():
    body = loss_curves_svg(traces_fixture())
    assert body.count("<polyline") == 2
    assert ">none</text>" in body
    assert ">ctl</text>" in body


def test_metrics_table_has_combined_column():
    reports = {
        ("ctl", "small"): EvalReport(bleu=31.3, inform=93.6, success=90.4, counts=9),
        ("none", "small"): EvalReport(bleu=31.3, inform=93.4, success=90.4, counts=9),
    }
    body = metrics_csv(reports)
    header, *rows = body.strip().splitlines()
    assert header.split(",") == ["curriculum", "model_size", "bleu", "inform", "success", "combined"]
    assert any(row.startswith("ctl,small,") and row.endswith("123.3") for row in rows)


def test_emit_report_writes_files(tmp_path):
    written = emit_report(traces_fixture(), None, tmp_path)
    names = {p.name for p in written}
    assert names == {"loss_curves.csv", "loss_curves.svg"}
    again = emit_report(traces_fixture(), None, tmp_path)
    assert {p.read_text() for p in written} == {p.read_text() for p in again}


def test_emit_report_rejects_empty():
    with pytest.raises(ValidationError):
        emit_report({}, None, ".")
    with pytest.raises(ValidationError):
        emit_report({"x": [LossTrace("s", [])]}, None, ".")
    with pytest.raises(ValidationError):
        emit_report(traces_fixture(), None, ".", formats=("pdf",))
