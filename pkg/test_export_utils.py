"""Tests for report exporters and run manifests."""

import io
import json
import os
import sys

import pandas as pd
import pytest

from utils.errors import ExportError
from utils.export_utils import (
    export_frame_pdf,
    export_to_csv,
    export_to_excel,
    export_to_json,
    export_to_pdf_report,
    format_report_table,
    get_export_summary,
    plot_crop_sweep,
    report_pivot,
    sha256_file,
    triplets_to_jsonl,
    write_run_manifest,
)
from utils.retrieval_eval import RetrievalReport


@pytest.fixture
def report():
    rows = [
        {"task": "object_composition", "k": 1, "recall": 0.25, "queries": 8},
        {"task": "object_composition", "k": 5, "recall": 0.5, "queries": 8},
        {"task": "domain_conversion", "k": 1, "recall": 0.75, "queries": 4},
        {"task": "domain_conversion", "k": 5, "recall": 1.0, "queries": 4},
        {"task": "average", "k": 1, "recall": 0.5, "queries": 12},
        {"task": "average", "k": 5, "recall": 0.75, "queries": 12},
    ]
    return RetrievalReport(rows, {"seed": 3, "config_hash": "abc"})


def test_pivot_orders_average_last(report):
    pivot = report_pivot(report)
    assert list(pivot.index) == ["object_composition", "domain_conversion", "average"]
    assert list(pivot.columns) == ["R@1", "R@5"]


def test_json_payload(report):
    payload, filename = export_to_json(report, "run1")
    assert filename == "retrieval_run1.json"
    parsed = json.loads(payload)
    assert parsed["rows"] == report.rows
    assert parsed["metadata"]["seed"] == 3


def test_csv(report):
    payload, filename = export_to_csv(report)
    assert filename == "retrieval_report.csv"
    frame = pd.read_csv(io.StringIO(payload))
    assert list(frame.columns) == ["task", "k", "recall", "queries"]
    assert len(frame) == 6


def test_excel_sheets(report):
    payload, _ = export_to_excel(report)
    sheets = pd.read_excel(io.BytesIO(payload), sheet_name=None, engine="openpyxl")
    assert set(sheets) == {"Recall", "Rows", "Run Info"}
    assert sheets["Recall"]["R@1"].tolist() == [0.25, 0.75, 0.5]


def test_pdf_is_deterministic(report):
    a, filename = export_to_pdf_report(report)
    b, _ = export_to_pdf_report(report)
    assert a.startswith(b"%PDF")
    assert filename.endswith(".pdf")
    assert a == b


def test_empty_report_rejected():
    with pytest.raises(ExportError):
        export_to_csv(RetrievalReport([]))
    with pytest.raises(ExportError):
        export_frame_pdf(pd.DataFrame())


def test_text_table(report):
    table = format_report_table(report)
    assert "R@1" in table and "0.2500" in table and "average" in table


def test_triplets_jsonl():
    rows = [{"reference_id": "a", "provenance": "self_crop", "caption_tokens": [1, 2], "target_id": "a"}]
    text = triplets_to_jsonl(rows)
    assert text.endswith("\n") and text.count("\n") == 1
    assert json.loads(text)["caption_tokens"] == [1, 2]
    assert triplets_to_jsonl([]) == ""


def test_sweep_plot(tmp_path):
    frame = pd.DataFrame({"crop_range": ["16-32", "32-64"], "R@1": [0.1, 0.2], "R@5": [0.3, 0.4]})
    path = plot_crop_sweep(frame, str(tmp_path / "sweep.png"), ks=(1, 5))
    with open(path, "rb") as f:
        assert f.read(8) == b"\x89PNG\r\n\x1a\n"


def test_run_manifest_hashes(tmp_path):
    artifact = tmp_path / "a.txt"
    artifact.write_text("hello", encoding="utf-8")
    path = write_run_manifest(str(tmp_path), "train", {"seed": 1}, "h", [str(artifact)])
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["artifacts"] == {"a.txt": sha256_file(str(artifact))}
    assert manifest["artifacts"]["a.txt"] == "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
    assert os.path.basename(path) == "run_manifest.json"


def test_export_summary(report):
    summary = get_export_summary(report)
    assert summary["Tasks"] == 2
    assert summary["Queries"] == 12
    assert summary["Best R@1"].startswith("domain_conversion")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
