"""Delimited outputs and figure files."""

import numpy as np
import pytest

from nodulemap.errors import FormatError
from nodulemap.reports import (ablation_bar_figure, composite_figure,
                               format_value, read_jsonl, training_curve_figure,
                               write_jsonl, write_kv)
from nodulemap.training import RunRecord


def test_jsonl_roundtrip(tmp_path):
    rows = [{"b": 2, "a": 1.5}, {"cell": "x", "accuracy": 0.953}]
    path = tmp_path / "rows.jsonl"
    write_jsonl(path, rows)
    assert read_jsonl(path) == rows
    lines = path.read_text().splitlines()
    assert lines[0] == '{"a": 1.5, "b": 2}'  # keys sorted for stable diffs


def test_jsonl_reports_bad_line_number(tmp_path):
    path = tmp_path / "rows.jsonl"
    path.write_text('{"a": 1}\nnot json\n')
    with pytest.raises(FormatError, match="2"):
        read_jsonl(path)


def test_format_value_and_kv(tmp_path):
    assert format_value(0.95321111) == "0.953211"
    assert format_value(3) == "3"
    assert format_value("x") == "x"
    path = tmp_path / "m.kv"
    write_kv(path, {"accuracy": 0.5, "count": 4})
    assert path.read_text() == "accuracy=0.5\ncount=4\n"


def test_figures_write_png_files(tmp_path):
    records = [
        RunRecord(epoch=1, lr=5e-4, train_loss=0.7, train_acc=0.5,
                  test_loss=0.72, test_acc=0.5),
        RunRecord(epoch=2, lr=5e-4, train_loss=0.5, train_acc=0.7,
                  test_loss=0.55, test_acc=0.65),
    ]
    curve = tmp_path / "sub" / "curves.png"
    training_curve_figure(records, curve)
    assert curve.exists() and curve.stat().st_size > 0
    # dict records (as read back from jsonl) work the same way
    training_curve_figure([r.to_dict() for r in records], tmp_path / "c2.png")
    assert (tmp_path / "c2.png").exists()

    rows = [
        {"cell": "a", "seed": 0, "accuracy": 0.9},
        {"cell": "a", "seed": 1, "accuracy": 0.92},
        {"cell": "b", "seed": 0, "accuracy": 0.85},
    ]
    bars = tmp_path / "bars.png"
    ablation_bar_figure(rows, bars)
    assert bars.exists() and bars.stat().st_size > 0

    panel = tmp_path / "panel.png"
    composite_figure(np.random.default_rng(0).uniform(0, 1, (32, 65)), panel,
                     title="sample 0")
    assert panel.exists() and panel.stat().st_size > 0
