import pandas as pd
import pytest
from openpyxl import load_workbook

from dqos_lab.summary_report import SUMMARY_COLUMNS, write_summary_workbook


def summary_frame():
    return pd.DataFrame(
        {
            "band": ["k=1%", "k=2%"],
            "no_attack_latency_ms": [63.0, 63.0],
            "attack_latency_ms": [90.5, 120.25],
            "latency_ratio": [1.44, 1.91],
            "mean_drop_pct": [0.6, 1.4],
            "max_drop_pct": [1.2, 2.5],
            "windows_in_band_pct": [100.0, 95.0],
            "audit": ["Stealthy", "Detected(3,4,5,6)"],
        }
    )


def test_summary_workbook_layout(tmp_path):
    path = tmp_path / "attack_summary.xlsx"
    write_summary_workbook(summary_frame(), str(path))

    frame = pd.read_excel(path)
    assert list(frame.columns) == SUMMARY_COLUMNS
    assert frame.loc[1, "attack_latency_ms"] == 120.25

    wb = load_workbook(path)
    ws = wb.active
    assert ws.title == "attack_summary"
    assert ws.cell(row=1, column=1).font.bold
    assert ws.column_dimensions["H"].width == 25
    assert len(ws._charts) == 1
    assert ws._charts[0].title.tx.rich.p[0].r[0].t == "End-to-end latency under attack"


def test_summary_requires_all_columns(tmp_path):
    with pytest.raises(ValueError, match="latency_ratio"):
        write_summary_workbook(summary_frame().drop(columns=["latency_ratio"]), str(tmp_path / "x.xlsx"))
