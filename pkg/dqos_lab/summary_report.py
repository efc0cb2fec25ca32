import logging

import pandas as pd
from openpyxl import load_workbook
from openpyxl.chart import BarChart, Reference
from openpyxl.styles import Font
from openpyxl.utils import get_column_letter

from dqos_lab.columnar_io import write_excel_safely

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "band",
    "no_attack_latency_ms",
    "attack_latency_ms",
    "latency_ratio",
    "mean_drop_pct",
    "max_drop_pct",
    "windows_in_band_pct",
    "audit",
]


def format_summary_workbook(path: str, sheet_title: str = "End-to-end latency under attack") -> None:
    """Bold headers, fixed widths and a no-attack vs under-attack latency chart."""
    wb = load_workbook(path)
    ws = wb.active

    for col in range(1, ws.max_column + 1):
        ws.cell(row=1, column=col).font = Font(bold=True)
        ws.column_dimensions[get_column_letter(col)].width = 25

    chart = BarChart()
    chart.title = sheet_title
    chart.x_axis.title = "Band"
    chart.y_axis.title = "Mean video latency (ms)"
    data = Reference(ws, min_col=2, max_col=3, min_row=1, max_row=ws.max_row)
    categories = Reference(ws, min_col=1, min_row=2, max_row=ws.max_row)
    chart.add_data(data, titles_from_data=True)
    chart.set_categories(categories)
    ws.add_chart(chart, f"A{ws.max_row + 3}")

    wb.save(path)


def write_summary_workbook(summary: pd.DataFrame, path: str) -> str:
    """Write the per-band attack summary to an .xlsx file and format it."""
    missing = [c for c in SUMMARY_COLUMNS if c not in summary.columns]
    if missing:
        raise ValueError(f"Summary is missing columns: {missing}")
    write_excel_safely(summary[SUMMARY_COLUMNS], path, sheet_name="attack_summary")
    format_summary_workbook(path)
    log.info("Summary workbook saved to %s", path)
    return path
