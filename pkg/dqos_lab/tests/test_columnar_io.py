import pandas as pd
import pytest
from openpyxl import load_workbook

from dqos_lab.columnar_io import (
    escape_spreadsheet_formula,
    format_header,
    read_table,
    sanitize_frame,
    write_excel_safely,
    write_table,
)


def test_escape_spreadsheet_formula_prefixes():
    assert escape_spreadsheet_formula("=SUM(1,2)") == "'=SUM(1,2)"
    assert escape_spreadsheet_formula("+cmd") == "'+cmd"
    assert escape_spreadsheet_formula("-cmd") == "'-cmd"
    assert escape_spreadsheet_formula("@cmd") == "'@cmd"
    assert escape_spreadsheet_formula("\t=SUM(1,2)") == "'\t=SUM(1,2)"
    assert escape_spreadsheet_formula("＝HYPERLINK()") == "'＝HYPERLINK()"
    assert escape_spreadsheet_formula("'=already") == "'=already"
    assert escape_spreadsheet_formula("switch34") == "switch34"
    assert escape_spreadsheet_formula(-1.5) == -1.5


def test_sanitize_frame_rejects_null_bytes():
    with pytest.raises(ValueError, match="Null byte"):
        sanitize_frame(pd.DataFrame({"a": ["ok\x00"]}))
    with pytest.raises(TypeError):
        sanitize_frame([1, 2])


def test_header_block_and_reserved_keys():
    header = format_header("latency-records", {"seed": 3, "rtt": 68.0, "sizes": [1, 2]}, ["a", "b"])
    assert header.splitlines() == [
        "# format: latency-records",
        "# seed: 3",
        "# rtt: 68",
        "# sizes: 1,2",
        "# columns: a,b",
    ]
    with pytest.raises(ValueError, match="reserved"):
        format_header("x", {"columns": "a"}, [])
    with pytest.raises(ValueError, match="Invalid header key"):
        format_header("x", {"bad key": 1}, [])
    with pytest.raises(ValueError, match="line breaks"):
        format_header("x", {"note": "two\nlines"}, [])


def test_write_table_escapes_cells_and_is_reproducible(tmp_path):
    frame = pd.DataFrame({"name": ["=cmd", "switch1"], "value": [1.0 / 3.0, 2.0]})
    first = tmp_path / "a.tsv"
    second = tmp_path / "b.tsv"
    write_table(frame, str(first), "demo", {"seed": 0})
    write_table(frame, str(second), "demo", {"seed": 0})
    assert first.read_bytes() == second.read_bytes()

    header, table = read_table(str(first))
    assert header == {"format": "demo", "seed": "0", "columns": "name,value"}
    assert list(table["name"]) == ["'=cmd", "switch1"]
    assert "0.3333333333" in first.read_text()


def test_read_table_checks_columns(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("# format: demo\n# columns: a,b\na\tc\n1\t2\n")
    with pytest.raises(ValueError, match="column list"):
        read_table(str(path))
    path.write_text("a\tb\n1\t2\n")
    with pytest.raises(ValueError, match="header block"):
        read_table(str(path))


def test_write_excel_safely(tmp_path):
    path = tmp_path / "out.xlsx"
    write_excel_safely(pd.DataFrame({"label": ["@SUM(A1)"], "v": [1]}), str(path), sheet_name="summary")
    ws = load_workbook(path)["summary"]
    assert ws["A2"].value == "'@SUM(A1)"
    with pytest.raises(ValueError, match="invalid characters"):
        write_excel_safely(pd.DataFrame({"v": [1]}), str(path), sheet_name="a/b")
    with pytest.raises(ValueError, match="31"):
        write_excel_safely(pd.DataFrame({"v": [1]}), str(path), sheet_name="x" * 32)
