"""
Self-describing tab-separated tables.

Every file written here starts with a block of ``# key: value`` lines
(format name, provenance, column list) followed by a TSV body with a
header row. Floats use a fixed ``%.10g`` format, so identical inputs give
byte-identical files. String cells and labels are escaped against
spreadsheet formula injection and rejected if they contain null bytes.
"""

import io
import logging
import re
from typing import Any, Mapping

import pandas as pd

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
HEADER_PREFIX = "# "

# Formula initiators: =, +, -, @ and their full-width forms, possibly behind whitespace.
FORMULA_PREFIX_RE = re.compile(r"^[\s]*[=\+\-@＝＋－＠]", re.UNICODE)
NEUTRALIZE_PREFIX = "'"
_HEADER_KEY_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")
_INVALID_SHEET_NAME_RE = re.compile(r"[\\*?:/\[\]]")


def escape_spreadsheet_formula(value: Any) -> Any:
    """Prefix a string once with an apostrophe if it would start a formula."""
    if not isinstance(value, str):
        return value
    if value.startswith(NEUTRALIZE_PREFIX):
        return value
    if FORMULA_PREFIX_RE.match(value):
        return NEUTRALIZE_PREFIX + value
    return value


def _sanitize_label(value: Any, context: str) -> Any:
    if isinstance(value, str) and "\x00" in value:
        raise ValueError(f"Null byte found in {context}: {value!r}")
    return escape_spreadsheet_formula(value)


def sanitize_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Copy of `frame` with string labels and cells neutralised."""
    if not isinstance(frame, pd.DataFrame):
        raise TypeError("Expected a pandas DataFrame")
    sanitized = frame.copy()
    sanitized.columns = [_sanitize_label(c, "column label") for c in sanitized.columns]
    for column in sanitized.select_dtypes(include=["object", "string"]).columns:
        sanitized[column] = sanitized[column].map(
            lambda v, c=column: _sanitize_label(v, f"column {c!r}")
        )
    return sanitized


def _header_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        text = ",".join(str(v) for v in value)
    elif isinstance(value, float):
        text = FLOAT_FORMAT % value
    else:
        text = str(value)
    if "\n" in text or "\r" in text or "\x00" in text:
        raise ValueError(f"Header value may not contain line breaks or null bytes: {text!r}")
    return text


def format_header(fmt: str, meta: Mapping[str, Any], columns: list[str]) -> str:
    lines = [f"{HEADER_PREFIX}format: {fmt}"]
    for key, value in meta.items():
        if not _HEADER_KEY_RE.match(key):
            raise ValueError(f"Invalid header key {key!r}")
        if key in ("format", "columns"):
            raise ValueError(f"Header key {key!r} is reserved")
        lines.append(f"{HEADER_PREFIX}{key}: {_header_value(value)}")
    lines.append(f"{HEADER_PREFIX}columns: {','.join(columns)}")
    return "\n".join(lines) + "\n"


def write_table(
    frame: pd.DataFrame, path: str, fmt: str, meta: Mapping[str, Any] | None = None
) -> str:
    """Write `frame` with its header block to `path` and return the path."""
    sanitized = sanitize_frame(frame)
    columns = [str(c) for c in sanitized.columns]
    header = format_header(fmt, meta or {}, columns)
    body = sanitized.to_csv(
        sep="\t", index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header)
        f.write(body)
    log.debug("Wrote %s (%d rows) to %s", fmt, len(frame), path)
    return path


def parse_header(lines: list[str]) -> dict[str, str]:
    header: dict[str, str] = {}
    for line in lines:
        key, sep, value = line[len(HEADER_PREFIX):].partition(": ")
        if not sep:
            raise ValueError(f"Malformed header line: {line!r}")
        header[key] = value
    return header


def read_table(path: str) -> tuple[dict[str, str], pd.DataFrame]:
    """Read a table written by `write_table`; returns (header, frame)."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    header_lines = []
    offset = 0
    for line in text.splitlines(keepends=True):
        if not line.startswith(HEADER_PREFIX):
            break
        header_lines.append(line.rstrip("\n"))
        offset += len(line)
    if not header_lines:
        raise ValueError(f"{path}: missing '# format:' header block")
    header = parse_header(header_lines)
    frame = pd.read_csv(io.StringIO(text[offset:]), sep="\t")
    declared = header.get("columns", "")
    if declared and declared.split(",") != [str(c) for c in frame.columns]:
        raise ValueError(f"{path}: header column list does not match the body")
    return header, frame


def _validate_sheet_name(sheet_name: str) -> None:
    if not sheet_name:
        raise ValueError("sheet_name cannot be empty")
    if len(sheet_name) > 31:
        raise ValueError(f"sheet_name exceeds 31 characters: {sheet_name!r}")
    if _INVALID_SHEET_NAME_RE.search(sheet_name):
        raise ValueError(f"sheet_name contains invalid characters: {sheet_name!r}")


def write_excel_safely(frame: pd.DataFrame, path: str, sheet_name: str = "Sheet1") -> None:
    """Export `frame` to an .xlsx file with formula-injection protection."""
    _validate_sheet_name(sheet_name)
    sanitize_frame(frame).to_excel(path, sheet_name=sheet_name, index=False)
