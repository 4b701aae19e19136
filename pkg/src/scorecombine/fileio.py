"""Score-file reading and atomic output writing.

Score files are CSV with a mandatory header ``sample_id,<score columns...>[,label]``
or NDJSON with one object per sample using the same field names. Lines that
start with ``#`` before the CSV header are ignored, so files written by this
package (which begin with a provenance comment) can be read back.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from scorecombine.errors import DataError, SchemaError
from scorecombine.ztransform import ScoreMatrix

__all__ = [
    "file_sha256",
    "infer_format",
    "read_json",
    "read_records",
    "read_scores",
    "write_json",
    "write_table",
]

RESERVED = ("sample_id", "label")


def infer_format(path: str | os.PathLike, fmt: str | None = None) -> str:
    if fmt:
        if fmt not in ("csv", "ndjson"):
            raise SchemaError(f"format must be csv or ndjson, got {fmt!r}")
        return fmt
    suffix = Path(path).suffix.lower()
    return "ndjson" if suffix in (".ndjson", ".jsonl") else "csv"


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_csv(path: Path) -> tuple[list[str], list[tuple[int, dict[str, str]]]]:
    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = [(i + 1, line) for i, line in enumerate(lines) if line.strip() and not line.startswith("#")]
    if not body:
        raise SchemaError(f"{path}: missing header line (expected 'sample_id,...')")
    header_line_no, header_line = body[0]
    header = next(csv.reader([header_line]))
    header = [h.strip() for h in header]
    if not header or header[0] != "sample_id":
        raise SchemaError(
            f"{path}:{header_line_no}: missing header; first field must be 'sample_id', "
            f"got {header[0] if header else ''!r}"
        )
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}:{header_line_no}: duplicate header fields")
    records = []
    for (line_no, line), row in zip(body[1:], csv.reader([ln for _, ln in body[1:]])):
        if len(row) != len(header):
            raise SchemaError(
                f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}"
            )
        records.append((line_no, dict(zip(header, (v.strip() for v in row)))))
    return header, records


def _read_ndjson(path: Path) -> tuple[list[str], list[tuple[int, dict]]]:
    header: list[str] | None = None
    records = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{line_no}: each line must be a JSON object")
            if "_meta" in obj and len(obj) == 1:
                continue
            if "sample_id" not in obj:
                raise SchemaError(f"{path}:{line_no}: object lacks 'sample_id'")
            keys = ["sample_id"] + [k for k in obj if k != "sample_id"]
            if header is None:
                header = keys
            elif set(keys) != set(header):
                raise SchemaError(
                    f"{path}:{line_no}: fields {sorted(keys)} differ from first record {sorted(header)}"
                )
            records.append((line_no, obj))
    return header or ["sample_id"], records


def read_records(path: str | os.PathLike, fmt: str | None = None):
    """Return ``(fieldnames, [(line_no, record), ...])`` from a CSV or NDJSON file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if infer_format(path, fmt) == "ndjson":
        return _read_ndjson(path)
    return _read_csv(path)


def _to_float(value, path, line_no: int, col: str) -> float:
    if isinstance(value, bool):
        raise SchemaError(f"{path}:{line_no}: column {col!r} is not numeric ({value!r})")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise SchemaError(
            f"{path}:{line_no}: column {col!r} is not numeric ({value!r})"
        ) from None


def read_scores(
    path: str | os.PathLike,
    fmt: str | None = None,
    columns: Sequence[str] | None = None,
    ignore: Sequence[str] = (),
) -> ScoreMatrix:
    """Read a score matrix. ``columns`` names the score columns to expect when the
    file has no rows (NDJSON cannot carry a header); ``ignore`` drops extra
    non-score fields such as ``rule``."""
    header, records = read_records(path, fmt)
    score_cols = [c for c in header if c not in RESERVED and c not in ignore]
    if not records and columns is not None and len(header) == 1:
        score_cols = list(columns)
    has_label = "label" in header
    values = np.empty((len(records), len(score_cols)))
    ids, labels = [], []
    for i, (line_no, rec) in enumerate(records):
        ids.append(str(rec["sample_id"]))
        for j, col in enumerate(score_cols):
            values[i, j] = _to_float(rec[col], path, line_no, col)
        if has_label:
            labels.append(str(rec["label"]))
    try:
        return ScoreMatrix(tuple(score_cols), values, tuple(labels) if has_label else None,
                           tuple(ids))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def read_json(path: str | os.PathLike, what: str = "file") -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such {what}: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt {what} ({exc})") from None
    if not isinstance(obj, dict):
        raise DataError(f"{path}: corrupt {what} (top level is not an object)")
    return obj


def _atomic_write(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | os.PathLike, obj: dict) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


def write_table(
    path: str | os.PathLike,
    columns: Sequence[str],
    rows: Iterable[Sequence],
    meta: dict | None = None,
    fmt: str = "csv",
) -> None:
    """Write rows as CSV (with a ``# key=value`` provenance line) or NDJSON."""
    buf = io.StringIO()
    rows = list(rows)
    if fmt == "ndjson":
        if meta:
            buf.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for row in rows:
            rec = {}
            for c, v in zip(columns, row):
                rec[c] = float(v) if isinstance(v, (float, np.floating)) else (
                    bool(v) if isinstance(v, np.bool_) else v)
            buf.write(json.dumps(rec) + "\n")
    elif fmt == "csv":
        if meta:
            buf.write("# " + " ".join(f"{k}={meta[k]}" for k in meta) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    else:
        raise SchemaError(f"format must be csv or ndjson, got {fmt!r}")
    _atomic_write(path, buf.getvalue())
