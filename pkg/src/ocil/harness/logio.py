"""CSV serialization of trial logs.  Floats use ``repr`` so a round trip is exact."""

from __future__ import annotations

import csv
from pathlib import Path

from .runner import CSV_FIELDS, LogRow, TrialLog

_INT = {"trial", "data_point"}
_STR = {"phase"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(logs, path) -> Path:
    """Write all rows of ``logs`` (a TrialLog or a list of them) with the fixed header."""
    logs = [logs] if isinstance(logs, TrialLog) else list(logs)
    rows = [r for lg in logs for r in lg.rows]
    if not rows:
        raise ValueError("no rows")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in rows:
                w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def _parse(name: str, text: str):
    if name in _STR:
        return text
    if text == "":
        return None
    return int(text) if name in _INT else float(text)


def read_csv(path) -> list[TrialLog]:
    """Inverse of :func:`write_csv`; rows are regrouped by trial id in file order."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != CSV_FIELDS:
                raise ValueError(f"{path}: unexpected header {header}")
            logs: dict[int, TrialLog] = {}
            for rec in reader:
                row = LogRow(**{f: _parse(f, v) for f, v in zip(CSV_FIELDS, rec)})
                logs.setdefault(row.trial, TrialLog(row.trial)).rows.append(row)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    return list(logs.values())
