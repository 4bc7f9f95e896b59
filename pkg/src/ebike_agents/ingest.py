"""Loading, validating and filtering raw incident exports.

Input contract (CSV header, case-sensitive; JSONL uses the same keys)::

    record_id,year,state,narrative,age,gender,severity

``severity`` is ``-1`` for undefined or an ordinal code in ``1..8``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .exceptions import SchemaError
from .records import StructuredIncident

logger = logging.getLogger(__name__)

COLUMNS = ("record_id", "year", "state", "narrative", "age", "gender", "severity")
MODEL_GENDERS = ("Female", "Male")
AGE_FLAG_LIMIT = 120


@dataclass(frozen=True)
class IncidentReport:
    record_id: str
    year: int
    state: str
    narrative: str
    age_years: int | None
    gender_raw: str
    severity_code: int

    def to_row(self) -> dict[str, str]:
        return {
            "record_id": self.record_id,
            "year": str(self.year),
            "state": self.state,
            "narrative": self.narrative,
            "age": "" if self.age_years is None else str(self.age_years),
            "gender": self.gender_raw,
            "severity": str(self.severity_code),
        }


@dataclass(frozen=True)
class Reject:
    record_id: str
    reason: str


@dataclass
class LoadResult:
    """Reports in file order plus the rejects report.

    Out-of-range ages are *kept* in ``reports`` and also listed in
    ``rejects`` as a flag.
    """

    reports: list[IncidentReport]
    rejects: list[Reject] = field(default_factory=list)

    def __iter__(self):
        return iter(self.reports)

    def __len__(self):
        return len(self.reports)


@dataclass(frozen=True)
class FilterSummary:
    total: int
    kept: int
    undefined_severity: int
    unspecified_gender: int


def _parse_int(value, name):
    if isinstance(value, bool):
        raise ValueError(f"{name} is not an integer: {value!r}")
    if isinstance(value, int):
        return value
    text = str(value).strip()
    try:
        return int(text)
    except ValueError:
        # exports sometimes carry "66.0"
        as_float = float(text)
        if not as_float.is_integer():
            raise ValueError(f"{name} is not an integer: {value!r}") from None
        return int(as_float)


def _parse_row(row: dict) -> tuple[IncidentReport, str | None]:
    record_id = str(row["record_id"] or "").strip()
    if not record_id:
        raise ValueError("empty record_id")
    try:
        year = _parse_int(row["year"], "year")
    except (TypeError, ValueError):
        raise ValueError(f"bad year: {row['year']!r}") from None
    try:
        severity = _parse_int(row["severity"], "severity")
    except (TypeError, ValueError):
        raise ValueError(f"bad severity: {row['severity']!r}") from None
    if severity != -1 and not 1 <= severity <= 8:
        raise ValueError(f"severity out of range: {severity}")
    raw_age = row["age"]
    age = None
    flag = None
    if raw_age is not None and str(raw_age).strip() != "":
        try:
            age = _parse_int(raw_age, "age")
        except (TypeError, ValueError):
            raise ValueError(f"bad age: {raw_age!r}") from None
        if age < 0:
            raise ValueError(f"negative age: {age}")
        if age > AGE_FLAG_LIMIT:
            flag = f"age above {AGE_FLAG_LIMIT} kept: {age}"
    report = IncidentReport(
        record_id=record_id,
        year=year,
        state=str(row["state"] or "").strip(),
        narrative="" if row["narrative"] is None else str(row["narrative"]),
        age_years=age,
        gender_raw=str(row["gender"] or "").strip(),
        severity_code=severity,
    )
    return report, flag


def _read_rows(path: Path, fmt: str):
    if fmt == "csv":
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise SchemaError(f"{path}: missing header row")
            missing = [c for c in COLUMNS if c not in reader.fieldnames]
            if missing:
                raise SchemaError(f"{path}: missing required columns {missing}")
            for lineno, row in enumerate(reader, start=2):
                yield lineno, row
    elif fmt == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield lineno, exc
                    continue
                if not isinstance(row, dict):
                    yield lineno, ValueError("line is not a JSON object")
                    continue
                missing = [c for c in COLUMNS if c not in row]
                if missing:
                    raise SchemaError(f"{path}:{lineno}: missing required keys {missing}")
                yield lineno, row
    else:
        raise ValueError(f"unknown format: {fmt!r}")


def load_reports(path, format: str | None = None) -> LoadResult:
    """Load an incident export.

    Rows that fail to parse go to ``rejects`` with a reason; the load only
    fails outright when the file is unreadable, a required column is missing,
    or every row was rejected.
    """
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix.lower() in (".jsonl", ".json") else "csv")
    if not path.is_file() or not os.access(path, os.R_OK):
        raise OSError(f"cannot read {path}")

    reports: list[IncidentReport] = []
    rejects: list[Reject] = []
    seen: set[str] = set()
    n_rows = 0
    for lineno, row in _read_rows(path, fmt):
        n_rows += 1
        if isinstance(row, Exception):
            rejects.append(Reject(f"line {lineno}", f"unparseable line: {row}"))
            continue
        rid = str(row.get("record_id") or f"line {lineno}")
        try:
            report, flag = _parse_row(row)
        except ValueError as exc:
            rejects.append(Reject(rid, str(exc)))
            continue
        if report.record_id in seen:
            rejects.append(Reject(rid, "duplicate record_id"))
            continue
        seen.add(report.record_id)
        reports.append(report)
        if flag:
            rejects.append(Reject(rid, flag))

    if n_rows and not reports:
        raise SchemaError(f"{path}: all {n_rows} rows rejected")
    if rejects:
        logger.info("%s: %d rejects", path, len(rejects))
    return LoadResult(reports, rejects)


def filter_for_model(reports: Sequence, drop_unspecified_gender: bool = False):
    """Drop records unusable for severity modeling.

    Works on anything exposing ``severity_code`` and ``gender_raw``
    (reports or structured incidents). Returns ``(kept, FilterSummary)``.
    """
    kept = []
    undefined = unspecified = 0
    for rec in reports:
        if rec.severity_code == -1:
            undefined += 1
            continue
        if drop_unspecified_gender and rec.gender_raw not in MODEL_GENDERS:
            unspecified += 1
            continue
        kept.append(rec)
    summary = FilterSummary(
        total=len(reports),
        kept=len(kept),
        undefined_severity=undefined,
        unspecified_gender=unspecified,
    )
    return kept, summary


def write_reports(reports: Iterable[IncidentReport], path, format: str = "csv") -> int:
    path = Path(path)
    reports = list(reports)
    if format == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=COLUMNS)
            writer.writeheader()
            for r in reports:
                writer.writerow(r.to_row())
    elif format == "jsonl":
        with path.open("w", encoding="utf-8") as fh:
            for r in reports:
                row = {
                    "record_id": r.record_id,
                    "year": r.year,
                    "state": r.state,
                    "narrative": r.narrative,
                    "age": r.age_years,
                    "gender": r.gender_raw,
                    "severity": r.severity_code,
                }
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    else:
        raise ValueError(f"unknown format: {format!r}")
    return len(reports)


def write_rejects(rejects: Iterable[Reject], path) -> int:
    rejects = list(rejects)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "reason"])
        for r in rejects:
            writer.writerow([r.record_id, r.reason])
    return len(rejects)


def write_structured(records: Iterable[StructuredIncident], path) -> int:
    """Write one JSON object per line; returns the number of lines."""
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"destination directory does not exist: {path.parent}")
    n = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_structured(path) -> list[StructuredIncident]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(StructuredIncident.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    ids = Counter(r.record_id for r in out)
    dupes = sorted(k for k, v in ids.items() if v > 1)
    if dupes:
        raise SchemaError(f"{path}: duplicate record_id values {dupes[:5]}")
    return out
