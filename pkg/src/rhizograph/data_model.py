"""Minirhizotron observations: record types, CSV ingestion and validation.

One record is a (stage, treatment, tube, zone) cell holding the number of
observation windows, how many of them show roots, and the total number of
root crossings of the reference lines over those windows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BoundsError, CompletenessError, SchemaError

ZONES: tuple[str, ...] = ("A", "B", "C")
STAGES: tuple[int, ...] = (1, 2, 3)
CSV_HEADER: tuple[str, ...] = (
    "stage",
    "treatment",
    "tube",
    "zone",
    "n_windows",
    "windows_with_roots",
    "crossings",
)


@dataclass(frozen=True, order=True)
class WindowRecord:
    stage: int
    treatment: int
    tube: int
    zone: str
    n_windows: int
    windows_with_roots: int
    crossings: int

    @property
    def key(self) -> tuple[int, int, int, str]:
        return (self.stage, self.treatment, self.tube, self.zone)

    def violations(self) -> list[str]:
        """Return a description of every invariant this record breaks."""
        out = []
        if self.stage not in STAGES:
            out.append(f"stage={self.stage} not in {STAGES}")
        if self.zone not in ZONES:
            out.append(f"zone={self.zone!r} not in {ZONES}")
        if self.treatment < 1:
            out.append(f"treatment={self.treatment} must be >= 1")
        if self.n_windows < 1:
            out.append(f"n_windows={self.n_windows} must be positive")
        if not 0 <= self.windows_with_roots <= self.n_windows:
            out.append(
                f"windows_with_roots={self.windows_with_roots} outside "
                f"[0, n_windows={self.n_windows}]"
            )
        if self.crossings < 0:
            out.append(f"crossings={self.crossings} is negative")
        return out


@dataclass(frozen=True)
class StageArrays:
    """Dense per-tube view of one development stage.

    Rows follow ``tubes`` (sorted by (treatment, tube)); columns follow ZONES.
    """

    tubes: tuple[tuple[int, int], ...]
    treatments: tuple[int, ...]
    tube_treatment: np.ndarray  # row -> index into treatments
    n_windows: np.ndarray
    windows_with_roots: np.ndarray
    crossings: np.ndarray


class Dataset:
    """Validated, immutable collection of WindowRecords.

    Construction checks the per-record bounds, uniqueness of cells, constant
    window counts across stages and the complete zone x stage grid for every
    tube. All violations are collected before raising.
    """

    def __init__(self, records: Iterable[WindowRecord]):
        recs = tuple(sorted(records))
        _validate(recs)
        self._records = recs

    @property
    def records(self) -> tuple[WindowRecord, ...]:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self._records == other._records

    def __hash__(self) -> int:
        return hash(self._records)

    def __repr__(self) -> str:
        return (
            f"Dataset({len(self)} records, {len(self.tubes)} tubes, "
            f"{self.n_treatments} treatments)"
        )

    zones = ZONES
    stages = STAGES

    @cached_property
    def tubes(self) -> tuple[tuple[int, int], ...]:
        """Experimental units as sorted (treatment, tube) pairs."""
        return tuple(sorted({(r.treatment, r.tube) for r in self._records}))

    @cached_property
    def treatments(self) -> tuple[int, ...]:
        return tuple(sorted({t for t, _ in self.tubes}))

    @property
    def n_treatments(self) -> int:
        return len(self.treatments)

    @property
    def tubes_per_treatment(self) -> int:
        """Largest number of tubes in any treatment (designs may be unbalanced)."""
        counts = {}
        for t, _ in self.tubes:
            counts[t] = counts.get(t, 0) + 1
        return max(counts.values())

    def stage_arrays(self, stage: int) -> StageArrays:
        return self._stage_arrays[stage]

    @cached_property
    def _stage_arrays(self) -> dict[int, StageArrays]:
        row = {tk: i for i, tk in enumerate(self.tubes)}
        col = {z: j for j, z in enumerate(ZONES)}
        treat_index = {t: i for i, t in enumerate(self.treatments)}
        shape = (len(self.tubes), len(ZONES))
        out = {}
        for d in STAGES:
            n = np.zeros(shape, dtype=np.int64)
            y = np.zeros(shape, dtype=np.int64)
            c = np.zeros(shape, dtype=np.int64)
            for r in self._records:
                if r.stage != d:
                    continue
                i, j = row[(r.treatment, r.tube)], col[r.zone]
                n[i, j] = r.n_windows
                y[i, j] = r.windows_with_roots
                c[i, j] = r.crossings
            for a in (n, y, c):
                a.setflags(write=False)
            tt = np.array([treat_index[t] for t, _ in self.tubes], dtype=np.int64)
            tt.setflags(write=False)
            out[d] = StageArrays(self.tubes, self.treatments, tt, n, y, c)
        return out


def _validate(records: tuple[WindowRecord, ...]) -> None:
    bad = []
    for i, r in enumerate(records):
        for msg in r.violations():
            bad.append(f"record {i} {r.key}: {msg}")
    if bad:
        raise BoundsError("; ".join(bad))

    seen = {}
    dupes = []
    for r in records:
        if r.key in seen:
            dupes.append(r.key)
        seen[r.key] = r
    if dupes:
        raise CompletenessError(f"duplicate cells: {dupes}")

    tubes = sorted({(r.treatment, r.tube) for r in records})
    missing = [
        (d, t, k, z)
        for t, k in tubes
        for d in STAGES
        for z in ZONES
        if (d, t, k, z) not in seen
    ]
    if missing:
        raise CompletenessError(
            f"{len(missing)} missing (stage, treatment, tube, zone) cells: {missing}"
        )

    drift = []
    for t, k in tubes:
        for z in ZONES:
            counts = {seen[(d, t, k, z)].n_windows for d in STAGES}
            if len(counts) > 1:
                drift.append(((t, k, z), sorted(counts)))
    if drift:
        raise BoundsError(f"n_windows differs across stages for {drift}")


def _parse_int(text: str, column: str, line: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise SchemaError(f"line {line}: column {column!r} is not an integer: {text!r}")


def load_dataset(path: str | Path, format: str = "csv") -> Dataset:
    """Read and validate a dataset file.

    Raises
    ------
    SchemaError
        Missing/unknown header column or unparsable value.
    BoundsError
        Rows violating record invariants; every offending line is listed.
    CompletenessError
        Tubes lacking some zone x stage cell.
    """
    if format != "csv":
        raise SchemaError(f"unsupported format {format!r}")
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        extra = [c for c in header if c not in CSV_HEADER]
        if extra:
            raise SchemaError(f"{path}: unexpected column(s) {extra}")
        idx = {c: header.index(c) for c in CSV_HEADER}

        records, bad = [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            zone = row[idx["zone"]].strip()
            vals = {
                c: _parse_int(row[idx[c]], c, line) for c in CSV_HEADER if c != "zone"
            }
            rec = WindowRecord(zone=zone, **vals)
            errs = rec.violations()
            if errs:
                bad.append(f"line {line}: " + ", ".join(errs))
            records.append(rec)
    if bad:
        raise BoundsError("; ".join(bad))
    return Dataset(records)


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in dataset:
            w.writerow([getattr(r, c) for c in CSV_HEADER])
