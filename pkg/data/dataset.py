"""
Longitudinal datasets observed at irregular visit times.

A dataset holds subjects with their visit times, outcomes Y and, when known,
the recommended interval R assigned at each visit and the observed interval S
that followed it. Datasets are immutable; loading and saving go through a
long-format CSV plus a JSON sidecar with the dataset-level header.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from utils import logging
logger = logging.getLogger(__name__)

# Constants
TIME_UNITS = ("days", "years")
CSV_COLUMNS = ["subject_id", "visit_index", "time", "y", "r", "s"]
_U_SUM_TOL = 1e-10

def _as_tuple(values):
    if values is None:
        return None
    return tuple(float(v) for v in values)

@dataclass(frozen=True, eq=False)
class SubjectRecord:
    id: int
    visit_times: Tuple[float, ...]
    y: Tuple[float, ...]
    r: Optional[Tuple[float, ...]] = None
    s: Optional[Tuple[float, ...]] = None
    baseline: Mapping[str, float] = field(default_factory=dict)
    u_sum: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "visit_times", _as_tuple(self.visit_times))
        object.__setattr__(self, "y", _as_tuple(self.y))
        object.__setattr__(self, "r", _as_tuple(self.r))
        object.__setattr__(self, "s", _as_tuple(self.s))
        object.__setattr__(self, "baseline", MappingProxyType({str(k): float(v) for k, v in dict(self.baseline).items()}))
        if self.u_sum is not None:
            object.__setattr__(self, "u_sum", float(self.u_sum))

    @property
    def n_visits(self):
        return len(self.visit_times)

    def with_y(self, y):
        """Copy with the outcome replaced (used by the diagnostics checks)."""
        return SubjectRecord(id=self.id, visit_times=self.visit_times, y=y, r=self.r, s=self.s,
                             baseline=self.baseline, u_sum=self.u_sum)

    def with_r(self, r):
        return SubjectRecord(id=self.id, visit_times=self.visit_times, y=self.y, r=r, s=self.s,
                             baseline=self.baseline, u_sum=self.u_sum)

@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    subjects: Tuple[SubjectRecord, ...]
    tau: float
    time_unit: str = "years"

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "tau", float(self.tau))

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def has_r(self):
        return len(self.subjects) > 0 and all(s.r is not None for s in self.subjects)

    @property
    def has_s(self):
        return len(self.subjects) > 0 and all(s.s is not None for s in self.subjects)

    @property
    def baseline_names(self):
        names = []
        for subject in self.subjects:
            for key in subject.baseline:
                if key not in names:
                    names.append(key)
        return names

    def visit_counts(self):
        return np.array([s.n_visits for s in self.subjects], dtype=int)

    def reordered(self, order):
        return LongitudinalDataset(subjects=tuple(self.subjects[i] for i in order), tau=self.tau,
                                   time_unit=self.time_unit)

    def replace_subjects(self, subjects):
        return LongitudinalDataset(subjects=tuple(subjects), tau=self.tau, time_unit=self.time_unit)

    def to_frame(self):
        """Long format: one row per visit, baseline covariates repeated per row."""
        names = self.baseline_names
        rows = []
        for subject in self.subjects:
            for j, t in enumerate(subject.visit_times):
                row = {"subject_id": subject.id, "visit_index": j, "time": t, "y": subject.y[j],
                       "r": subject.r[j] if subject.r is not None else np.nan,
                       "s": subject.s[j] if subject.s is not None else np.nan}
                for name in names:
                    row[name] = subject.baseline.get(name, np.nan)
                rows.append(row)
        return pd.DataFrame(rows, columns=CSV_COLUMNS + names)

    def header(self):
        return {"tau": self.tau, "time_unit": self.time_unit, "baseline": self.baseline_names,
                "u_sum": {str(s.id): s.u_sum for s in self.subjects if s.u_sum is not None}}

    @classmethod
    def from_frame(cls, frame, tau, time_unit="years", baseline=None, u_sum=None):
        """Builds a dataset from a long frame. Columns not in the schema are ignored."""
        missing = [c for c in ("subject_id", "time", "y") if c not in frame.columns]
        if missing:
            raise ValueError("Long-format frame lacks required columns {0}".format(missing))
        baseline = list(baseline or [])
        u_sum = {int(k): v for k, v in (u_sum or {}).items()}
        sort_cols = ["subject_id", "visit_index"] if "visit_index" in frame.columns else ["subject_id", "time"]
        frame = frame.sort_values(sort_cols, kind="mergesort")
        subjects = []
        for sid, group in frame.groupby("subject_id", sort=False):
            def optional(col):
                if col not in group.columns or group[col].isna().all():
                    return None
                return group[col].to_numpy(dtype=float)
            subjects.append(SubjectRecord(
                id=int(sid),
                visit_times=group["time"].to_numpy(dtype=float),
                y=group["y"].to_numpy(dtype=float),
                r=optional("r"),
                s=optional("s"),
                baseline={name: float(group[name].iloc[0]) for name in baseline},
                u_sum=u_sum.get(int(sid))))
        return cls(subjects=tuple(subjects), tau=tau, time_unit=time_unit)

    def save(self, path):
        """Writes <path> (CSV) and <path stem>.json (header sidecar)."""
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        with open(sidecar_path(path), "w") as f:
            json.dump(self.header(), f, indent=2)
        logger.info("Wrote {0} subjects to {1}".format(self.n_subjects, path))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            logger.error("Dataset file {0} not found".format(path))
            raise FileNotFoundError(str(path))
        header_file = sidecar_path(path)
        if not header_file.is_file():
            logger.error("Dataset header {0} not found next to {1}".format(header_file, path))
            raise FileNotFoundError(str(header_file))
        with open(header_file) as f:
            header = json.load(f)
        frame = pd.read_csv(path)
        return cls.from_frame(frame, tau=header["tau"], time_unit=header.get("time_unit", "years"),
                              baseline=header.get("baseline", []), u_sum=header.get("u_sum", {}))

def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".json")

@dataclass(frozen=True)
class Violation:
    subject_id: Optional[int]
    field: str
    message: str

@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[Violation, ...] = ()
    notices: Tuple[str, ...] = ()

    @property
    def is_valid(self):
        return len(self.violations) == 0

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def messages(self):
        return [v.message for v in self.violations]

def _check_subject(subject, tau):
    found = []
    def add(fieldname, message):
        found.append(Violation(subject.id, fieldname, message))

    times = np.asarray(subject.visit_times, dtype=float)
    n = len(times)
    if n == 0:
        add("visit_times", "no visits")
        return found
    if not np.all(np.isfinite(times)):
        add("visit_times", "non-finite times")
    if np.any(np.diff(times) <= 0):
        add("visit_times", "non-increasing times")
    if np.any(times < 0) or np.any(times > tau):
        add("visit_times", "time outside [0, tau]")
    if len(subject.y) != n:
        add("y", "length of y differs from number of visits")
    elif not np.all(np.isfinite(subject.y)):
        add("y", "non-finite outcome")
    if subject.r is not None:
        if len(subject.r) != n:
            add("r", "length of r differs from number of visits")
        if np.any(np.asarray(subject.r) <= 0):
            add("r", "non-positive recommended interval")
    if subject.s is not None:
        if len(subject.s) != n:
            add("s", "length of s differs from number of visits")
        if np.any(np.asarray(subject.s) <= 0):
            add("s", "non-positive interval")
    if subject.u_sum is not None:
        if not subject.u_sum > 0:
            add("u_sum", "non-positive interval sum")
        if subject.s is not None and len(subject.s) == n:
            total = float(np.sum(subject.s))
            if abs(total - subject.u_sum) > _U_SUM_TOL * max(1.0, abs(subject.u_sum)):
                add("u_sum", "u_sum differs from the sum of s")
            if not subject.u_sum > tau:
                add("u_sum", "u_sum does not exceed tau")
    return found

def validate_dataset(ds):
    """Collects every invariant violation of a dataset; empty report = valid.

    Missing R or S columns are reported as notices, not violations.
    """
    violations = []
    notices = []
    if not ds.tau > 0:
        violations.append(Violation(None, "tau", "non-positive tau"))
    if ds.time_unit not in TIME_UNITS:
        violations.append(Violation(None, "time_unit", "unknown time unit {0}".format(ds.time_unit)))
    ids = [s.id for s in ds.subjects]
    if len(set(ids)) != len(ids):
        violations.append(Violation(None, "subject_id", "duplicate subject ids"))
    for subject in ds.subjects:
        violations.extend(_check_subject(subject, ds.tau))
    n_no_r = sum(1 for s in ds.subjects if s.r is None)
    n_no_s = sum(1 for s in ds.subjects if s.s is None)
    if n_no_r:
        notices.append("recommended intervals (r) missing for {0} subjects".format(n_no_r))
    if n_no_s:
        notices.append("observed intervals (s) missing for {0} subjects".format(n_no_s))
    return ValidationReport(violations=tuple(violations), notices=tuple(notices))
