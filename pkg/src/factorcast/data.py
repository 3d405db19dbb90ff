"""Trajectory containers, dataset files and longitudinal CSV ingestion.

Dataset files are line-delimited JSON: the first record carries metadata
(generator settings, split stats), each following record is one patient.
Floats are serialized with full precision so round-trips are bit-exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass
class Trajectory:
    """One patient's time-indexed covariates, treatments and outcomes."""

    patient_id: int
    covariates: np.ndarray  # [T, d] float64
    treatments: np.ndarray  # [T] int in {0, 1}
    outcomes: np.ndarray    # [T] float64
    split: str = "train"

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        self.treatments = np.asarray(self.treatments, dtype=np.int64)
        self.outcomes = np.asarray(self.outcomes, dtype=np.float64)
        T = len(self.outcomes)
        if self.covariates.shape[0] != T or self.treatments.shape[0] != T:
            raise ValueError(
                f"patient {self.patient_id}: inconsistent lengths "
                f"(x={self.covariates.shape[0]}, a={self.treatments.shape[0]}, y={T})")

    def __len__(self) -> int:
        return len(self.outcomes)


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    covariate_names: list[str]
    metadata: dict = field(default_factory=dict)
    max_abs_outcome: float = 0.0   # over the train split
    treated_fraction: float = 0.0  # over the train split

    def split(self, name: str) -> list[Trajectory]:
        return [t for t in self.trajectories if t.split == name]

    def refresh_stats(self) -> None:
        train = self.split("train")
        if not train:
            raise ValueError("dataset has no train split")
        self.max_abs_outcome = float(max(np.abs(t.outcomes).max() for t in train))
        total = sum(len(t) for t in train)
        self.treated_fraction = float(sum(int(t.treatments.sum()) for t in train) / total)

    def total_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def as_arrays(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack a uniform-length split into [n, T, d], [n, T], [n, T]."""
        trajs = self.split(name)
        lengths = {len(t) for t in trajs}
        if len(lengths) != 1:
            raise ValueError(f"split {name!r} has mixed lengths {sorted(lengths)}")
        x = np.stack([t.covariates for t in trajs])
        a = np.stack([t.treatments for t in trajs])
        y = np.stack([t.outcomes for t in trajs])
        return x, a, y

    def equals(self, other: "Dataset") -> bool:
        if self.covariate_names != other.covariate_names:
            return False
        if len(self.trajectories) != len(other.trajectories):
            return False
        for a, b in zip(self.trajectories, other.trajectories):
            if a.patient_id != b.patient_id or a.split != b.split:
                return False
            if not (np.array_equal(a.covariates, b.covariates)
                    and np.array_equal(a.treatments, b.treatments)
                    and np.array_equal(a.outcomes, b.outcomes)):
                return False
        return True


def save_dataset(path, dataset: Dataset) -> None:
    with open(path, "w") as fh:
        meta = {
            "kind": "meta",
            "covariates": dataset.covariate_names,
            "max_abs_outcome": dataset.max_abs_outcome,
            "treated_fraction": dataset.treated_fraction,
            "metadata": dataset.metadata,
        }
        fh.write(json.dumps(meta) + "\n")
        for t in dataset.trajectories:
            rec = {
                "id": t.patient_id,
                "split": t.split,
                "x": t.covariates.tolist(),
                "a": t.treatments.tolist(),
                "y": t.outcomes.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    trajectories = []
    meta = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", lineno) from None
            if rec.get("kind") == "meta":
                meta = rec
                continue
            trajectories.append(Trajectory(
                patient_id=rec["id"], covariates=rec["x"],
                treatments=rec["a"], outcomes=rec["y"], split=rec["split"],
            ))
    if meta is None:
        raise ParseError("dataset file has no metadata record")
    ds = Dataset(trajectories=trajectories, covariate_names=meta["covariates"],
                 metadata=meta.get("metadata", {}))
    ds.max_abs_outcome = meta["max_abs_outcome"]
    ds.treated_fraction = meta["treated_fraction"]
    return ds


# ---------------------------------------------------------------------------
# Longitudinal CSV
# ---------------------------------------------------------------------------

@dataclass
class CsvSchema:
    """Maps CSV columns onto trajectory roles."""

    id_column: str = "patient_id"
    step_column: str = "step"
    treatment_column: str = "treatment"
    outcome_column: str = "outcome"
    covariate_columns: list[str] | None = None  # None: every remaining column
    split_column: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        known = {"id_column", "step_column", "treatment_column", "outcome_column",
                 "covariate_columns", "split_column"}
        unknown = set(d) - known
        if unknown:
            raise ParseError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)


def export_longitudinal_csv(path, dataset: Dataset, schema: CsvSchema | None = None) -> None:
    schema = schema or CsvSchema(covariate_columns=dataset.covariate_names, split_column="split")
    cov_cols = schema.covariate_columns or dataset.covariate_names
    header = [schema.id_column, schema.step_column, *cov_cols,
              schema.treatment_column, schema.outcome_column]
    if schema.split_column:
        header.append(schema.split_column)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in dataset.trajectories:
            for step in range(len(t)):
                row = [t.patient_id, step]
                row += [repr(float(v)) for v in t.covariates[step]]
                row += [int(t.treatments[step]), repr(float(t.outcomes[step]))]
                if schema.split_column:
                    row.append(t.split)
                writer.writerow(row)


def ingest_longitudinal_csv(path, schema: CsvSchema | None = None,
                            split_fractions: tuple[float, float] = (0.7, 0.15)) -> Dataset:
    """Parse a longitudinal CSV into a Dataset.

    Rows are grouped by patient id; per patient, steps must appear in strictly
    increasing order and treatments must be 0/1. Violations raise ParseError
    with the offending line number. Variable trajectory lengths are allowed.
    When the schema names no split column, splits are assigned per patient in
    order of first appearance using ``split_fractions``.
    """
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("empty CSV file")
        required = [schema.id_column, schema.step_column,
                    schema.treatment_column, schema.outcome_column]
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"missing required columns: {missing}")
        if schema.covariate_columns is None:
            reserved = set(required) | {schema.split_column}
            cov_cols = [c for c in reader.fieldnames if c not in reserved]
        else:
            cov_cols = schema.covariate_columns
            absent = [c for c in cov_cols if c not in reader.fieldnames]
            if absent:
                raise ParseError(f"missing covariate columns: {absent}")
        if not cov_cols:
            raise ParseError("no covariate columns identified")

        rows: dict[str, list] = {}
        order: list[str] = []
        seen: set[tuple[str, float]] = set()
        splits: dict[str, str] = {}
        for lineno, rec in enumerate(reader, start=2):
            pid = rec[schema.id_column]
            try:
                step = float(rec[schema.step_column])
            except (TypeError, ValueError):
                raise ParseError(f"non-numeric step {rec[schema.step_column]!r}", lineno) from None
            if (pid, step) in seen:
                raise ParseError(f"duplicate (id, step) = ({pid}, {rec[schema.step_column]})", lineno)
            seen.add((pid, step))
            if pid in rows and rows[pid][-1][0] >= step:
                raise ParseError(
                    f"steps for patient {pid} not in increasing order "
                    f"({rec[schema.step_column]} after {rows[pid][-1][0]:g})", lineno)
            treat_raw = rec[schema.treatment_column]
            if treat_raw not in ("0", "1"):
                raise ParseError(f"non-binary treatment {treat_raw!r}", lineno)
            try:
                outcome = float(rec[schema.outcome_column])
                covs = [float(rec[c]) for c in cov_cols]
            except (TypeError, ValueError) as exc:
                raise ParseError(f"non-numeric value: {exc}", lineno) from None
            if pid not in rows:
                rows[pid] = []
                order.append(pid)
            rows[pid].append((step, covs, int(treat_raw), outcome))
            if schema.split_column:
                splits[pid] = rec[schema.split_column]

    trajectories = []
    n = len(order)
    n_train = int(n * split_fractions[0])
    n_val = int(n * split_fractions[1])
    for i, pid in enumerate(order):
        entries = rows[pid]
        if schema.split_column:
            split = splits[pid]
        else:
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        try:
            numeric_id = int(pid)
        except ValueError:
            numeric_id = i
        trajectories.append(Trajectory(
            patient_id=numeric_id,
            covariates=np.array([e[1] for e in entries]),
            treatments=np.array([e[2] for e in entries]),
            outcomes=np.array([e[3] for e in entries]),
            split=split,
        ))
    ds = Dataset(trajectories=trajectories, covariate_names=list(cov_cols),
                 metadata={"source": "csv"})
    ds.refresh_stats()
    return ds
