"""Cohort data structures and delimited-text I/O.

An analytic dataset is a validated, immutable bundle of covariates W (dense
investigator-specified columns plus sparse binary proxy columns), a treatment
indicator A, an outcome Y, and an observation indicator delta (1 = outcome
observed).  Proxy features travel in a sparse-triplet companion file.

Feature prevalence is computed once, on the cohort as loaded, and carried
forward unchanged through censoring restriction: prevalence screening is a
covariate-only operation and must not depend on which outcomes were observed.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse as sp

from .errors import (
    EmptyCohortError,
    InputError,
    SchemaError,
    ValidationError,
)

INVESTIGATOR = "investigator-specified"
PROXY = "proxy"


@dataclass(frozen=True)
class DatasetSchema:
    """Column-role mapping for the main delimited file."""

    id_col: str = "subject_id"
    treatment_col: str = "treatment"
    outcome_col: str = "outcome"
    censor_col: str = "censored"
    # declared proxy width; None means infer from the companion file
    proxy_features: tuple[str, ...] | None = None

    def role_columns(self) -> list[str]:
        return [self.id_col, self.treatment_col, self.outcome_col, self.censor_col]


@dataclass(frozen=True)
class FeatureEntry:
    name: str
    origin: str  # INVESTIGATOR or PROXY
    prevalence: float
    retained: bool


@dataclass(frozen=True)
class FeatureCatalog:
    entries: tuple[FeatureEntry, ...]
    threshold: float

    def retained_names(self) -> list[str]:
        return [e.name for e in self.entries if e.retained]

    def dropped_names(self) -> list[str]:
        return [e.name for e in self.entries if not e.retained]

    def entry(self, name: str) -> FeatureEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def n_retained(self) -> int:
        return sum(e.retained for e in self.entries)


@dataclass(frozen=True)
class CohortSummary:
    n_total: int
    n_treated: int
    n_comparator: int
    n_events: int
    n_censored: int
    prop_treated: float
    prop_comparator: float
    prop_events: float
    prop_censored: float


@dataclass(frozen=True)
class AnalyticDataset:
    """Immutable cohort: ids, W (dense + sparse), A, Y, delta.

    Y is canonicalized to 0 wherever delta = 0; it is only meaningful where
    the outcome was observed.  ``feature_prevalence`` holds the nonzero
    fraction of every feature measured on the cohort as originally loaded.
    """

    subject_id: tuple[str, ...]
    a: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    dense: np.ndarray
    dense_names: tuple[str, ...]
    sparse: sp.csr_matrix
    sparse_names: tuple[str, ...]
    schema: DatasetSchema
    feature_prevalence: dict[str, float] = field(repr=False)
    restriction_dropped_fraction: float | None = None

    @property
    def n(self) -> int:
        return len(self.subject_id)

    @property
    def feature_names(self) -> list[str]:
        return list(self.dense_names) + list(self.sparse_names)

    def feature_matrix(self, names=None) -> np.ndarray:
        """Dense model matrix for the requested features (default: all)."""
        if names is None:
            names = self.feature_names
        dense_pos = {n: k for k, n in enumerate(self.dense_names)}
        sparse_pos = {n: k for k, n in enumerate(self.sparse_names)}
        out = np.empty((self.n, len(names)))
        sp_dense = None
        for j, name in enumerate(names):
            if name in dense_pos:
                out[:, j] = self.dense[:, dense_pos[name]]
            elif name in sparse_pos:
                if sp_dense is None:
                    sp_dense = np.asarray(self.sparse.todense())
                out[:, j] = sp_dense[:, sparse_pos[name]]
            else:
                raise InputError(f"unknown feature: {name!r}")
        return out

    def origin_of(self, name: str) -> str:
        if name in self.dense_names:
            return INVESTIGATOR
        if name in self.sparse_names:
            return PROXY
        raise InputError(f"unknown feature: {name!r}")

    def equals(self, other: "AnalyticDataset") -> bool:
        return (
            self.subject_id == other.subject_id
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.delta, other.delta)
            and self.dense_names == other.dense_names
            and self.sparse_names == other.sparse_names
            and np.array_equal(self.dense, other.dense)
            and (self.sparse != other.sparse).nnz == 0
        )

    @classmethod
    def from_arrays(
        cls,
        subject_id,
        a,
        y,
        delta,
        dense,
        dense_names,
        sparse_matrix=None,
        sparse_names=(),
        schema: DatasetSchema | None = None,
    ) -> "AnalyticDataset":
        subject_id = tuple(str(s) for s in subject_id)
        n = len(subject_id)
        if len(set(subject_id)) != n:
            raise ValidationError("duplicate subject_id values")
        a = _as_binary(a, "A")
        delta = _as_binary(delta, "delta")
        y = np.asarray(y, dtype=np.int64).ravel()
        if not (len(a) == len(y) == len(delta) == n):
            raise ValidationError("A, Y, delta, and subject_id lengths differ")
        bad = np.where((delta == 1) & ~np.isin(y, (0, 1)))[0]
        if bad.size:
            raise ValidationError(
                f"Y must be binary where delta = 1 (row {bad[0] + 1})", row=int(bad[0] + 1)
            )
        y = np.where(delta == 1, y, 0)
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim == 1:
            dense = dense.reshape(-1, 1)
        if dense.shape[0] != n or dense.shape[1] != len(dense_names):
            raise ValidationError("dense block shape does not match names or n")
        if not np.all(np.isfinite(dense)):
            raise ValidationError("dense covariates contain missing or non-finite values")
        if sparse_matrix is None:
            sparse_matrix = sp.csr_matrix((n, 0))
        sparse_matrix = sp.csr_matrix(sparse_matrix, dtype=np.float64)
        if sparse_matrix.shape != (n, len(sparse_names)):
            raise ValidationError("sparse block shape does not match names or n")
        if sparse_matrix.nnz and not np.all(sparse_matrix.data == 1.0):
            raise ValidationError("proxy features must be binary 0/1")
        names = list(dense_names) + list(sparse_names)
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        prevalence = _prevalence_map(dense, dense_names, sparse_matrix, sparse_names)
        return cls(
            subject_id=subject_id,
            a=a,
            y=y,
            delta=delta,
            dense=dense,
            dense_names=tuple(dense_names),
            sparse=sparse_matrix,
            sparse_names=tuple(sparse_names),
            schema=schema or DatasetSchema(),
            feature_prevalence=prevalence,
        )


def _as_binary(values, label: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).ravel()
    bad = np.where(~np.isin(arr, (0, 1)))[0]
    if bad.size:
        raise ValidationError(
            f"{label} must be binary 0/1 (row {bad[0] + 1})", row=int(bad[0] + 1)
        )
    return arr


def _prevalence_map(dense, dense_names, sparse_matrix, sparse_names) -> dict[str, float]:
    n = dense.shape[0]
    out = {}
    for k, name in enumerate(dense_names):
        out[name] = float(np.count_nonzero(dense[:, k])) / n if n else 0.0
    if len(sparse_names):
        counts = np.asarray((sparse_matrix != 0).sum(axis=0)).ravel()
        for k, name in enumerate(sparse_names):
            out[name] = float(counts[k]) / n if n else 0.0
    return out


def _parse_binary_cell(raw: str, col: str, row_num: int) -> int:
    text = raw.strip()
    if text in ("0", "1"):
        return int(text)
    try:
        val = float(text)
    except ValueError:
        raise ValidationError(
            f"column {col!r} must be binary 0/1, found {raw!r} at row {row_num}",
            row=row_num,
        ) from None
    if val in (0.0, 1.0):
        return int(val)
    raise ValidationError(
        f"column {col!r} must be binary 0/1, found {raw!r} at row {row_num}",
        row=row_num,
    )


def load_dataset(path, schema: DatasetSchema, sparse_path=None) -> AnalyticDataset:
    """Read the main delimited file (and optional proxy triplets) into a dataset.

    The schema names the id, treatment, outcome, and censoring columns; every
    other column in the main file is an investigator-specified feature.  Proxy
    features come exclusively from the companion triplet file.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = list(reader)
    missing = [c for c in schema.role_columns() if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names in header")
    pos = {c: k for k, c in enumerate(header)}
    feature_cols = [c for c in header if c not in schema.role_columns()]

    n = len(rows)
    subject_id = []
    a = np.empty(n, dtype=np.int64)
    y = np.zeros(n, dtype=np.int64)
    delta = np.empty(n, dtype=np.int64)
    dense = np.empty((n, len(feature_cols)))
    ignored_y = 0
    for i, row in enumerate(rows):
        row_num = i + 1
        if len(row) != len(header):
            raise ValidationError(
                f"{path}: row {row_num} has {len(row)} fields, expected {len(header)}",
                row=row_num,
            )
        subject_id.append(row[pos[schema.id_col]])
        a[i] = _parse_binary_cell(row[pos[schema.treatment_col]], schema.treatment_col, row_num)
        delta[i] = _parse_binary_cell(row[pos[schema.censor_col]], schema.censor_col, row_num)
        y_raw = row[pos[schema.outcome_col]].strip()
        if delta[i] == 1:
            if y_raw == "":
                raise ValidationError(
                    f"{path}: outcome missing at row {row_num} despite delta = 1",
                    row=row_num,
                )
            y[i] = _parse_binary_cell(y_raw, schema.outcome_col, row_num)
        elif y_raw not in ("", "0"):
            ignored_y += 1
        for j, c in enumerate(feature_cols):
            raw = row[pos[c]].strip()
            if raw == "":
                raise ValidationError(
                    f"{path}: missing value for {c!r} at row {row_num}; "
                    "impute upstream",
                    row=row_num,
                )
            try:
                dense[i, j] = float(raw)
            except ValueError:
                raise ValidationError(
                    f"{path}: non-numeric value {raw!r} for {c!r} at row {row_num}",
                    row=row_num,
                ) from None
    if ignored_y:
        warnings.warn(
            f"{path}: outcome values present on {ignored_y} censored rows were ignored",
            stacklevel=2,
        )

    sparse_names: tuple[str, ...] = schema.proxy_features or ()
    if sparse_path is not None:
        sparse_matrix, sparse_names = _load_triplets(
            sparse_path, subject_id, schema.proxy_features
        )
    else:
        if schema.proxy_features:
            raise SchemaError(
                "schema declares proxy features but no companion file was given"
            )
        sparse_matrix = sp.csr_matrix((n, 0))
    return AnalyticDataset.from_arrays(
        subject_id, a, y, delta, dense, tuple(feature_cols),
        sparse_matrix, sparse_names, schema=schema,
    )


def _load_triplets(path, subject_id, declared_names):
    id_pos = {s: k for k, s in enumerate(subject_id)}
    names = list(declared_names) if declared_names else []
    name_pos = {s: k for k, s in enumerate(names)}
    ii, jj = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["subject_id", "feature_name", "value"]:
            raise SchemaError(
                f"{path}: companion file must have header subject_id,feature_name,value"
            )
        for k, row in enumerate(reader):
            row_num = k + 1
            if len(row) != 3:
                raise ValidationError(
                    f"{path}: row {row_num} has {len(row)} fields, expected 3",
                    row=row_num,
                )
            sid, fname, value = row[0], row[1], row[2].strip()
            if sid not in id_pos:
                raise ValidationError(
                    f"{path}: unknown subject_id {sid!r} at row {row_num}", row=row_num
                )
            if value not in ("1", "1.0"):
                raise ValidationError(
                    f"{path}: proxy entries must be 1, found {value!r} at row {row_num}",
                    row=row_num,
                )
            if fname not in name_pos:
                if declared_names:
                    raise ValidationError(
                        f"{path}: feature {fname!r} not in declared proxy list",
                        row=row_num,
                    )
                name_pos[fname] = len(names)
                names.append(fname)
            ii.append(id_pos[sid])
            jj.append(name_pos[fname])
    mat = sp.csr_matrix(
        (np.ones(len(ii)), (ii, jj)), shape=(len(subject_id), len(names))
    )
    mat.data[:] = 1.0  # collapse duplicate triplets
    return mat, tuple(names)


def export_dataset(dataset: AnalyticDataset, path, sparse_path=None) -> None:
    """Write the dataset back to delimited text with deterministic field order.

    Main file columns: id, treatment, outcome, censoring, then dense features
    in catalog order.  The outcome field is left empty where delta = 0.  Proxy
    features go to the triplet companion ordered by (row, declared feature
    order).  Exporting a loaded file reproduces it byte for byte.
    """
    if len(dataset.sparse_names) and sparse_path is None:
        raise InputError("dataset has proxy features; a companion path is required")
    s = dataset.schema
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(s.role_columns() + list(dataset.dense_names))
        for i in range(dataset.n):
            row = [
                dataset.subject_id[i],
                str(dataset.a[i]),
                str(dataset.y[i]) if dataset.delta[i] == 1 else "",
                str(dataset.delta[i]),
            ]
            row.extend(repr(float(v)) for v in dataset.dense[i])
            writer.writerow(row)
    if sparse_path is not None:
        coo = dataset.sparse.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(sparse_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject_id", "feature_name", "value"])
            for k in order:
                writer.writerow(
                    [dataset.subject_id[coo.row[k]], dataset.sparse_names[coo.col[k]], "1"]
                )


def screen_by_prevalence(dataset: AnalyticDataset, threshold: float) -> FeatureCatalog:
    """Catalog every feature, marking proxies below the prevalence threshold.

    Prevalence is the load-time nonzero fraction (pre-restriction), so the
    retained set does not depend on whether censored rows were dropped first.
    Proxies strictly below the threshold are dropped; investigator-specified
    features are always retained.
    """
    if not (0.0 <= threshold < 1.0):
        raise InputError(f"threshold must be in [0, 1), got {threshold}")
    entries = []
    for name in dataset.dense_names:
        entries.append(
            FeatureEntry(name, INVESTIGATOR, dataset.feature_prevalence[name], True)
        )
    for name in dataset.sparse_names:
        prev = dataset.feature_prevalence[name]
        entries.append(FeatureEntry(name, PROXY, prev, prev >= threshold))
    return FeatureCatalog(entries=tuple(entries), threshold=threshold)


def select_features(dataset: AnalyticDataset, catalog: FeatureCatalog) -> AnalyticDataset:
    """Dataset restricted to the catalog's retained features."""
    keep_dense = [k for k, n in enumerate(dataset.dense_names) if catalog.entry(n).retained]
    keep_sparse = [k for k, n in enumerate(dataset.sparse_names) if catalog.entry(n).retained]
    return replace(
        dataset,
        dense=dataset.dense[:, keep_dense],
        dense_names=tuple(dataset.dense_names[k] for k in keep_dense),
        sparse=sp.csr_matrix(dataset.sparse[:, keep_sparse]),
        sparse_names=tuple(dataset.sparse_names[k] for k in keep_sparse),
    )


def restrict_to_observed(dataset: AnalyticDataset) -> AnalyticDataset:
    """Drop rows with censored outcomes (delta = 0), preserving row order.

    The returned dataset records the dropped fraction and keeps the parent's
    load-time feature prevalences.
    """
    keep = dataset.delta == 1
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise EmptyCohortError("every row is censored; nothing to analyze")
    dropped = 1.0 - n_keep / dataset.n
    if n_keep == dataset.n:
        return replace(dataset, restriction_dropped_fraction=0.0)
    idx = np.where(keep)[0]
    return replace(
        dataset,
        subject_id=tuple(dataset.subject_id[k] for k in idx),
        a=dataset.a[idx],
        y=dataset.y[idx],
        delta=dataset.delta[idx],
        dense=dataset.dense[idx],
        sparse=sp.csr_matrix(dataset.sparse[idx]),
        restriction_dropped_fraction=dropped,
    )


def summarize_cohort(dataset: AnalyticDataset) -> CohortSummary:
    """Counts and proportions for the cohort as given."""
    n = dataset.n
    if n == 0:
        raise EmptyCohortError("cannot summarize an empty cohort")
    n_treated = int(np.sum(dataset.a == 1))
    n_events = int(np.sum((dataset.delta == 1) & (dataset.y == 1)))
    n_censored = int(np.sum(dataset.delta == 0))
    return CohortSummary(
        n_total=n,
        n_treated=n_treated,
        n_comparator=n - n_treated,
        n_events=n_events,
        n_censored=n_censored,
        prop_treated=n_treated / n,
        prop_comparator=(n - n_treated) / n,
        prop_events=n_events / n,
        prop_censored=n_censored / n,
    )
