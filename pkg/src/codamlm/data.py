"""Clustered long-format data ingestion and the between/within split.

Rows are repeated observations nested in clusters (days within people,
patients within hospitals, ...).  Each row's composition is decomposed
into a cluster-level part (the closed per-part geometric mean of the
cluster's rows) and a row-level deviate, whose ilr coordinates add back
exactly to the row's total coordinates.  The geometric mean is the unique
cluster mean that makes this an additive identity in ilr space.

Ingest is a single screening pass; the decomposition is per-cluster
independent and returns immutable arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .basis import OrthonormalBasis, ilr_matrix
from .composition import Composition
from .errors import DataError

# Rows whose parts sum within this relative distance of the total are
# re-closed (device rounding); larger deviations are rejected outright.
RECLOSE_RTOL = 0.005


@dataclass(frozen=True)
class IngestReport:
    """Row-level accounting of the ingest screening pass."""

    n_input: int
    n_kept: int
    dropped_nonpositive_part: int
    dropped_missing: int
    rejected_sum: int
    reclosed: int

    def lines(self) -> list[str]:
        out = []
        if self.dropped_nonpositive_part:
            out.append(f"{self.dropped_nonpositive_part} row(s) dropped (zero/negative part)")
        if self.dropped_missing:
            out.append(f"{self.dropped_missing} row(s) dropped (missing values)")
        if self.rejected_sum:
            out.append(
                f"{self.rejected_sum} row(s) rejected (part sum off total by more "
                f"than {RECLOSE_RTOL:.1%})"
            )
        if self.reclosed:
            out.append(f"warning: {self.reclosed} row(s) re-closed to the total (within {RECLOSE_RTOL:.1%})")
        out.append(f"kept {self.n_kept} of {self.n_input} row(s)")
        return out


@dataclass(frozen=True)
class LongTable:
    """Screened long-format observations.

    ``parts`` is the (N, D) matrix of strictly positive part values, each
    row summing to ``total``.  ``cluster_index`` maps rows to a contiguous
    0..J-1 index; ``cluster_labels`` keeps the original identifiers in
    index order.
    """

    parts: np.ndarray
    outcome: np.ndarray
    cluster_index: np.ndarray
    cluster_labels: tuple
    part_names: tuple[str, ...]
    total: float
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    report: IngestReport | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("parts", "outcome", "cluster_index"):
            arr = getattr(self, name)
            arr.flags.writeable = False
        if self.covariates is not None:
            self.covariates.flags.writeable = False

    @property
    def n_rows(self) -> int:
        return self.parts.shape[0]

    @property
    def n_parts(self) -> int:
        return self.parts.shape[1]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_index, minlength=self.n_clusters)

    def row_composition(self, i: int) -> Composition:
        return Composition(self.parts[i].copy(), self.total)


@dataclass(frozen=True)
class DecomposedCoords:
    """Total, between- and within-cluster ilr coordinates of a table.

    ``z_total[i] == z_between[cluster_index[i]] + z_within[i]`` by
    construction.  ``x_between`` holds the closed cluster-mean parts.
    """

    z_total: np.ndarray
    z_between: np.ndarray
    z_within: np.ndarray
    x_between: np.ndarray
    cluster_index: np.ndarray
    basis: OrthonormalBasis
    total: float

    def __post_init__(self):
        for name in ("z_total", "z_between", "z_within", "x_between"):
            getattr(self, name).flags.writeable = False

    @property
    def n_coords(self) -> int:
        return self.z_total.shape[1]


def from_arrays(
    parts,
    outcome,
    cluster_ids,
    part_names,
    total: float,
    covariates=None,
    covariate_names=(),
    report: IngestReport | None = None,
) -> LongTable:
    """Assemble a LongTable from pre-screened arrays, validating each row."""
    parts = np.ascontiguousarray(parts, dtype=float)
    outcome = np.asarray(outcome, dtype=float)
    cluster_ids = np.asarray(cluster_ids)
    if parts.ndim != 2 or parts.shape[1] < 2:
        raise DataError("parts must be an (N, D) matrix with D >= 2")
    n = parts.shape[0]
    if outcome.shape != (n,) or cluster_ids.shape != (n,):
        raise DataError("parts, outcome and cluster ids must have matching row counts")
    if n == 0:
        raise DataError("table is empty")
    if not np.all(np.isfinite(parts)) or np.any(parts <= 0):
        raise DataError("all parts must be finite and strictly positive")
    if not np.all(np.isfinite(outcome)):
        raise DataError("all outcome values must be finite")
    sums = parts.sum(axis=1)
    if np.any(np.abs(sums - total) > 1e-9 * total):
        raise DataError("every row's parts must sum to the total")

    labels, index = np.unique(cluster_ids, return_inverse=True)
    part_names = tuple(str(p) for p in part_names)
    if len(part_names) != parts.shape[1]:
        raise DataError(f"expected {parts.shape[1]} part names, got {len(part_names)}")
    if covariates is not None:
        covariates = np.ascontiguousarray(covariates, dtype=float)
        if covariates.ndim != 2 or covariates.shape[0] != n:
            raise DataError("covariates must be an (N, C) matrix aligned with rows")
        if not np.all(np.isfinite(covariates)):
            raise DataError("covariates must be finite")
        covariate_names = tuple(str(c) for c in covariate_names)
        if len(covariate_names) != covariates.shape[1]:
            raise DataError("covariate names must match covariate columns")
    return LongTable(
        parts=parts,
        outcome=outcome,
        cluster_index=index.astype(np.int64),
        cluster_labels=tuple(labels.tolist()),
        part_names=part_names,
        total=float(total),
        covariates=covariates,
        covariate_names=tuple(covariate_names),
        report=report,
    )


def ingest(
    records: pd.DataFrame,
    id_column: str,
    part_columns,
    outcome_column: str,
    total: float,
    covariate_columns=(),
) -> LongTable:
    """Screen a raw table into a LongTable.

    Rows with zero, negative or missing parts, or a missing outcome, are
    dropped and counted.  Rows whose parts sum within 0.5% of ``total``
    are re-closed (with a warning in the report); rows further off are
    rejected.  Raises if named columns are missing, fewer than two part
    columns are given, or nothing survives screening.
    """
    part_columns = list(part_columns)
    covariate_columns = list(covariate_columns)
    if len(part_columns) < 2:
        raise DataError("need at least 2 part columns")
    needed = [id_column, outcome_column, *part_columns, *covariate_columns]
    missing = [c for c in needed if c not in records.columns]
    if missing:
        raise DataError(f"unknown column(s): {', '.join(missing)}")
    if not (np.isfinite(total) and total > 0):
        raise DataError("total must be a positive finite number")

    n_input = len(records)

    def _numeric(columns):
        return np.column_stack(
            [pd.to_numeric(records[c], errors="coerce").to_numpy(dtype=float) for c in columns]
        )

    parts = _numeric(part_columns)
    outcome = pd.to_numeric(records[outcome_column], errors="coerce").to_numpy(dtype=float)
    covs = _numeric(covariate_columns) if covariate_columns else None

    finite_parts = np.isfinite(parts).all(axis=1)
    positive = finite_parts & (np.nan_to_num(parts, nan=-1.0) > 0).all(axis=1)
    bad_part = finite_parts & ~positive
    missing_part = ~finite_parts
    ok_outcome = np.isfinite(outcome)
    ok_covs = np.ones(n_input, dtype=bool) if covs is None else np.isfinite(covs).all(axis=1)

    keep = positive & ok_outcome & ok_covs
    dropped_nonpositive = int(bad_part.sum())
    dropped_missing = int((missing_part | ((~ok_outcome | ~ok_covs) & ~bad_part & ~missing_part)).sum())

    sums = parts.sum(axis=1, where=np.isfinite(parts))
    rel_off = np.abs(sums - total) / total
    exact = rel_off <= 1e-9
    reclosable = (rel_off > 1e-9) & (rel_off <= RECLOSE_RTOL)
    keep_sum = keep & (exact | reclosable)
    rejected_sum = int((keep & ~exact & ~reclosable).sum())
    reclosed = int((keep & reclosable).sum())

    if not keep_sum.any():
        raise DataError("no rows left after screening")

    parts = parts[keep_sum]
    parts = parts * (total / parts.sum(axis=1, keepdims=True))
    report = IngestReport(
        n_input=n_input,
        n_kept=int(keep_sum.sum()),
        dropped_nonpositive_part=dropped_nonpositive,
        dropped_missing=dropped_missing,
        rejected_sum=rejected_sum,
        reclosed=reclosed,
    )
    return from_arrays(
        parts=parts,
        outcome=outcome[keep_sum],
        cluster_ids=records[id_column].to_numpy()[keep_sum],
        part_names=part_columns,
        total=total,
        covariates=None if covs is None else covs[keep_sum],
        covariate_names=covariate_columns,
        report=report,
    )


def between_within_split(table: LongTable, basis: OrthonormalBasis) -> DecomposedCoords:
    """Decompose every row into between- and within-cluster coordinates.

    The between composition of cluster j is the closed per-part geometric
    mean of its rows; its ilr coordinates equal the arithmetic mean of the
    rows' total coordinates.  Within coordinates are the exact differences
    ``z_total - z_between``, so single-row clusters get zero deviates and
    per-cluster means of the deviates vanish.
    """
    if table.n_parts != basis.n_parts:
        raise DataError(
            f"basis has {basis.n_parts} parts but table has {table.n_parts}"
        )
    z_total = ilr_matrix(table.parts, basis)
    n_clusters = table.n_clusters
    sizes = table.cluster_sizes.astype(float)

    log_parts = np.log(table.parts)
    log_means = np.zeros((n_clusters, table.n_parts))
    for d in range(table.n_parts):
        log_means[:, d] = np.bincount(
            table.cluster_index, weights=log_parts[:, d], minlength=n_clusters
        )
    log_means /= sizes[:, None]
    raw = np.exp(log_means)
    x_between = raw * (table.total / raw.sum(axis=1, keepdims=True))
    z_between = ilr_matrix(x_between, basis)
    z_within = z_total - z_between[table.cluster_index]
    return DecomposedCoords(
        z_total=z_total,
        z_between=z_between,
        z_within=z_within,
        x_between=x_between,
        cluster_index=table.cluster_index,
        basis=basis,
        total=table.total,
    )


def coordinates_of(x: Composition, reference_between: Composition, basis: OrthonormalBasis):
    """Split one composition against a chosen between-level reference.

    Returns ``(z_between, z_within)`` with ``z_within`` defined as the
    exact difference ``ilr(x) - ilr(reference_between)``.
    """
    if x.n_parts != basis.n_parts or reference_between.n_parts != basis.n_parts:
        raise DataError("composition, reference and basis dimensions must match")
    z = np.log(x.parts) @ basis.contrast
    z_b = np.log(reference_between.parts) @ basis.contrast
    return z_b, z - z_b
