"""Sequential binary partitions, orthonormal bases and the ilr transform.

A sequential binary partition (SBP) is a ``D x (D-1)`` sign matrix: the
first column splits all parts into a ``+1`` and a ``-1`` group, and every
later column splits exactly one group produced by the earlier columns.
Each column induces one balance between its two groups; the resulting
``D x (D-1)`` contrast matrix is orthonormal and defines the isometric
log-ratio (ilr) coordinates.

The transform is computed through the contrast matrix (one matrix product
on log parts) rather than the equivalent geometric-mean quotient form; the
quotient form is retained by the test-suite as an independent oracle.

Basis objects are immutable and can be shared read-only across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .composition import Composition, closure
from .errors import DataError


@dataclass(frozen=True)
class SBP:
    """A validated sequential binary partition.

    ``matrix`` has one row per part and one column per balance, with
    entries in ``{-1, 0, +1}``.  ``part_names`` are carried through to
    outputs so results report named parts, not indices.
    """

    matrix: np.ndarray
    part_names: tuple[str, ...]

    @property
    def n_parts(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class OrthonormalBasis:
    """Contrast matrix of an SBP together with its group sizes.

    Column ``k`` of ``contrast`` holds ``sqrt(s_k / (r_k (r_k + s_k)))``
    on the ``r_k`` parts coded ``+1``, ``-sqrt(r_k / (s_k (r_k + s_k)))``
    on the ``s_k`` parts coded ``-1`` and zero elsewhere.  Columns are
    orthonormal and sum to zero.
    """

    contrast: np.ndarray
    r: np.ndarray
    s: np.ndarray
    part_names: tuple[str, ...]

    @property
    def n_parts(self) -> int:
        return self.contrast.shape[0]

    @property
    def n_coords(self) -> int:
        return self.contrast.shape[1]


@dataclass(frozen=True)
class IlrCoords:
    """(D-1) real ilr coordinates of one composition in a given basis."""

    values: np.ndarray
    basis: OrthonormalBasis

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape != (self.basis.n_coords,):
            raise DataError(
                f"expected {self.basis.n_coords} coordinates, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("ilr coordinates must be finite")
        values.flags.writeable = False


def _default_names(n_parts: int) -> tuple[str, ...]:
    return tuple(f"part{i + 1}" for i in range(n_parts))


def validate_sbp(matrix, part_names=None) -> SBP:
    """Check the recursive-partition rules and return a validated SBP.

    Every column must split exactly one group produced by the previous
    columns into two non-empty sign groups; the first column therefore has
    no zeros, and after ``D - 1`` columns every part is isolated.
    """
    matrix = np.asarray(matrix, dtype=int)
    if matrix.ndim != 2:
        raise DataError("SBP must be a 2-d matrix")
    n_parts, n_cols = matrix.shape
    if n_parts < 2:
        raise DataError("SBP needs at least 2 parts")
    if n_cols != n_parts - 1:
        raise DataError(f"SBP for {n_parts} parts must have {n_parts - 1} columns, got {n_cols}")
    if not np.isin(matrix, (-1, 0, 1)).all():
        raise DataError("SBP entries must be -1, 0 or +1")

    if part_names is None:
        part_names = _default_names(n_parts)
    else:
        part_names = tuple(str(n) for n in part_names)
        if len(part_names) != n_parts:
            raise DataError(f"expected {n_parts} part names, got {len(part_names)}")

    # Groups still awaiting a split; a valid SBP consumes one per column.
    open_groups = [frozenset(range(n_parts))]
    for k in range(n_cols):
        col = matrix[:, k]
        plus = frozenset(np.flatnonzero(col == 1))
        minus = frozenset(np.flatnonzero(col == -1))
        if not plus or not minus:
            raise DataError(f"SBP column {k + 1} must have non-empty +1 and -1 groups")
        support = plus | minus
        try:
            open_groups.remove(support)
        except ValueError:
            raise DataError(
                f"SBP column {k + 1} splits parts that are not a single group "
                "produced by the earlier columns"
            ) from None
        for group in (plus, minus):
            if len(group) > 1:
                open_groups.append(group)
    if open_groups:
        raise DataError("SBP leaves some parts never isolated")
    return SBP(matrix=matrix, part_names=part_names)


def default_sbp(n_parts: int, part_names=None) -> SBP:
    """Pivot-style SBP: part 1 vs the rest, part 2 vs the rest, and so on.

    Deterministic for a fixed D.  The choice is arbitrary: substitution
    results do not depend on which valid SBP is used.
    """
    if n_parts < 2:
        raise DataError("an SBP needs at least 2 parts")
    matrix = np.zeros((n_parts, n_parts - 1), dtype=int)
    for k in range(n_parts - 1):
        matrix[k, k] = 1
        matrix[k + 1 :, k] = -1
    return validate_sbp(matrix, part_names)


def build_basis(sbp: SBP) -> OrthonormalBasis:
    """Build the orthonormal contrast matrix induced by an SBP."""
    matrix = sbp.matrix
    n_parts, n_cols = matrix.shape
    contrast = np.zeros((n_parts, n_cols))
    r = np.zeros(n_cols, dtype=int)
    s = np.zeros(n_cols, dtype=int)
    for k in range(n_cols):
        col = matrix[:, k]
        rk = int(np.sum(col == 1))
        sk = int(np.sum(col == -1))
        r[k], s[k] = rk, sk
        a = np.sqrt(sk / (rk * (rk + sk)))
        b = -np.sqrt(rk / (sk * (rk + sk)))
        contrast[col == 1, k] = a
        contrast[col == -1, k] = b
    r.flags.writeable = False
    s.flags.writeable = False
    contrast.flags.writeable = False
    return OrthonormalBasis(contrast=contrast, r=r, s=s, part_names=sbp.part_names)


def ilr(x: Composition, basis: OrthonormalBasis) -> IlrCoords:
    """Forward ilr transform of one composition."""
    if x.n_parts != basis.n_parts:
        raise DataError(f"dimension mismatch: composition has {x.n_parts} parts, basis {basis.n_parts}")
    return IlrCoords(values=np.log(x.parts) @ basis.contrast, basis=basis)


def ilr_inverse(values, basis: OrthonormalBasis, total: float) -> Composition:
    """Back-transform ilr coordinates to a composition summing to ``total``."""
    values = np.asarray(values, dtype=float)
    if values.shape != (basis.n_coords,):
        raise DataError(f"expected {basis.n_coords} coordinates, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DataError("ilr coordinates must be finite")
    logs = basis.contrast @ values
    return closure(np.exp(logs - logs.max()), total)


def ilr_matrix(parts: np.ndarray, basis: OrthonormalBasis) -> np.ndarray:
    """Row-wise forward transform of an ``(n, D)`` matrix of positive parts."""
    parts = np.asarray(parts, dtype=float)
    if parts.ndim != 2 or parts.shape[1] != basis.n_parts:
        raise DataError(f"expected an (n, {basis.n_parts}) parts matrix, got shape {parts.shape}")
    return np.log(parts) @ basis.contrast


def ilr_inverse_matrix(values: np.ndarray, basis: OrthonormalBasis, total: float) -> np.ndarray:
    """Row-wise back-transform of ``(n, D-1)`` coordinates to closed parts."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] != basis.n_coords:
        raise DataError(f"expected an (n, {basis.n_coords}) coordinate matrix, got shape {values.shape}")
    logs = values @ basis.contrast.T
    logs -= logs.max(axis=1, keepdims=True)
    raw = np.exp(logs)
    return raw * (total / raw.sum(axis=1, keepdims=True))


def read_sbp(path, part_names=None) -> SBP:
    """Read an SBP from a plain-text matrix file.

    The file holds D rows of D-1 whitespace- or comma-separated entries
    from ``{-1, 0, 1}``.  An optional first line may carry the D part
    names instead (any token that is not a valid entry marks it as a
    header).
    """
    lines = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            lines.append(line.replace(",", " ").split())
    if not lines:
        raise DataError(f"SBP file {path} is empty")

    names = part_names
    if any(tok not in ("-1", "0", "1", "+1") for tok in lines[0]):
        header = tuple(lines[0])
        lines = lines[1:]
        if names is None:
            names = header
    if len({len(row) for row in lines}) != 1:
        raise DataError(f"SBP file {path} rows have unequal lengths")
    try:
        matrix = np.array([[int(tok) for tok in row] for row in lines], dtype=int)
    except ValueError as exc:
        raise DataError(f"SBP file {path} has non-integer entries: {exc}") from None
    return validate_sbp(matrix, names)
