"""Simplex operations for compositional data.

A composition is a vector of ``D`` strictly positive parts constrained to
sum to a constant total ``kappa`` (e.g. 1440 minutes in a day).  The usual
vector operations do not respect that constraint; the operations here do:
closure, perturbation (the simplex analogue of addition), powering (scalar
multiplication) and the Aitchison inner product.

All functions are pure and operate on immutable :class:`Composition`
values, so they are safe to call concurrently.  Zeros are rejected, never
imputed: every operation requires strictly positive parts because the
downstream log-ratio transforms are undefined otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

# Relative tolerance for the sum-to-total invariant; algebraic identities
# (commutativity, distributivity, ...) hold to ~1e-10 in double precision.
SUM_RTOL = 1e-9


@dataclass(frozen=True)
class Composition:
    """A D-part strictly positive vector summing to ``total``.

    Parameters
    ----------
    parts : ndarray
        The D part values, in user units (e.g. minutes).  Part order is
        significant and preserved; no canonical sorting is applied.
    total : float
        The constant-sum constraint the parts satisfy.
    """

    parts: np.ndarray
    total: float

    def __post_init__(self):
        parts = np.asarray(self.parts, dtype=float)
        object.__setattr__(self, "parts", parts)
        object.__setattr__(self, "total", float(self.total))
        if parts.ndim != 1 or parts.size < 2:
            raise DataError("a composition needs at least 2 parts in a 1-d vector")
        if not np.all(np.isfinite(parts)):
            raise DataError("composition parts must be finite")
        if np.any(parts <= 0):
            raise DataError("composition parts must be strictly positive (zeros are rejected, not imputed)")
        if not (np.isfinite(self.total) and self.total > 0):
            raise DataError("composition total must be a positive finite number")
        s = parts.sum()
        if abs(s - self.total) > SUM_RTOL * self.total:
            raise DataError(
                f"parts sum to {s!r}, expected total {self.total!r} "
                f"(relative tolerance {SUM_RTOL})"
            )
        parts.flags.writeable = False

    @property
    def n_parts(self) -> int:
        return self.parts.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Composition):
            return NotImplemented
        return self.total == other.total and np.array_equal(self.parts, other.parts)


def closure(raw, total: float) -> Composition:
    """Rescale a positive vector so its parts sum to ``total``.

    Closure is idempotent and scale invariant: ``closure(lam * raw, total)``
    equals ``closure(raw, total)`` for any ``lam > 0``.

    Raises
    ------
    DataError
        If any entry is non-positive or non-finite (no imputation is
        attempted) or if the input is empty.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1 or raw.size == 0:
        raise DataError("closure expects a non-empty 1-d vector")
    if not np.all(np.isfinite(raw)):
        raise DataError("closure input must be finite")
    if np.any(raw <= 0):
        raise DataError("closure input must be strictly positive (zeros are rejected, not imputed)")
    if not (np.isfinite(total) and total > 0):
        raise DataError("closure total must be a positive finite number")
    return Composition(raw * (total / raw.sum()), total)


def neutral(n_parts: int, total: float) -> Composition:
    """The neutral element for perturbation: all parts equal ``total / D``."""
    if n_parts < 2:
        raise DataError("a composition needs at least 2 parts")
    return Composition(np.full(n_parts, total / n_parts), total)


def _check_pair(x: Composition, y: Composition) -> None:
    if x.n_parts != y.n_parts:
        raise DataError(f"dimension mismatch: {x.n_parts} vs {y.n_parts} parts")
    if x.total != y.total:
        raise DataError(f"total mismatch: {x.total!r} vs {y.total!r}")


def perturb(x: Composition, y: Composition) -> Composition:
    """Simplex addition: the closure of the element-wise product.

    Commutative and associative; ``neutral(D, total)`` is the identity and
    ``power(x, -1)`` the inverse.
    """
    _check_pair(x, y)
    return closure(x.parts * y.parts, x.total)


def power(x: Composition, alpha: float) -> Composition:
    """Simplex scalar multiplication: the closure of the element-wise power.

    ``power(x, 1)`` is ``x``, ``power(x, 0)`` the neutral element and
    ``power(x, -1)`` the perturbation inverse of ``x``.
    """
    if not np.isfinite(alpha):
        raise DataError("power exponent must be finite")
    # Work in log space so large exponents cannot overflow before closure.
    logs = alpha * np.log(x.parts)
    return closure(np.exp(logs - logs.max()), x.total)


def _clr(parts: np.ndarray) -> np.ndarray:
    logs = np.log(parts)
    return logs - logs.mean()


def inner_product(x: Composition, y: Composition) -> float:
    """Aitchison inner product of two compositions.

    Computed as the dot product of centred log-ratios, which agrees with
    the pairwise log-ratio form to ~1e-10 and makes the ilr transform an
    isometry.
    """
    _check_pair(x, y)
    return float(_clr(x.parts) @ _clr(y.parts))


def geometric_mean_composition(xs) -> Composition:
    """Compositional mean: the closed vector of per-part geometric means."""
    xs = list(xs)
    if not xs:
        raise DataError("cannot average an empty list of compositions")
    first = xs[0]
    for x in xs[1:]:
        _check_pair(first, x)
    log_parts = np.stack([np.log(x.parts) for x in xs])
    return closure(np.exp(log_parts.mean(axis=0)), first.total)
