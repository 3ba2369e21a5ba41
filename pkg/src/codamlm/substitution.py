"""Posterior reallocation ("substitution") analysis.

After fitting, the interesting question is usually not the balance
coefficients themselves but what happens to the outcome when ``t`` units
(e.g. minutes) move from one part to another, everything else held fixed.
Starting from a reference composition (by default the sample's closed
geometric mean, where the within-level coordinates are exactly zero),
each ordered part pair and amount produces a reallocated composition; the
posterior difference between its predicted outcome and the reference's
is summarised per draw.

A between-level reallocation moves the cluster-level composition (the
within deviation stays at zero); a within-level reallocation keeps the
cluster level fixed and attributes the change to the within deviation.
Within-level changes are expressed in absolute units by default, like the
between level, so the two levels are directly comparable.  The
alternative ``proportional`` mode instead scales the two parts by
``1 - t`` and ``1 + t`` with ``t`` a fraction (0 < t < 1).

Per-(pair, amount) computations are independent and read-only over the
draws.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .basis import OrthonormalBasis, ilr
from .composition import Composition, closure
from .data import DecomposedCoords, LongTable, between_within_split
from .errors import DataError
from .posterior import PosteriorDraws, predict_expectation, summarize

LEVELS = ("between", "within")
WITHIN_MODES = ("absolute", "proportional")


@dataclass(frozen=True)
class ReferenceComposition:
    """A composition to reallocate around, with its between coordinates.

    At the reference the within-level coordinates are zero by definition.
    """

    composition: Composition
    z_between: np.ndarray
    basis: OrthonormalBasis
    provenance: str

    def __post_init__(self):
        self.z_between.flags.writeable = False


def reference(source, basis: OrthonormalBasis, provenance: str | None = None) -> ReferenceComposition:
    """Build the reference composition.

    ``source`` is a :class:`LongTable` or :class:`DecomposedCoords` (the
    closed geometric mean of the cluster-level compositions is used) or
    any user-supplied :class:`Composition`.
    """
    if isinstance(source, LongTable):
        source = between_within_split(source, basis)
    if isinstance(source, DecomposedCoords):
        comp = closure(np.exp(np.log(source.x_between).mean(axis=0)), source.total)
        provenance = provenance or "sample-mean"
    elif isinstance(source, Composition):
        comp = source
        provenance = provenance or "user-supplied"
    else:
        raise DataError("reference source must be a table, decomposition or composition")
    if comp.n_parts != basis.n_parts:
        raise DataError("reference composition and basis dimensions must match")
    return ReferenceComposition(
        composition=comp,
        z_between=ilr(comp, basis).values,
        basis=basis,
        provenance=provenance,
    )


def _resolve_part(ref: ReferenceComposition, part) -> int:
    if isinstance(part, str):
        try:
            return ref.basis.part_names.index(part)
        except ValueError:
            raise DataError(f"unknown part name: {part}") from None
    idx = int(part)
    if not 0 <= idx < ref.basis.n_parts:
        raise DataError(f"part index out of range: {part}")
    return idx


def _amount_bound(ref: ReferenceComposition, d: int, d_prime: int, within_mode: str, level: str) -> float:
    parts = ref.composition.parts
    if level == "within" and within_mode == "proportional":
        return 1.0
    return min(parts[d], ref.composition.total - parts[d_prime])


def reallocate(
    ref: ReferenceComposition,
    from_part,
    to_part,
    amount: float,
    level: str,
    within_mode: str = "absolute",
):
    """Move ``amount`` from one part to another at the chosen level.

    Returns ``(composition, z_between, z_within)`` for the reallocated
    state.  ``amount = 0`` is the no-op boundary; it reproduces the
    reference exactly.
    """
    if level not in LEVELS:
        raise DataError(f"level must be one of {LEVELS}")
    if within_mode not in WITHIN_MODES:
        raise DataError(f"within_mode must be one of {WITHIN_MODES}")
    d = _resolve_part(ref, from_part)
    d_prime = _resolve_part(ref, to_part)
    if d == d_prime:
        raise DataError("cannot reallocate a part onto itself")
    bound = _amount_bound(ref, d, d_prime, within_mode, level)
    if not (0.0 <= amount < bound):
        raise DataError(
            f"amount {amount} outside [0, {bound}) for "
            f"{ref.basis.part_names[d]} -> {ref.basis.part_names[d_prime]}"
        )

    parts = ref.composition.parts.copy()
    if level == "within" and within_mode == "proportional":
        parts[d] *= 1.0 - amount
        parts[d_prime] *= 1.0 + amount
        new = Composition(parts * (ref.composition.total / parts.sum()), ref.composition.total)
    else:
        parts[d] -= amount
        parts[d_prime] += amount
        new = Composition(parts, ref.composition.total)

    z_new = ilr(new, ref.basis).values
    if level == "between":
        z_b, z_w = z_new, np.zeros_like(z_new)
    else:
        z_b, z_w = ref.z_between, z_new - ref.z_between
    return new, z_b, z_w


@dataclass(frozen=True)
class SubstitutionGrid:
    """Ordered part pairs, amounts and levels to evaluate.

    Every (pair, amount) must satisfy ``0 <= t < min(x_d, total - x_d')``
    at the reference (or ``t < 1`` for proportional within mode); the
    zero boundary is allowed as the no-op case.
    """

    pairs: tuple
    amounts: tuple
    levels: tuple
    within_mode: str = "absolute"

    def __post_init__(self):
        if not self.pairs or not self.amounts or not self.levels:
            raise DataError("substitution grid must not be empty")
        for level in self.levels:
            if level not in LEVELS:
                raise DataError(f"level must be one of {LEVELS}")
        if self.within_mode not in WITHIN_MODES:
            raise DataError(f"within_mode must be one of {WITHIN_MODES}")
        for d, d_prime in self.pairs:
            if d == d_prime:
                raise DataError("substitution pairs must have distinct parts")


def default_grid(
    ref: ReferenceComposition,
    amounts=None,
    levels=LEVELS,
    within_mode: str = "absolute",
) -> SubstitutionGrid:
    """All ordered part pairs; amounts default to 1..30 units.

    Amounts violating the reference's bound for some pair raise, so the
    grid is valid everywhere by construction.
    """
    if amounts is None:
        amounts = tuple(range(1, 31)) if within_mode == "absolute" else tuple(
            t / 30.0 for t in range(1, 31)
        )
    amounts = tuple(float(t) for t in amounts)
    pairs = tuple(
        (d, d_prime)
        for d, d_prime in itertools.permutations(range(ref.basis.n_parts), 2)
    )
    grid = SubstitutionGrid(pairs=pairs, amounts=amounts, levels=tuple(levels), within_mode=within_mode)
    for (d, d_prime), t, level in itertools.product(grid.pairs, grid.amounts, grid.levels):
        bound = _amount_bound(ref, d, d_prime, within_mode, level)
        if not (0.0 <= t < bound):
            raise DataError(
                f"amount {t} is infeasible for pair "
                f"{ref.basis.part_names[d]} -> {ref.basis.part_names[d_prime]}"
            )
    return grid


@dataclass(frozen=True)
class SubstitutionRow:
    level: str
    from_part: str
    to_part: str
    amount: float
    mean: float
    ci_low: float
    ci_high: float
    significant: bool


@dataclass(frozen=True)
class SubstitutionResult:
    rows: tuple
    deltas: dict | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["level", "from_part", "to_part", "t", "mean", "ci_low", "ci_high", "significant"]
            )
            for row in self.rows:
                writer.writerow(
                    [
                        row.level,
                        row.from_part,
                        row.to_part,
                        repr(row.amount),
                        repr(row.mean),
                        repr(row.ci_low),
                        repr(row.ci_high),
                        int(row.significant),
                    ]
                )


def estimate_delta(
    draws: PosteriorDraws,
    grid: SubstitutionGrid,
    ref: ReferenceComposition,
    retain_draws: bool = False,
) -> SubstitutionResult:
    """Posterior outcome differences for every grid cell.

    Per draw, the difference between the prediction at the reallocated
    coordinates and at the reference; summaries use the 95% equal-tailed
    interval.  Covariates are held at the reference and cancel.
    """
    if draws.n_coords != ref.basis.n_coords:
        raise DataError(
            f"fitted model has {draws.n_coords} coordinates but the basis has {ref.basis.n_coords}"
        )
    z_w0 = np.zeros(ref.basis.n_coords)
    yhat_ref = predict_expectation(draws, ref.z_between, z_w0)
    names = ref.basis.part_names
    rows = []
    deltas = {} if retain_draws else None
    for level in grid.levels:
        for d, d_prime in grid.pairs:
            for t in grid.amounts:
                _, z_b, z_w = reallocate(
                    ref, d, d_prime, t, level, within_mode=grid.within_mode
                )
                delta = predict_expectation(draws, z_b, z_w) - yhat_ref
                s = summarize(delta)
                rows.append(
                    SubstitutionRow(
                        level=level,
                        from_part=names[d],
                        to_part=names[d_prime],
                        amount=float(t),
                        mean=s.mean,
                        ci_low=s.ci_low,
                        ci_high=s.ci_high,
                        significant=s.significant,
                    )
                )
                if retain_draws:
                    deltas[(level, names[d], names[d_prime], float(t))] = delta
    return SubstitutionResult(rows=tuple(rows), deltas=deltas)
