"""Posterior draw store, prediction and summaries.

Draws are kept as an immutable (chains, iterations, parameters) array on
the constrained scale, together with per-iteration divergence flags and
the log density of the power-scalable priors.  Everything downstream
(prediction, substitution, diagnostics) reads from this store.

The on-disk format is a long CSV with columns chain, iteration,
parameter, value; the per-iteration divergence flag and scaled-prior log
density travel as the pseudo-parameters ``divergent__`` and
``log_prior__``.  Floats are written with ``repr`` so a round trip is
bit-exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class PosteriorDraws:
    """Sampled posterior with its parameter registry.

    ``names`` orders the parameters: intercept, between coefficients,
    within coefficients, covariate coefficients, sigma_u, sigma_eps and
    the cluster intercept offsets ``u[j]``.
    """

    names: tuple[str, ...]
    draws: np.ndarray          # (chains, iterations, parameters)
    divergent: np.ndarray      # (chains, iterations)
    log_prior: np.ndarray      # (chains, iterations)
    n_coords: int
    n_covariates: int = 0
    config: object = None
    warmup_divergences: int = 0
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise DataError("draws must be (chains, iterations, parameters)")
        if self.divergent.shape != self.draws.shape[:2]:
            raise DataError("divergence flags must be (chains, iterations)")
        sig = self.draws[:, :, self.sigma_slice]
        if not np.all(sig > 0):
            raise DataError("standard deviation draws must be strictly positive")
        for arr in (self.draws, self.divergent, self.log_prior):
            arr.flags.writeable = False
        self._index.update({name: i for i, name in enumerate(self.names)})

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iterations(self) -> int:
        return self.draws.shape[1]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    @property
    def n_coefficients(self) -> int:
        return 1 + 2 * self.n_coords + self.n_covariates

    @property
    def sigma_slice(self) -> slice:
        return slice(self.n_coefficients, self.n_coefficients + 2)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown parameter: {name}") from None

    def parameter(self, name: str) -> np.ndarray:
        """Draws of one parameter, shaped (chains, iterations)."""
        return self.draws[:, :, self.index(name)]

    def flat(self, name: str) -> np.ndarray:
        """Draws of one parameter flattened across chains."""
        return self.parameter(name).reshape(-1)

    @property
    def gamma0(self) -> np.ndarray:
        return self.draws[:, :, 0].reshape(-1)

    @property
    def beta_between(self) -> np.ndarray:
        """(n_draws, D-1) between-level coefficients."""
        return self.draws[:, :, 1 : 1 + self.n_coords].reshape(-1, self.n_coords)

    @property
    def beta_within(self) -> np.ndarray:
        """(n_draws, D-1) within-level coefficients."""
        k = self.n_coords
        return self.draws[:, :, 1 + k : 1 + 2 * k].reshape(-1, k)

    @property
    def covariate_coefficients(self) -> np.ndarray:
        k = self.n_coefficients
        return self.draws[:, :, 1 + 2 * self.n_coords : k].reshape(-1, self.n_covariates)

    @property
    def flat_log_prior(self) -> np.ndarray:
        return self.log_prior.reshape(-1)


def predict_expectation(draws: PosteriorDraws, z_between, z_within, covariates=None) -> np.ndarray:
    """Population-level expected outcome per draw at given coordinates.

    Uses the fixed intercept (no cluster offset): ``gamma0 + beta_b @ z_b
    + beta_w @ z_w`` plus covariate terms when supplied.
    """
    z_b = np.asarray(z_between, dtype=float)
    z_w = np.asarray(z_within, dtype=float)
    if z_b.shape != (draws.n_coords,) or z_w.shape != (draws.n_coords,):
        raise DataError(f"expected {draws.n_coords} between and within coordinates")
    out = draws.gamma0 + draws.beta_between @ z_b + draws.beta_within @ z_w
    if draws.n_covariates:
        cov = np.zeros(draws.n_covariates) if covariates is None else np.asarray(covariates, dtype=float)
        if cov.shape != (draws.n_covariates,):
            raise DataError(f"expected {draws.n_covariates} covariate values")
        out = out + draws.covariate_coefficients @ cov
    elif covariates is not None and np.size(covariates):
        raise DataError("model has no covariates")
    return out


@dataclass(frozen=True)
class Summary:
    mean: float
    median: float
    ci_low: float
    ci_high: float
    significant: bool


def summarize(values, parameter: str | None = None) -> Summary:
    """Posterior mean, median and 95% equal-tailed credible interval.

    ``values`` is either a vector of per-draw values of any derived
    quantity, or a :class:`PosteriorDraws` together with a parameter name.
    The significance flag is set when the interval excludes zero.
    """
    if isinstance(values, PosteriorDraws):
        if parameter is None:
            raise DataError("a parameter name is required when summarising a draw store")
        values = values.flat(parameter)
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 100:
        raise DataError("need at least 100 draws to summarise")
    lo, hi = np.quantile(values, (0.025, 0.975))
    return Summary(
        mean=float(values.mean()),
        median=float(np.median(values)),
        ci_low=float(lo),
        ci_high=float(hi),
        significant=bool(lo > 0.0 or hi < 0.0),
    )


def draws_to_csv(draws: PosteriorDraws, path) -> None:
    """Write the long-format draws CSV (bit-exact round trip via repr)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iteration", "parameter", "value"])
        for c in range(draws.n_chains):
            for t in range(draws.n_iterations):
                row_vals = draws.draws[c, t]
                for name, value in zip(draws.names, row_vals):
                    writer.writerow([c + 1, t + 1, name, repr(float(value))])
                writer.writerow([c + 1, t + 1, "divergent__", int(draws.divergent[c, t])])
                writer.writerow([c + 1, t + 1, "log_prior__", repr(float(draws.log_prior[c, t]))])


def draws_from_csv(path) -> PosteriorDraws:
    """Rebuild a draw store from the long CSV written by `draws_to_csv`."""
    path = Path(path)
    names: list[str] = []
    values: dict[str, list[float]] = {}
    chains_seen: set[int] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["chain", "iteration", "parameter", "value"]:
            raise DataError(f"{path} is not a draws CSV")
        for chain, _iteration, parameter, value in reader:
            chains_seen.add(int(chain))
            if parameter not in values:
                values[parameter] = []
                if not parameter.endswith("__"):
                    names.append(parameter)
            values[parameter].append(float(value))
    if not names:
        raise DataError(f"{path} contains no parameters")
    n_chains = len(chains_seen)
    n_total = len(values[names[0]])
    if n_total % n_chains != 0:
        raise DataError(f"{path} has unequal chain lengths")
    n_iter = n_total // n_chains

    def reshape(name):
        return np.asarray(values[name], dtype=float).reshape(n_chains, n_iter)

    draws = np.stack([reshape(n) for n in names], axis=2)
    divergent = (
        reshape("divergent__").astype(bool)
        if "divergent__" in values
        else np.zeros((n_chains, n_iter), dtype=bool)
    )
    log_prior = (
        reshape("log_prior__") if "log_prior__" in values else np.zeros((n_chains, n_iter))
    )
    n_coords = sum(1 for n in names if n.startswith("beta_b"))
    n_cov = len(names) - (1 + 2 * n_coords + 2) - sum(1 for n in names if n.startswith("u["))
    return PosteriorDraws(
        names=tuple(names),
        draws=draws,
        divergent=divergent,
        log_prior=log_prior,
        n_coords=n_coords,
        n_covariates=n_cov,
    )
