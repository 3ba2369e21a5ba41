"""Random-intercept linear model with between/within compositional predictors.

The outcome is modelled as

    y_ij ~ Normal(mu_ij, sigma_eps^2)
    mu_ij = gamma0 + sum_k beta_k zb_kj + sum_k beta_(k+D-1) zw_kij
            [+ covariate terms] + u_j
    u_j ~ Normal(0, sigma_u^2)

with a student-t prior on the intercept, flat (improper uniform) priors on
all slope coefficients and half student-t priors on both standard
deviations.  Fitting uses the package's dynamic HMC sampler on the
unconstrained scale (log for standard deviations), with a non-centered
parameterization of the cluster intercepts by default and a centered
option for strong-likelihood regimes.

Chains are independent given the master seed: per-chain generators are
spawned from a single seed sequence, so the number of chains never
perturbs another chain's stream.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .basis import OrthonormalBasis
from .data import DecomposedCoords, LongTable
from .errors import DataError, DesignError, SamplingError
from .hmc import ChainResult, run_chain
from .posterior import PosteriorDraws


@dataclass(frozen=True)
class StudentT:
    nu: float
    loc: float
    scale: float

    def __post_init__(self):
        if not (self.nu > 0 and self.scale > 0):
            raise DataError("student-t prior needs nu > 0 and scale > 0")

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.loc) / self.scale
        c = (
            math.lgamma((self.nu + 1) / 2)
            - math.lgamma(self.nu / 2)
            - 0.5 * math.log(self.nu * math.pi)
            - math.log(self.scale)
        )
        return c - 0.5 * (self.nu + 1) * np.log1p(z * z / self.nu)


@dataclass(frozen=True)
class HalfStudentT:
    nu: float
    scale: float

    def __post_init__(self):
        if not (self.nu > 0 and self.scale > 0):
            raise DataError("half student-t prior needs nu > 0 and scale > 0")

    def logpdf(self, x):
        # density of |T| for x >= 0
        return math.log(2.0) + StudentT(self.nu, 0.0, self.scale).logpdf(x)


@dataclass(frozen=True)
class PriorSpec:
    """Priors for the model: slope coefficients are always flat."""

    intercept: StudentT
    sd_intercept: HalfStudentT
    sd_residual: HalfStudentT


def default_priors(outcome) -> PriorSpec:
    """Weakly informative defaults derived from the outcome.

    The intercept gets ``student_t(3, median(y), s)`` and both standard
    deviations ``half_student_t(3, s)``, where ``s`` is the larger of 2.5
    and the scaled median absolute deviation rounded to one decimal.
    """
    y = np.asarray(outcome, dtype=float)
    if y.size < 2:
        raise DataError("need at least 2 outcome values to derive priors")
    if np.all(y == y[0]):
        raise DataError("outcome is constant; prior scale would be zero")
    med = float(np.median(y))
    mad_scale = float(np.median(np.abs(y - med))) * 1.4826
    s = max(2.5, round(mad_scale, 1))
    return PriorSpec(
        intercept=StudentT(3.0, med, s),
        sd_intercept=HalfStudentT(3.0, s),
        sd_residual=HalfStudentT(3.0, s),
    )


@dataclass(frozen=True)
class ModelSpec:
    """What is being regressed on what (normal family, identity link)."""

    outcome: str
    n_parts: int
    basis: OrthonormalBasis
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_parts != self.basis.n_parts:
            raise DataError("model n_parts must match the basis")
        for c in self.covariates:
            if c in ("gamma0", "sigma_u", "sigma_eps") or c.startswith(("beta_b", "beta_w", "u[")):
                raise DataError(f"covariate name collides with a model parameter: {c}")

    @property
    def n_coords(self) -> int:
        return self.n_parts - 1

    @property
    def n_predictors(self) -> int:
        return 2 * self.n_coords + len(self.covariates)

    def coefficient_names(self) -> tuple[str, ...]:
        k = self.n_coords
        return (
            "gamma0",
            *[f"beta_b{i + 1}" for i in range(k)],
            *[f"beta_w{i + 1}" for i in range(k)],
            *self.covariates,
        )


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 500
    iterations: int = 2500
    seed: int = 0
    adapt_target: float = 0.8
    max_depth: int = 10
    parameterization: str = "noncentered"
    workers: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 1 or self.warmup < 0:
            raise DataError("chains and iterations must be >= 1, warmup >= 0")
        if not (0.0 < self.adapt_target < 1.0):
            raise DataError("adapt_target must be in (0, 1)")
        if self.parameterization not in ("noncentered", "centered"):
            raise DataError("parameterization must be 'noncentered' or 'centered'")
        if self.max_depth < 1 or self.workers < 1:
            raise DataError("max_depth and workers must be >= 1")


@dataclass(frozen=True)
class Design:
    """Fixed-effect matrix, outcome and cluster membership for one fit."""

    X: np.ndarray
    y: np.ndarray
    cluster_index: np.ndarray
    n_clusters: int
    column_names: tuple[str, ...]

    def __post_init__(self):
        self.X.flags.writeable = False
        self.y.flags.writeable = False
        self.cluster_index.flags.writeable = False

    @property
    def membership_matrix(self) -> np.ndarray:
        """Dense 0/1 cluster indicator matrix (one column per cluster)."""
        Z = np.zeros((self.y.size, self.n_clusters))
        Z[np.arange(self.y.size), self.cluster_index] = 1.0
        return Z


def build_design(coords: DecomposedCoords, table: LongTable, spec: ModelSpec) -> Design:
    """Assemble the fixed-effect matrix.

    Column order is fixed: intercept, between coordinates, within
    coordinates, covariates.  A rank-deficient matrix (constant or
    duplicated columns) raises :class:`DesignError`.
    """
    if coords.z_total.shape[0] != table.n_rows:
        raise DataError("coordinates and table are not row-aligned")
    if not np.array_equal(coords.cluster_index, table.cluster_index):
        raise DataError("coordinates and table disagree on cluster membership")
    if spec.n_coords != coords.n_coords:
        raise DataError("model spec and coordinates disagree on the number of parts")
    blocks = [
        np.ones((table.n_rows, 1)),
        coords.z_between[table.cluster_index],
        coords.z_within,
    ]
    if spec.covariates:
        if table.covariates is None:
            raise DataError("model spec names covariates but the table has none")
        idx = []
        for c in spec.covariates:
            if c not in table.covariate_names:
                raise DataError(f"unknown covariate: {c}")
            idx.append(table.covariate_names.index(c))
        blocks.append(table.covariates[:, idx])
    X = np.ascontiguousarray(np.hstack(blocks))
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DesignError(
            "design matrix is rank deficient (constant or collinear columns)"
        )
    return Design(
        X=X,
        y=table.outcome.copy(),
        cluster_index=table.cluster_index.copy(),
        n_clusters=table.n_clusters,
        column_names=("intercept",) + spec.coefficient_names()[1:],
    )


class _Density:
    """Log posterior density and gradient on the unconstrained scale.

    Layout: ``[b_0..b_{P-1}, log sigma_u, log sigma_eps, u_1..u_J]`` where
    the trailing block holds standardised deviates (non-centered) or the
    intercept offsets themselves (centered).  With ``fixed_sigma`` the two
    log-scale entries are dropped; this reduced model is used to validate
    the sampler against the conjugate closed form.
    """

    def __init__(self, design: Design, priors: PriorSpec, parameterization: str,
                 fixed_sigma=None):
        self.X = design.X
        self.XT = np.ascontiguousarray(design.X.T)
        self.y = design.y
        self.g = design.cluster_index
        self.n_clusters = design.n_clusters
        self.n_obs, self.n_coef = design.X.shape
        self.priors = priors
        self.noncentered = parameterization == "noncentered"
        self.fixed_sigma = None if fixed_sigma is None else (float(fixed_sigma[0]), float(fixed_sigma[1]))
        self.dim = self.n_coef + self.n_clusters + (0 if fixed_sigma else 2)

    def __call__(self, q):
        P, J, N = self.n_coef, self.n_clusters, self.n_obs
        pr = self.priors
        b = q[:P]
        if self.fixed_sigma is None:
            eta_u, eta_e = q[P], q[P + 1]
            if abs(eta_u) > 300.0 or abs(eta_e) > 300.0:
                # off the representable scale: treat as divergent, not overflow
                return -np.inf, np.zeros_like(q)
            u_block = q[P + 2 :]
            sigma_u = math.exp(eta_u)
            sig_e2 = math.exp(2.0 * eta_e)
        else:
            u_block = q[P:]
            sigma_u, sigma_e = self.fixed_sigma
            eta_u, eta_e = math.log(sigma_u), math.log(sigma_e)
            sig_e2 = sigma_e * sigma_e
        inv_var_e = 1.0 / sig_e2

        u = sigma_u * u_block if self.noncentered else u_block
        r = self.y - self.X @ b
        r -= u[self.g]
        ssr = float(r @ r)
        S = np.bincount(self.g, weights=r, minlength=J)

        grad = np.empty_like(q)
        grad[:P] = (self.XT @ r) * inv_var_e

        # intercept student-t prior
        db0 = b[0] - pr.intercept.loc
        nu_t, s_t = pr.intercept.nu, pr.intercept.scale
        grad[0] -= (nu_t + 1.0) * db0 / (nu_t * s_t * s_t + db0 * db0)
        lp = (
            -N * eta_e
            - 0.5 * ssr * inv_var_e
            - 0.5 * (nu_t + 1.0) * math.log1p(db0 * db0 / (nu_t * s_t * s_t))
        )

        if self.noncentered:
            lp -= 0.5 * float(u_block @ u_block)
            dlik_du_raw = (sigma_u * inv_var_e) * S
            grad[-J:] = dlik_du_raw - u_block
            dlik_deta_u = float(u_block @ S) * sigma_u * inv_var_e
        else:
            inv_var_u = math.exp(-2.0 * eta_u)
            uu = float(u_block @ u_block)
            lp -= J * eta_u + 0.5 * uu * inv_var_u
            grad[-J:] = S * inv_var_e - u_block * inv_var_u
            dlik_deta_u = -J + uu * inv_var_u

        if self.fixed_sigma is None:
            nu_u, s_u = pr.sd_intercept.nu, pr.sd_intercept.scale
            nu_e, s_e = pr.sd_residual.nu, pr.sd_residual.scale
            su2 = sigma_u * sigma_u
            lp += (
                -0.5 * (nu_u + 1.0) * math.log1p(su2 / (nu_u * s_u * s_u))
                + eta_u
                - 0.5 * (nu_e + 1.0) * math.log1p(sig_e2 / (nu_e * s_e * s_e))
                + eta_e
            )
            grad[P] = dlik_deta_u - (nu_u + 1.0) * su2 / (nu_u * s_u * s_u + su2) + 1.0
            grad[P + 1] = (
                -N + ssr * inv_var_e - (nu_e + 1.0) * sig_e2 / (nu_e * s_e * s_e + sig_e2) + 1.0
            )
        return lp, grad

    def constrain(self, draws_unc: np.ndarray) -> np.ndarray:
        """Map unconstrained draws to the reported scale.

        Output columns: coefficients, sigma_u, sigma_eps, u_1..u_J (the
        cluster intercept offsets, whichever parameterization was used).
        """
        P, J = self.n_coef, self.n_clusters
        n = draws_unc.shape[0]
        out = np.empty((n, P + 2 + J))
        out[:, :P] = draws_unc[:, :P]
        if self.fixed_sigma is None:
            sigma_u = np.exp(draws_unc[:, P])
            sigma_e = np.exp(draws_unc[:, P + 1])
            u_block = draws_unc[:, P + 2 :]
        else:
            sigma_u = np.full(n, self.fixed_sigma[0])
            sigma_e = np.full(n, self.fixed_sigma[1])
            u_block = draws_unc[:, P:]
        out[:, P] = sigma_u
        out[:, P + 1] = sigma_e
        out[:, P + 2 :] = sigma_u[:, None] * u_block if self.noncentered else u_block
        return out


def _scaled_log_prior(constrained: np.ndarray, n_coef: int, priors: PriorSpec) -> np.ndarray:
    """Joint log density of the power-scalable priors, per draw.

    Covers the intercept and both standard deviations; flat coefficient
    priors contribute a constant zero and the cluster-intercept prior is
    part of the hierarchy, so neither is scaled.
    """
    return (
        priors.intercept.logpdf(constrained[:, 0])
        + priors.sd_intercept.logpdf(constrained[:, n_coef])
        + priors.sd_residual.logpdf(constrained[:, n_coef + 1])
    )


def _run_one_chain(density, seed_seq, n_warmup, n_samples, target_accept, max_depth) -> ChainResult:
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    q0 = None
    for _ in range(100):
        cand = rng.uniform(-2.0, 2.0, size=density.dim)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lp, _ = density(cand)
        if np.isfinite(lp):
            q0 = cand
            break
    if q0 is None:
        raise SamplingError("could not find a finite starting point in 100 attempts")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return run_chain(
            density, q0, n_warmup, n_samples, rng,
            target_accept=target_accept, max_depth=max_depth,
        )


def fit(
    spec: ModelSpec,
    design: Design,
    priors: PriorSpec,
    cfg: SamplerConfig,
    fixed_sigma=None,
) -> PosteriorDraws:
    """Sample the posterior; deterministic given the seed and config."""
    if design.X.shape[1] != 1 + spec.n_predictors:
        raise DataError("design and model spec disagree on predictor count")
    density = _Density(design, priors, cfg.parameterization, fixed_sigma=fixed_sigma)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    args = [
        (density, s, cfg.warmup, cfg.iterations, cfg.adapt_target, cfg.max_depth)
        for s in seeds
    ]
    if cfg.workers > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.chains)) as pool:
            results = list(pool.map(_run_one_chain_star, args))
    else:
        results = [_run_one_chain(*a) for a in args]

    constrained = np.stack([density.constrain(r.draws) for r in results])
    log_prior = np.stack(
        [_scaled_log_prior(c, density.n_coef, priors) for c in constrained]
    )
    names = (
        *spec.coefficient_names(),
        "sigma_u",
        "sigma_eps",
        *[f"u[{j + 1}]" for j in range(design.n_clusters)],
    )
    return PosteriorDraws(
        names=names,
        draws=constrained,
        divergent=np.stack([r.divergent for r in results]),
        log_prior=log_prior,
        n_coords=spec.n_coords,
        n_covariates=len(spec.covariates),
        config=cfg,
        warmup_divergences=sum(r.n_warmup_divergent for r in results),
    )


def _run_one_chain_star(args):
    return _run_one_chain(*args)
