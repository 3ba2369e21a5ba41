"""Convergence and prior-sensitivity diagnostics.

R-hat is the split-chain, rank-normalized potential scale reduction
factor; effective sample sizes are estimated from rank-normalized draws
(bulk) and from 5%/95% quantile indicator sequences (tail), both using
per-chain autocorrelations summed with Geyer's initial monotone sequence.
Draws that are constant across all chains make these undefined and are
reported as not-applicable (NaN).

Prior sensitivity follows the power-scaling approach: the recorded prior
log density is raised to ``alpha - 1`` to form importance weights, and
the index is the cumulative Jensen-Shannon distance between the base and
perturbed weighted draw distributions, averaged over the weakened
(alpha = 0.5) and strengthened (alpha = 2) directions.  An index above
0.05 flags an informative prior.  Instead of smoothing the importance
weights, a degeneracy guard marks the index unreliable when the
effective number of weights collapses.

All functions are pure and operate per parameter, so they can be applied
concurrently across a draw store.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .errors import DataError
from .posterior import PosteriorDraws

RHAT_THRESHOLD = 1.05
ESS_THRESHOLD = 400.0
SENSITIVITY_THRESHOLD = 0.05
# alpha = 0.5 weakens the prior, alpha = 2 strengthens it
DEFAULT_ALPHAS = (0.5, 2.0)


def _as_chain_matrix(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DataError("draws must be a (chains, iterations) matrix")
    if x.shape[1] < 4:
        raise DataError("need at least 4 iterations per chain")
    return x


def _split_halves(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half :]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    ranks = rankdata(x, method="average", axis=None).reshape(x.shape)
    return ndtri((ranks - 0.375) / (x.size + 0.25))


def _rhat_of(chains: np.ndarray) -> float:
    m, n = chains.shape
    chain_means = chains.mean(axis=1)
    within = chains.var(axis=1, ddof=1).mean()
    between = n * chain_means.var(ddof=1)
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def split_rhat(draws) -> float:
    """Rank-normalized split R-hat; NaN when all draws are identical."""
    x = _as_chain_matrix(draws)
    if np.all(x == x.flat[0]):
        return float("nan")
    return _rhat_of(_rank_normalize(_split_halves(x)))


def _autocov(chains: np.ndarray) -> np.ndarray:
    """Per-chain autocovariance (biased normalization) via FFT."""
    m, n = chains.shape
    centered = chains - chains.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n]
    return acov / n


def _ess_of(chains: np.ndarray) -> float:
    """Effective sample size via Geyer's initial monotone sequence."""
    m, n = chains.shape
    total = m * n
    acov = _autocov(chains)
    within = (acov[:, 0] * n / (n - 1)).mean()
    if within == 0.0:
        return float("nan")
    chain_means = chains.mean(axis=1)
    between = n * chain_means.var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * within + between / n

    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair the lags; keep the initial positive sequence, made monotone
    n_pairs = n // 2
    pair_sums = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    tau = 0.0
    running_min = np.inf
    for k in range(n_pairs):
        if pair_sums[k] <= 0.0:
            break
        running_min = min(running_min, pair_sums[k])
        tau += running_min
    tau = 2.0 * tau - 1.0
    if total >= 10:
        tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def ess(draws, kind: str = "bulk") -> float:
    """Bulk or tail effective sample size of one parameter's draws.

    Bulk ESS is computed on rank-normalized split chains; tail ESS is the
    smaller ESS of the 5% and 95% quantile indicator sequences.  Constant
    draws yield NaN (not applicable).
    """
    if kind not in ("bulk", "tail"):
        raise DataError("ess kind must be 'bulk' or 'tail'")
    x = _as_chain_matrix(draws)
    if np.all(x == x.flat[0]):
        return float("nan")
    if kind == "bulk":
        return _ess_of(_rank_normalize(_split_halves(x)))
    out = np.inf
    for q in (0.05, 0.95):
        indicator = (x <= np.quantile(x, q)).astype(float)
        if np.all(indicator == indicator.flat[0]):
            return float("nan")
        out = min(out, _ess_of(_split_halves(indicator)))
    return float(out)


def power_scale_weights(log_prior, alpha: float) -> np.ndarray:
    """Normalised importance weights for a prior raised to ``alpha``."""
    if not (np.isfinite(alpha) and alpha > 0):
        raise DataError("alpha must be a positive finite number")
    lw = (alpha - 1.0) * np.asarray(log_prior, dtype=float)
    lw -= lw.max()
    w = np.exp(lw)
    return w / w.sum()


def cjs_distance(x, w_base, w_perturbed) -> float:
    """Cumulative Jensen-Shannon distance between two weightings of draws.

    Symmetrized and normalised to [0, 1]; exactly zero when the weights
    agree.
    """
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    p = np.cumsum(np.asarray(w_base, dtype=float)[order])
    q = np.cumsum(np.asarray(w_perturbed, dtype=float)[order])
    if np.array_equal(p, q):
        return 0.0
    widths = np.diff(xs)
    p, q = p[:-1], q[:-1]
    p_int = float(p @ widths)
    q_int = float(q @ widths)

    def _half(a, a_int, b, b_int):
        mid = 0.5 * (a + b)
        terms = np.zeros_like(a)
        mask = a > 0
        terms[mask] = a[mask] * np.log2(a[mask] / mid[mask])
        return float(terms @ widths) + (b_int - a_int) / (2.0 * np.log(2.0))

    total = _half(p, p_int, q, q_int) + _half(q, q_int, p, p_int)
    bound = p_int + q_int
    if bound <= 0.0:
        return 0.0
    return float(np.sqrt(max(total, 0.0) / bound))


@dataclass(frozen=True)
class SensitivityResult:
    index: float
    informative: bool
    unreliable: bool


def power_scale_sensitivity(values, log_prior, alphas=DEFAULT_ALPHAS) -> SensitivityResult:
    """Power-scaling sensitivity of one quantity's draws.

    ``values`` and ``log_prior`` are aligned per-draw vectors; the prior
    log density must have been recorded at fit time.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    log_prior = np.asarray(log_prior, dtype=float).reshape(-1)
    if values.shape != log_prior.shape:
        raise DataError("values and log_prior must align per draw")
    n = values.size
    base = np.full(n, 1.0 / n)
    distances = []
    unreliable = False
    for alpha in alphas:
        w = power_scale_weights(log_prior, alpha)
        n_eff = 1.0 / float(w @ w)
        if n_eff < 10.0 or n_eff / n < 0.01:
            unreliable = True
        distances.append(cjs_distance(values, base, w))
    index = float(np.mean(distances))
    return SensitivityResult(
        index=index,
        informative=index > SENSITIVITY_THRESHOLD,
        unreliable=unreliable,
    )


@dataclass(frozen=True)
class ParameterDiagnostics:
    rhat: float
    ess_bulk: float
    ess_tail: float


@dataclass(frozen=True)
class DiagnosticsReport:
    per_parameter: dict
    n_divergent: int
    sensitivity: dict

    @property
    def max_rhat(self) -> float:
        vals = [d.rhat for d in self.per_parameter.values() if np.isfinite(d.rhat)]
        return max(vals) if vals else float("nan")

    @property
    def min_ess(self) -> float:
        vals = []
        for d in self.per_parameter.values():
            for v in (d.ess_bulk, d.ess_tail):
                if np.isfinite(v):
                    vals.append(v)
        return min(vals) if vals else float("nan")

    @property
    def converged(self) -> bool:
        for d in self.per_parameter.values():
            if np.isfinite(d.rhat) and d.rhat >= RHAT_THRESHOLD:
                return False
            for v in (d.ess_bulk, d.ess_tail):
                if np.isfinite(v) and v <= ESS_THRESHOLD:
                    return False
        return True


def diagnose(draws: PosteriorDraws, include_sensitivity: bool = True) -> DiagnosticsReport:
    """Per-parameter convergence report for a fitted model.

    Sensitivity indices are computed for the population and variance
    parameters (the cluster offsets follow the hierarchy and are not
    power-scaled).
    """
    per_parameter = {}
    for i, name in enumerate(draws.names):
        x = draws.draws[:, :, i]
        per_parameter[name] = ParameterDiagnostics(
            rhat=split_rhat(x),
            ess_bulk=ess(x, "bulk"),
            ess_tail=ess(x, "tail"),
        )
    sensitivity = {}
    if include_sensitivity:
        lp = draws.flat_log_prior
        n_main = draws.n_coefficients + 2
        for name in draws.names[:n_main]:
            sensitivity[name] = power_scale_sensitivity(draws.flat(name), lp)
    return DiagnosticsReport(
        per_parameter=per_parameter,
        n_divergent=draws.n_divergent,
        sensitivity=sensitivity,
    )
