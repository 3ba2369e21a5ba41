"""Dynamic Hamiltonian Monte Carlo with multinomial trajectory sampling.

One transition simulates Hamiltonian dynamics with a leapfrog integrator,
doubling the trajectory until a U-turn, and draws the next state from the
trajectory with weights proportional to the target density (multinomial
sampling; the newest subtree is preferred when doubling).  Warmup adapts
the step size by dual averaging toward a target acceptance statistic and
estimates a diagonal mass matrix over windowed segments of the warmup
draws.

The sampler is generic: it only needs a ``logp_and_grad(q) -> (logp,
grad)`` callable on an unconstrained parameter vector and a numpy
``Generator`` supplying all randomness, which makes runs reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Energy error above which a trajectory is flagged divergent.
DELTA_MAX = 1000.0


@dataclass
class ChainResult:
    """Post-warmup draws and sampling statistics for one chain."""

    draws: np.ndarray          # (n_samples, dim), unconstrained scale
    divergent: np.ndarray      # (n_samples,) bool
    accept_stat: np.ndarray    # (n_samples,) mean leapfrog acceptance
    tree_depth: np.ndarray     # (n_samples,) int
    step_size: float
    inv_mass: np.ndarray
    n_warmup_divergent: int


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, eps0: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0
        self.gamma, self.t0, self.kappa = gamma, t0, kappa

    def update(self, accept_stat: float, target: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - accept_stat)
        self.log_eps = self.mu - (math.sqrt(self.t) / self.gamma) * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def _warmup_windows(n_warmup: int) -> list[tuple[int, int]]:
    """Mass-adaptation windows: an initial buffer, doubling middle windows
    and a terminal buffer reserved for step-size refinement."""
    init_buffer, term_buffer, base = 75, 50, 25
    if n_warmup < init_buffer + term_buffer + 2 * base:
        init_buffer = max(1, int(0.15 * n_warmup))
        term_buffer = max(1, int(0.10 * n_warmup))
        if n_warmup - init_buffer - term_buffer < 20:
            return []
        return [(init_buffer, n_warmup - term_buffer)]
    windows = []
    start, width = init_buffer, base
    end_middle = n_warmup - term_buffer
    while start + width < end_middle:
        # the last window absorbs the remainder if doubling would overshoot
        if start + 3 * width > end_middle:
            width = end_middle - start
        windows.append((start, start + width))
        start += width
        width *= 2
    if start < end_middle:
        windows.append((start, end_middle))
    return windows


def _find_initial_step_size(logp_and_grad, q, lp, grad, inv_mass, rng) -> float:
    """Crude bracketing of a step size with ~50% one-step acceptance."""
    eps = 1.0
    p = rng.standard_normal(q.size) / np.sqrt(inv_mass)
    h0 = -lp + 0.5 * float(p * inv_mass @ p)

    def one_step(eps):
        p_half = p + 0.5 * eps * grad
        q1 = q + eps * (p_half * inv_mass)
        lp1, g1 = logp_and_grad(q1)
        p1 = p_half + 0.5 * eps * g1
        return -lp1 + 0.5 * float(p1 * inv_mass @ p1)

    h1 = one_step(eps)
    log_alpha = h0 - h1 if np.isfinite(h1) else -np.inf
    direction = 1.0 if log_alpha > math.log(0.5) else -1.0
    for _ in range(50):
        eps *= 2.0 ** direction
        h1 = one_step(eps)
        log_alpha = h0 - h1 if np.isfinite(h1) else -np.inf
        if (direction > 0 and log_alpha <= math.log(0.5)) or (
            direction < 0 and log_alpha >= math.log(0.5)
        ):
            break
        if not (1e-10 < eps < 1e7):
            break
    return min(max(eps, 1e-10), 1e7)


def _build_tree(logp_and_grad, q, p, grad, v, depth, eps, inv_mass, h0, rng):
    """Recursively double one side of the trajectory.

    Returns (q_minus, p_minus, grad_minus, q_plus, p_plus, grad_plus,
    proposal (q, lp, grad), log_weight, keep_going, alpha_sum, n_alpha,
    divergent).
    """
    if depth == 0:
        p_half = p + (0.5 * eps * v) * grad
        q1 = q + (eps * v) * (p_half * inv_mass)
        lp1, g1 = logp_and_grad(q1)
        p1 = p_half + (0.5 * eps * v) * g1
        h1 = -lp1 + 0.5 * float(p1 * inv_mass @ p1)
        dh = h1 - h0
        if not np.isfinite(dh) or dh > DELTA_MAX:
            return q1, p1, g1, q1, p1, g1, (q1, lp1, g1), -np.inf, False, 0.0, 1, True
        alpha = math.exp(-dh) if dh > 0 else 1.0
        return q1, p1, g1, q1, p1, g1, (q1, lp1, g1), -dh, True, alpha, 1, False

    out = _build_tree(logp_and_grad, q, p, grad, v, depth - 1, eps, inv_mass, h0, rng)
    (qm, pm, gm, qp, pp, gp, prop, log_w, cont, alpha_sum, n_alpha, div) = out
    if not cont:
        return out

    if v < 0:
        out2 = _build_tree(logp_and_grad, qm, pm, gm, v, depth - 1, eps, inv_mass, h0, rng)
        qm, pm, gm = out2[0], out2[1], out2[2]
    else:
        out2 = _build_tree(logp_and_grad, qp, pp, gp, v, depth - 1, eps, inv_mass, h0, rng)
        qp, pp, gp = out2[3], out2[4], out2[5]
    prop2, log_w2, cont2, alpha_sum2, n_alpha2, div2 = out2[6:]

    total = np.logaddexp(log_w, log_w2)
    # within-subtree multinomial selection among the two halves
    if log_w2 > -np.inf and math.log(rng.random()) < log_w2 - total:
        prop = prop2
    cont = cont2 and not _uturn(qm, qp, pm, pp, inv_mass)
    return (qm, pm, gm, qp, pp, gp, prop, total, cont,
            alpha_sum + alpha_sum2, n_alpha + n_alpha2, div or div2)


def _uturn(q_minus, q_plus, p_minus, p_plus, inv_mass) -> bool:
    dq = q_plus - q_minus
    return float(dq @ (inv_mass * p_minus)) < 0.0 or float(dq @ (inv_mass * p_plus)) < 0.0


def _transition(logp_and_grad, q, lp, grad, eps, inv_mass, sqrt_mass, max_depth, rng):
    p0 = rng.standard_normal(q.size) * sqrt_mass
    h0 = -lp + 0.5 * float(p0 * inv_mass @ p0)

    qm = qp = q
    pm = pp = p0
    gm = gp = grad
    prop = (q, lp, grad)
    log_w = 0.0
    alpha_sum, n_alpha = 0.0, 0
    divergent = False
    depth = 0

    while depth < max_depth:
        v = -1 if rng.random() < 0.5 else 1
        if v < 0:
            out = _build_tree(logp_and_grad, qm, pm, gm, v, depth, eps, inv_mass, h0, rng)
            qm, pm, gm = out[0], out[1], out[2]
        else:
            out = _build_tree(logp_and_grad, qp, pp, gp, v, depth, eps, inv_mass, h0, rng)
            qp, pp, gp = out[3], out[4], out[5]
        prop2, log_w2, cont2, alpha_sum2, n_alpha2, div2 = out[6:]
        alpha_sum += alpha_sum2
        n_alpha += n_alpha2
        divergent = divergent or div2
        if not cont2:
            break
        # biased progressive sampling: favour the fresh subtree
        if log_w2 > log_w or math.log(rng.random()) < log_w2 - log_w:
            prop = prop2
        log_w = np.logaddexp(log_w, log_w2)
        depth += 1
        if _uturn(qm, qp, pm, pp, inv_mass):
            break

    accept_stat = alpha_sum / max(n_alpha, 1)
    return prop, accept_stat, divergent, depth


def run_chain(
    logp_and_grad,
    q0: np.ndarray,
    n_warmup: int,
    n_samples: int,
    rng: np.random.Generator,
    target_accept: float = 0.8,
    max_depth: int = 10,
) -> ChainResult:
    """Run warmup adaptation followed by ``n_samples`` sampling iterations."""
    q = np.asarray(q0, dtype=float).copy()
    dim = q.size
    lp, grad = logp_and_grad(q)
    if not np.isfinite(lp):
        raise ValueError("initial point has non-finite log density")

    inv_mass = np.ones(dim)
    sqrt_mass = np.ones(dim)
    eps = _find_initial_step_size(logp_and_grad, q, lp, grad, inv_mass, rng)
    da = _DualAveraging(eps)

    windows = _warmup_windows(n_warmup)
    window_ends = {end for _, end in windows}
    in_window = np.zeros(n_warmup, dtype=bool)
    for a, b in windows:
        in_window[a:b] = True

    welford_n = 0
    welford_mean = np.zeros(dim)
    welford_m2 = np.zeros(dim)
    n_warmup_divergent = 0

    for t in range(n_warmup):
        (q, lp, grad), accept_stat, div, _ = _transition(
            logp_and_grad, q, lp, grad, eps, inv_mass, sqrt_mass, max_depth, rng
        )
        n_warmup_divergent += int(div)
        eps = da.update(accept_stat, target_accept)
        if in_window[t]:
            welford_n += 1
            delta = q - welford_mean
            welford_mean += delta / welford_n
            welford_m2 += delta * (q - welford_mean)
        if (t + 1) in window_ends and welford_n > 1:
            var = welford_m2 / (welford_n - 1)
            inv_mass = var * (welford_n / (welford_n + 5.0)) + 1e-3 * (5.0 / (welford_n + 5.0))
            sqrt_mass = 1.0 / np.sqrt(inv_mass)
            welford_n = 0
            welford_mean[:] = 0.0
            welford_m2[:] = 0.0
            eps = min(max(da.final(), 1e-10), 1e7)
            da = _DualAveraging(eps)

    if n_warmup > 0:
        eps = min(max(da.final(), 1e-10), 1e7)

    draws = np.empty((n_samples, dim))
    divergent = np.zeros(n_samples, dtype=bool)
    accept = np.empty(n_samples)
    depth_trace = np.empty(n_samples, dtype=np.int16)
    for t in range(n_samples):
        (q, lp, grad), accept_stat, div, depth = _transition(
            logp_and_grad, q, lp, grad, eps, inv_mass, sqrt_mass, max_depth, rng
        )
        draws[t] = q
        divergent[t] = div
        accept[t] = accept_stat
        depth_trace[t] = depth

    return ChainResult(
        draws=draws,
        divergent=divergent,
        accept_stat=accept,
        tree_depth=depth_trace,
        step_size=eps,
        inv_mass=inv_mass,
        n_warmup_divergent=n_warmup_divergent,
    )
