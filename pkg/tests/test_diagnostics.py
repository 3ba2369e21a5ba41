import numpy as np
import pytest
from scipy.special import ndtri
from scipy.stats import rankdata

from codamlm.diagnostics import (
    DEFAULT_ALPHAS,
    ESS_THRESHOLD,
    RHAT_THRESHOLD,
    SENSITIVITY_THRESHOLD,
    cjs_distance,
    diagnose,
    ess,
    power_scale_sensitivity,
    power_scale_weights,
    split_rhat,
)
from codamlm.errors import DataError

from conftest import make_rng
from test_posterior import synthetic_draws


def rhat_transcription(chains):
    """Independent transcription: split in half, rank-normalize, pool."""
    m, n = chains.shape
    half = n // 2
    split = np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)
    ranks = rankdata(split, method="average", axis=None).reshape(split.shape)
    z = ndtri((ranks - 0.375) / (split.size + 0.25))
    nn = z.shape[1]
    w = z.var(axis=1, ddof=1).mean()
    b = nn * z.mean(axis=1).var(ddof=1)
    return float(np.sqrt(((nn - 1) / nn * w + b / nn) / w))


class TestSplitRhat:
    def test_iid_chains_near_one(self):
        x = make_rng(61).standard_normal((4, 1000))
        assert split_rhat(x) < 1.01

    def test_separated_chains_detected(self):
        rng = make_rng(62)
        x = np.stack([rng.standard_normal(1000), rng.standard_normal(1000) + 10.0])
        r = split_rhat(x)
        assert r > 1.05
        assert abs(r - rhat_transcription(x)) < 1e-12

    def test_transcription_agrees_on_iid(self):
        x = make_rng(63).standard_normal((3, 400))
        assert abs(split_rhat(x) - rhat_transcription(x)) < 1e-12

    def test_constant_draws_not_applicable(self):
        assert np.isnan(split_rhat(np.ones((2, 100))))

    def test_monotone_transform_invariance(self):
        x = make_rng(64).standard_normal((4, 500))
        assert split_rhat(np.exp(x)) == split_rhat(x)

    def test_chain_permutation_invariance(self):
        x = make_rng(65).standard_normal((4, 500)) + np.arange(4)[:, None] * 0.3
        assert np.isclose(split_rhat(x[::-1]), split_rhat(x), rtol=1e-12)

    def test_needs_enough_iterations(self):
        with pytest.raises(DataError):
            split_rhat(np.ones((2, 3)))


def ar1(rng, n, rho):
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0]
    for t in range(1, n):
        x[t] = rho * x[t - 1] + np.sqrt(1 - rho * rho) * e[t]
    return x


class TestEss:
    def test_iid_close_to_sample_size(self):
        x = make_rng(66).standard_normal((4, 1000))
        n = x.size
        assert 0.8 * n < ess(x, "bulk") < 1.2 * n
        assert 0.8 * n < ess(x, "tail") < 1.2 * n

    def test_autocorrelated_chain_shrinks(self):
        rng = make_rng(67)
        rho, n = 0.9, 4000
        x = np.stack([ar1(rng, n, rho) for _ in range(4)])
        theoretical = x.size * (1 - rho) / (1 + rho)
        estimate = ess(x, "bulk")
        assert theoretical / 2 < estimate < theoretical * 2
        assert estimate < x.size / 5

    def test_threshold_constant_matches_convention(self):
        assert ESS_THRESHOLD == 400.0
        assert RHAT_THRESHOLD == 1.05

    def test_monotone_transform_invariance(self):
        x = make_rng(68).standard_normal((2, 800))
        assert ess(np.exp(x), "bulk") == ess(x, "bulk")
        assert ess(np.exp(x), "tail") == ess(x, "tail")

    def test_constant_not_applicable(self):
        assert np.isnan(ess(np.zeros((2, 100)), "bulk"))

    def test_bad_kind(self):
        with pytest.raises(DataError):
            ess(np.ones((2, 100)), "middle")


class TestPowerScaling:
    def test_alpha_one_gives_zero(self):
        rng = make_rng(69)
        r = power_scale_sensitivity(rng.standard_normal(500), rng.standard_normal(500), alphas=(1.0,))
        assert r.index == 0.0

    def test_flat_prior_gives_exact_zero(self):
        rng = make_rng(70)
        r = power_scale_sensitivity(rng.standard_normal(500), np.full(500, -2.3))
        assert r.index == 0.0
        assert not r.informative and not r.unreliable

    def test_default_alphas_weaken_and_strengthen(self):
        assert DEFAULT_ALPHAS == (0.5, 2.0)

    def test_informative_prior_flagged(self):
        # prior pulls hard against the draws: power-scaling must move mass
        rng = make_rng(71)
        draws = rng.standard_normal(4000) * 0.5 + 1.0
        log_prior = -0.5 * (draws / 0.8) ** 2
        r = power_scale_sensitivity(draws, log_prior)
        assert r.index > SENSITIVITY_THRESHOLD
        assert r.informative

    def test_degenerate_weights_unreliable(self):
        rng = make_rng(72)
        draws = rng.standard_normal(1000)
        log_prior = np.zeros(1000)
        log_prior[0] = 60.0  # one draw dominates at alpha = 2
        r = power_scale_sensitivity(draws, log_prior)
        assert r.unreliable

    def test_distance_nonnegative_and_symmetric(self):
        rng = make_rng(73)
        x = rng.standard_normal(300)
        w1 = power_scale_weights(rng.standard_normal(300), 0.5)
        w2 = np.full(300, 1.0 / 300)
        d12 = cjs_distance(x, w1, w2)
        assert d12 >= 0.0
        assert np.isclose(d12, cjs_distance(x, w2, w1), rtol=1e-12)

    def test_weights_validation(self):
        with pytest.raises(DataError):
            power_scale_weights(np.zeros(10), 0.0)
        with pytest.raises(DataError):
            power_scale_sensitivity(np.zeros(10), np.zeros(9))


class TestDiagnose:
    def test_report_structure_and_thresholds(self):
        d = synthetic_draws(make_rng(74), n_chains=4, n_iter=500)
        report = diagnose(d)
        assert set(report.per_parameter) == set(d.names)
        assert report.max_rhat < 1.05
        assert report.min_ess > 400
        assert report.converged
        assert report.n_divergent == 0
        # sensitivity only for population and variance parameters
        assert set(report.sensitivity) == set(d.names[:7])

    def test_nonconverged_detected(self):
        rng = make_rng(75)
        d = synthetic_draws(rng, n_chains=2, n_iter=300)
        bad = d.draws.copy()
        bad[1, :, 0] += 25.0  # separate the chains on gamma0
        d_bad = type(d)(
            names=d.names, draws=bad, divergent=d.divergent.copy(),
            log_prior=d.log_prior.copy(), n_coords=d.n_coords,
        )
        report = diagnose(d_bad, include_sensitivity=False)
        assert report.per_parameter["gamma0"].rhat > 1.05
        assert not report.converged
