import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codamlm.composition import (
    Composition,
    closure,
    geometric_mean_composition,
    inner_product,
    neutral,
    perturb,
    power,
)
from codamlm.errors import DataError

from conftest import make_rng


def random_composition(rng, n_parts, total=1.0):
    return closure(rng.uniform(0.05, 1.0, n_parts), total)


class TestClosure:
    def test_proportional_rescale(self):
        x = closure([1, 1, 2], 1.0)
        assert np.allclose(x.parts, [0.25, 0.25, 0.5])
        assert x.total == 1.0

    def test_idempotent(self):
        x = closure([0.25, 0.25, 0.5], 1.0)
        assert np.allclose(closure(x.parts, 1.0).parts, x.parts)

    def test_already_closed_day(self):
        raw = [480, 60, 30, 210, 660]
        x = closure(raw, 1440.0)
        assert np.allclose(x.parts, raw)

    def test_scale_invariant(self):
        rng = make_rng(1)
        for _ in range(50):
            raw = rng.uniform(0.01, 10.0, 4)
            lam = rng.uniform(0.001, 1000.0)
            a = closure(raw, 24.0)
            b = closure(lam * raw, 24.0)
            assert np.allclose(a.parts, b.parts, rtol=1e-12)

    @pytest.mark.parametrize(
        "raw", [[1.0, 0.0, 2.0], [1.0, -0.5], [np.nan, 1.0], [np.inf, 1.0]]
    )
    def test_rejects_nonpositive_and_nonfinite(self, raw):
        with pytest.raises(DataError):
            closure(raw, 1.0)

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            closure([], 1.0)

    def test_rejects_bad_total(self):
        with pytest.raises(DataError):
            closure([1, 2], 0.0)


class TestComposition:
    def test_requires_two_parts(self):
        with pytest.raises(DataError):
            Composition(np.array([1.0]), 1.0)

    def test_sum_must_match_total(self):
        with pytest.raises(DataError):
            Composition(np.array([0.5, 0.4]), 1.0)

    def test_parts_immutable(self):
        x = closure([1, 2, 3], 1.0)
        with pytest.raises(ValueError):
            x.parts[0] = 0.9


class TestPerturb:
    def test_neutral_element(self):
        rng = make_rng(2)
        x = random_composition(rng, 5, 24.0)
        assert np.allclose(perturb(x, neutral(5, 24.0)).parts, x.parts, rtol=1e-12)

    def test_opposite_element(self):
        rng = make_rng(3)
        x = random_composition(rng, 4, 1.0)
        opp = closure(1.0 / x.parts, 1.0)
        assert np.allclose(perturb(x, opp).parts, neutral(4, 1.0).parts, rtol=1e-12)

    def test_two_part_neutral(self):
        x = closure([0.2, 0.8], 1.0)
        y = closure([0.5, 0.5], 1.0)
        assert np.allclose(perturb(x, y).parts, [0.2, 0.8], rtol=1e-12)

    def test_commutative_associative_random(self):
        rng = make_rng(4)
        for _ in range(1000):
            d = int(rng.integers(2, 7))
            x, y, z = (random_composition(rng, d) for _ in range(3))
            assert np.allclose(perturb(x, y).parts, perturb(y, x).parts, atol=1e-10)
            left = perturb(perturb(x, y), z).parts
            right = perturb(x, perturb(y, z)).parts
            assert np.allclose(left, right, atol=1e-10)

    def test_mismatch_errors(self):
        with pytest.raises(DataError):
            perturb(closure([1, 2], 1.0), closure([1, 2, 3], 1.0))
        with pytest.raises(DataError):
            perturb(closure([1, 2], 1.0), closure([1, 2], 24.0))


class TestPower:
    def test_identity_zero_and_inverse(self):
        rng = make_rng(5)
        x = random_composition(rng, 4, 24.0)
        assert np.allclose(power(x, 1.0).parts, x.parts, rtol=1e-12)
        assert np.allclose(power(x, 0.0).parts, neutral(4, 24.0).parts, rtol=1e-12)
        opp = closure(1.0 / x.parts, 24.0)
        assert np.allclose(power(x, -1.0).parts, opp.parts, rtol=1e-12)

    def test_distributes_over_exponents(self):
        rng = make_rng(6)
        for _ in range(200):
            x = random_composition(rng, 5)
            a, b = rng.uniform(-3, 3, 2)
            lhs = power(x, a + b).parts
            rhs = perturb(power(x, a), power(x, b)).parts
            assert np.allclose(lhs, rhs, atol=1e-10)

    def test_nonfinite_exponent(self):
        with pytest.raises(DataError):
            power(closure([1, 2], 1.0), np.nan)


class TestInnerProduct:
    def test_neutral_is_orthogonal_to_everything(self):
        rng = make_rng(7)
        x = random_composition(rng, 5)
        assert abs(inner_product(x, neutral(5, 1.0))) < 1e-12

    def test_norm_positive_definite(self):
        rng = make_rng(8)
        x = random_composition(rng, 4)
        assert inner_product(x, x) > 0
        assert abs(inner_product(neutral(4, 1.0), neutral(4, 1.0))) < 1e-15

    def test_hand_oracle_e_composition(self):
        # clr of closure(e, 1) is (0.5, -0.5), so the squared norm is 0.5
        x = closure([math.e, 1.0], 1.0)
        logs = np.log(x.parts)
        clr = logs - logs.mean()
        assert np.allclose(clr, [0.5, -0.5], atol=1e-12)
        assert abs(inner_product(x, x) - 0.5) < 1e-12

    def test_both_definitions_agree(self):
        # pairwise log-ratio form as an independent oracle
        rng = make_rng(9)
        for _ in range(200):
            d = int(rng.integers(2, 7))
            x, y = random_composition(rng, d), random_composition(rng, d)
            acc = 0.0
            for i in range(d):
                for j in range(i + 1, d):
                    acc += math.log(x.parts[i] / x.parts[j]) * math.log(
                        y.parts[i] / y.parts[j]
                    )
            assert abs(inner_product(x, y) - acc / d) < 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            inner_product(closure([1, 2], 1.0), closure([1, 2, 3], 1.0))


class TestGeometricMean:
    def test_single_and_repeated(self):
        rng = make_rng(10)
        x = random_composition(rng, 4, 24.0)
        assert np.allclose(geometric_mean_composition([x]).parts, x.parts, rtol=1e-12)
        assert np.allclose(
            geometric_mean_composition([x, x, x]).parts, x.parts, rtol=1e-12
        )

    def test_two_composition_oracle(self):
        a = closure([18, 6], 24.0)
        b = closure([8, 16], 24.0)
        got = geometric_mean_composition([a, b])
        expected = closure([math.sqrt(18 * 8), math.sqrt(6 * 16)], 24.0)
        assert np.allclose(got.parts, expected.parts, rtol=1e-12)
        assert abs(expected.parts[1] / expected.parts[0] * 12 - 9.79795897) < 1e-6

    def test_empty_and_mismatched(self):
        with pytest.raises(DataError):
            geometric_mean_composition([])
        with pytest.raises(DataError):
            geometric_mean_composition([closure([1, 2], 1.0), closure([1, 2, 3], 1.0)])


@settings(max_examples=50, deadline=None)
@given(
    raw=st.lists(st.floats(min_value=0.01, max_value=1e4), min_size=2, max_size=6),
    lam=st.floats(min_value=1e-3, max_value=1e3),
)
def test_closure_scale_invariance_property(raw, lam):
    a = closure(raw, 1.0)
    b = closure([lam * v for v in raw], 1.0)
    assert np.allclose(a.parts, b.parts, rtol=1e-9)
