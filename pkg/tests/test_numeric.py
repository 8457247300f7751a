import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltmlab.numeric import (
    NonFiniteError,
    Rng,
    ShapeError,
    add,
    hadamard,
    init_uniform,
    matvec,
    scale,
    sigmoid,
)

# frozen from an arbitrary-precision evaluation of 1/(1+e^-1)
SIGMOID_ONE = 0.7310585786300049


class TestMatvec:
    def test_identity(self):
        assert np.array_equal(matvec(np.eye(3), [1, 2, 3]), [1, 2, 3])

    def test_zero_matrix(self):
        assert np.array_equal(matvec(np.zeros((2, 3)), [5, 5, 5]), [0, 0])

    def test_hand_arithmetic(self):
        got = matvec([[1, 2], [3, 4]], [1, 1])
        assert np.allclose(got, [3, 7], rtol=0, atol=0)

    def test_shape_error_names_both_dims(self):
        with pytest.raises(ShapeError, match=r"2x3.*length 2"):
            matvec(np.zeros((2, 3)), np.zeros(2))

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_distributes_over_add(self, rows, cols, seed):
        rng = Rng(seed)
        m = rng.uniform(-2, 2, (rows, cols))
        a = rng.uniform(-2, 2, cols)
        b = rng.uniform(-2, 2, cols)
        lhs = matvec(m, add(a, b))
        rhs = add(matvec(m, a), matvec(m, b))
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-14)


class TestSigmoid:
    def test_zero_is_half(self):
        assert np.array_equal(sigmoid([0.0, 0.0]), [0.5, 0.5])

    def test_saturation_stays_inside_one(self):
        v = sigmoid([40.0])[0]
        assert 1 - 1e-15 < v < 1.0

    def test_unit_input_matches_high_precision_value(self):
        assert sigmoid([1.0])[0] == pytest.approx(SIGMOID_ONE, abs=1e-15)

    def test_rejects_nonfinite(self):
        for bad in (np.inf, -np.inf, np.nan):
            with pytest.raises(NonFiniteError):
                sigmoid([bad])

    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False,
                              width=64), min_size=1, max_size=20))
    @settings(max_examples=200, deadline=None)
    def test_open_interval_for_all_finite_inputs(self, xs):
        out = sigmoid(xs)
        assert np.all(out > 0.0)
        assert np.all(out < 1.0)

    def test_monotone(self):
        xs = np.linspace(-30, 30, 501)
        out = sigmoid(xs)
        assert np.all(np.diff(out) >= 0)


class TestElementwise:
    def test_hadamard(self):
        assert np.array_equal(hadamard([1, 0], [0.3, 9]), [0.3, 0])

    def test_add(self):
        assert np.array_equal(add([1, 2], [3, 4]), [4, 6])

    def test_scale(self):
        assert np.array_equal(scale([2, 4], 0.5), [1, 2])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            hadamard([1, 2], [1, 2, 3])
        with pytest.raises(ShapeError):
            add([1], [1, 2])


class TestInitUniform:
    def test_rejects_nonpositive_bound(self):
        with pytest.raises(ValueError):
            init_uniform(Rng(1), 2, 2, 0.0)
        with pytest.raises(ValueError):
            init_uniform(Rng(1), 2, 2, -0.5)

    def test_deterministic_per_seed(self):
        a = init_uniform(Rng(7), 8, 8, 0.3)
        b = init_uniform(Rng(7), 8, 8, 0.3)
        assert np.array_equal(a, b)

    def test_large_sample_mean_near_zero(self):
        m = init_uniform(Rng(7), 1000, 1000, 0.1)
        assert abs(m.mean()) < 0.01
        assert np.all(np.abs(m) <= 0.1)


class TestRng:
    def test_children_are_independent_and_deterministic(self):
        r = Rng(123)
        a = r.child("alpha").uniform(0, 1, 5)
        b = r.child("beta").uniform(0, 1, 5)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, Rng(123).child("alpha").uniform(0, 1, 5))

    def test_state_roundtrip_resumes_stream(self):
        r = Rng(9)
        r.uniform(0, 1, 10)
        snap = r.get_state()
        rest = Rng.from_state(snap)
        assert np.array_equal(r.uniform(0, 1, 7), rest.uniform(0, 1, 7))

    def test_integers_range(self):
        ids = Rng(5).integers(10, 1000)
        assert ids.min() >= 0 and ids.max() < 10
