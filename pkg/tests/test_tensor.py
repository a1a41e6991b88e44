import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from echolstm.tensor import (
    DomainError,
    Rng,
    ShapeError,
    as_matrix,
    elementwise,
    log_softmax,
    matmul,
    rand_init,
    sigmoid,
    softmax,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def loop_matmul(a, b):
    rows, inner = len(a), len(a[0])
    cols = len(b[0])
    return [[sum(a[i][k] * b[k][j] for k in range(inner)) for j in range(cols)] for i in range(rows)]


class TestMatmul:
    def test_identity(self):
        assert matmul(np.eye(2), [[3], [4]]).tolist() == [[3], [4]]

    def test_zero_vector(self):
        assert matmul([[1, 2], [3, 4]], [[0], [0]]).tolist() == [[0], [0]]

    def test_hand_computed(self):
        a, b = [[1, 2], [3, 4]], [[5], [6]]
        assert matmul(a, b).tolist() == loop_matmul(a, b) == [[17], [39]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_associativity(self, m, n, p, q, seed):
        g = np.random.default_rng(seed)
        a, b, c = g.normal(size=(m, n)), g.normal(size=(n, p)), g.normal(size=(p, q))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        scale = np.abs(a) @ np.abs(b) @ np.abs(c)
        assert np.all(np.abs(left - right) <= 1e-9 * np.maximum(scale, 1e-300))

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_matches_scalar_loop(self, m, n, p, seed):
        g = np.random.default_rng(seed)
        a, b = g.normal(size=(m, n)), g.normal(size=(n, p))
        np.testing.assert_allclose(matmul(a, b), loop_matmul(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-14)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert elementwise("sigmoid", [[0.0]])[0, 0] == 0.5

    def test_tanh_zero(self):
        assert elementwise("tanh", [[0.0]])[0, 0] == 0.0

    def test_hadamard(self):
        assert elementwise("hadamard", [1, 2], [3, 4]).tolist() == [3, 8]

    def test_add_sub_scale(self):
        assert elementwise("add", [1, 2], [3, 4]).tolist() == [4, 6]
        assert elementwise("sub", [1, 2], [3, 4]).tolist() == [-2, -2]
        assert elementwise("scale", [1, 2], 2.5).tolist() == [2.5, 5.0]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise("add", np.ones((2, 1)), np.ones((1, 2)))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("relu", [1.0])

    def test_sigmoid_extremes_do_not_overflow(self):
        with np.errstate(over="raise"):
            s = sigmoid(np.array([-1000.0, 1000.0]))
        assert s[0] == 0.0 and s[1] == 1.0

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
    def test_sigmoid_range_and_formula(self, z):
        s = sigmoid(z)
        assert np.all((s > 0) & (s < 1))
        np.testing.assert_allclose(s, [1 / (1 + math.exp(-v)) for v in z], rtol=1e-14)

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-15, 15)))
    def test_tanh_range(self, z):
        t = elementwise("tanh", z)
        assert np.all((t > -1) & (t < 1))


class TestSoftmax:
    def test_symmetric(self):
        assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]

    def test_large_input(self):
        with np.errstate(over="raise"):
            s = softmax([1000.0, 0.0])
        assert s[0] == pytest.approx(1.0) and s[1] == pytest.approx(0.0, abs=1e-300)

    def test_known_values(self):
        # oracle: exact rationals of e^k via high-precision decimal exp
        from decimal import Decimal, getcontext

        getcontext().prec = 40
        e = [Decimal(k).exp() for k in (1, 2, 3)]
        expected = [float(x / sum(e)) for x in e]
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), expected, atol=1e-15)
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_empty(self):
        with pytest.raises(DomainError):
            softmax([])
        with pytest.raises(DomainError):
            log_softmax([])

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e300, 1e300)))
    def test_sums_to_one(self, v):
        s = softmax(v)
        assert np.all(s >= 0) and abs(s.sum() - 1.0) <= 1e-12

    @given(arrays(np.float64, st.integers(1, 10), elements=finite))
    def test_log_softmax_consistent(self, v):
        np.testing.assert_allclose(np.exp(log_softmax(v)), softmax(v), atol=1e-15)


class TestRandInit:
    def test_zeros_ones(self):
        assert rand_init(Rng(0), 2, 2, "zeros").tolist() == [[0, 0], [0, 0]]
        assert rand_init(Rng(0), 1, 3, "ones").tolist() == [[1, 1, 1]]

    def test_xavier_mean_and_bound(self):
        w = rand_init(Rng(3), 64, 64)
        bound = math.sqrt(6 / 128)
        assert w.size == 4096
        assert abs(w.mean()) < 0.01
        assert np.all(np.abs(w) <= bound)
        # uniform variance bound^2/3
        assert w.var() == pytest.approx(bound**2 / 3, rel=0.1)

    def test_deterministic(self):
        assert np.array_equal(rand_init(Rng(9), 5, 7), rand_init(Rng(9), 5, 7))
        assert not np.array_equal(rand_init(Rng(9), 5, 7), rand_init(Rng(10), 5, 7))

    def test_bad_dims(self):
        with pytest.raises(ShapeError):
            rand_init(Rng(0), 0, 3)
        with pytest.raises(ValueError):
            rand_init(Rng(0), 2, 3, "orthogonal")


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = Rng(42), Rng(42)
        assert np.array_equal(a.random(100), b.random(100))
        assert np.array_equal(a.integers(0, 1000, 50), b.integers(0, 1000, 50))

    def test_known_stream_is_pinned(self):
        # The first draws for seed 0 are fixed by the Philox key/counter
        # definition; a change here means the stream changed.
        assert Rng(0).integers(0, 2**32, size=4).tolist() == [582496169, 60417458, 4027530181, 1107101889]
        assert Rng.ALGORITHM.startswith("philox")

    def test_derive_is_keyed(self):
        assert np.array_equal(Rng.derive(7, 3).random(5), Rng.derive(7, 3).random(5))
        assert not np.array_equal(Rng.derive(7, 3).random(5), Rng.derive(7, 4).random(5))
        assert not np.array_equal(Rng.derive(7, 3).random(5), Rng.derive(8, 3).random(5))


def test_as_matrix():
    assert as_matrix(3.0).shape == (1, 1)
    assert as_matrix([1, 2]).shape == (2, 1)
    with pytest.raises(ShapeError):
        as_matrix(np.ones((2, 2, 2)))


@settings(max_examples=50)
@given(st.lists(st.fractions(min_value=-5, max_value=5, max_denominator=16), min_size=2, max_size=6))
def test_matmul_exact_on_dyadics(vals):
    # dyadic rationals with small denominators multiply and add exactly in float64
    vals = [Fraction(v.numerator, 2 ** (v.denominator.bit_length())) for v in vals]
    a = [[float(v) for v in vals]]
    b = [[float(v)] for v in vals]
    assert matmul(a, b)[0, 0] == float(sum(v * v for v in vals))
