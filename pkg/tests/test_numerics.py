"""Dense linear algebra: correctness against numpy oracles and bitwise
parity between the pure-Python and compiled kernel backends."""

import math
import random

import numpy as np
import pytest

from journeykit.numerics import (Matrix, NumericsError, Vector,
                                 active_backend, add_mats, compiled_available,
                                 dot, finite_diff_grad, frobenius_norm,
                                 inverse, kern, matmul, matvec, max_abs,
                                 rotate_vector, scale_mat, set_backend,
                                 softmax, sub_mats, transpose)


def rand_matrix(rng, rows, cols, scale=1.0):
    return Matrix(rows, cols,
                  [rng.uniform(-scale, scale) for _ in range(rows * cols)])


def as_np(m):
    return np.array(m.data, dtype=np.float64).reshape(m.rows, m.cols)


class TestConstruction:
    def test_matrix_shape_mismatch_rejected(self):
        with pytest.raises(NumericsError, match="needs 6 entries"):
            Matrix(2, 3, [1.0, 2.0])

    def test_negative_shape_rejected(self):
        with pytest.raises(NumericsError, match="negative"):
            Matrix(-1, 3)

    def test_identity(self):
        eye = Matrix.identity(4)
        np.testing.assert_array_equal(as_np(eye), np.eye(4))

    def test_zeros_default(self):
        assert all(v == 0.0 for v in Matrix(3, 2).data)

    def test_vector_dim_mismatch_rejected(self):
        with pytest.raises(NumericsError):
            Vector(3, [1.0])


class TestElementwise:
    def test_add_sub_scale_match_numpy(self):
        rng = random.Random(0)
        a = rand_matrix(rng, 4, 5)
        b = rand_matrix(rng, 4, 5)
        np.testing.assert_allclose(as_np(add_mats(a, b)),
                                   as_np(a) + as_np(b), rtol=0, atol=0)
        np.testing.assert_allclose(as_np(sub_mats(a, b)),
                                   as_np(a) - as_np(b), rtol=0, atol=0)
        np.testing.assert_allclose(as_np(scale_mat(a, 2.5)),
                                   as_np(a) * 2.5, rtol=0, atol=0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(NumericsError, match="shape mismatch"):
            add_mats(Matrix(2, 2), Matrix(2, 3))

    def test_norms(self):
        m = Matrix(2, 2, [3.0, 0.0, 0.0, -4.0])
        assert frobenius_norm(m) == 5.0
        assert max_abs(m) == 4.0


class TestProducts:
    def test_matmul_matches_numpy(self):
        rng = random.Random(1)
        for m, k, n in ((1, 1, 1), (3, 4, 5), (7, 2, 7)):
            a, b = rand_matrix(rng, m, k), rand_matrix(rng, k, n)
            np.testing.assert_allclose(as_np(matmul(a, b)),
                                       as_np(a) @ as_np(b), atol=1e-13)

    def test_matmul_shape_mismatch_rejected(self):
        with pytest.raises(NumericsError, match="matmul"):
            matmul(Matrix(2, 3), Matrix(2, 3))

    def test_matvec_matches_numpy(self):
        rng = random.Random(2)
        a = rand_matrix(rng, 5, 3)
        v = Vector(3, [rng.gauss(0, 1) for _ in range(3)])
        got = matvec(a, v)
        np.testing.assert_allclose(list(got.data),
                                   as_np(a) @ np.array(v.data), atol=1e-13)

    def test_dot(self):
        a = Vector(3, [1.0, 2.0, 3.0])
        b = Vector(3, [4.0, 5.0, 6.0])
        assert dot(a, b) == 32.0
        with pytest.raises(NumericsError):
            dot(a, Vector(2, [1.0, 2.0]))

    def test_transpose_involution(self):
        rng = random.Random(3)
        a = rand_matrix(rng, 4, 6)
        assert as_np(transpose(transpose(a))).tolist() == as_np(a).tolist()
        np.testing.assert_array_equal(as_np(transpose(a)), as_np(a).T)


class TestInverse:
    def test_inverse_matches_numpy(self):
        rng = random.Random(4)
        a = rand_matrix(rng, 5, 5)
        for i in range(5):   # diagonal dominance keeps it well-conditioned
            a.data[i * 5 + i] += 5.0
        np.testing.assert_allclose(as_np(inverse(a)),
                                   np.linalg.inv(as_np(a)), atol=1e-10)

    def test_product_with_inverse_is_identity(self):
        rng = random.Random(5)
        a = rand_matrix(rng, 4, 4)
        for i in range(4):
            a.data[i * 4 + i] += 4.0
        prod = matmul(a, inverse(a))
        assert max_abs(sub_mats(prod, Matrix.identity(4))) < 1e-12

    def test_singular_rejected(self):
        with pytest.raises(NumericsError, match="singular"):
            inverse(Matrix(2, 2, [1.0, 2.0, 2.0, 4.0]))

    def test_non_square_rejected(self):
        with pytest.raises(NumericsError, match="non-square"):
            inverse(Matrix(2, 3))


class TestSoftmax:
    def test_sums_to_one_and_matches_numpy(self):
        rng = random.Random(6)
        s = Vector(7, [rng.uniform(-5, 5) for _ in range(7)])
        got = softmax(s)
        ref = np.exp(np.array(s.data) - max(s.data))
        ref /= ref.sum()
        np.testing.assert_allclose(list(got.data), ref, atol=1e-15)
        assert abs(math.fsum(got.data) - 1.0) < 1e-12

    def test_shift_invariance(self):
        s = Vector(4, [1.0, 2.0, 3.0, 4.0])
        shifted = Vector(4, [v + 100.0 for v in s.data])
        np.testing.assert_allclose(list(softmax(s).data),
                                   list(softmax(shifted).data), atol=1e-15)

    def test_masked_entries_exactly_zero(self):
        s = Vector(4, [10.0, 20.0, 30.0, 40.0])
        out = softmax(s, [True, False, True, False])
        assert out.data[1] == 0.0 and out.data[3] == 0.0
        assert abs(math.fsum(out.data) - 1.0) < 1e-12

    def test_fully_masked_rejected(self):
        with pytest.raises(NumericsError, match="fully-masked"):
            softmax(Vector(3, [1.0, 2.0, 3.0]), [False, False, False])

    def test_extreme_scores_stay_finite(self):
        out = softmax(Vector(3, [1e4, -1e4, 0.0]))
        assert all(math.isfinite(v) for v in out.data)
        assert out.data[0] == pytest.approx(1.0)


class TestRotateVector:
    def test_matches_explicit_rotation_matrix(self):
        rng = random.Random(7)
        v = Vector(6, [rng.gauss(0, 1) for _ in range(6)])
        angles = [0.3, -1.2, 2.5]
        got = rotate_vector(v, angles)
        for p, ang in enumerate(angles):
            x, y = v.data[2 * p], v.data[2 * p + 1]
            assert got.data[2 * p] == pytest.approx(
                math.cos(ang) * x - math.sin(ang) * y, abs=1e-15)
            assert got.data[2 * p + 1] == pytest.approx(
                math.sin(ang) * x + math.cos(ang) * y, abs=1e-15)

    def test_norm_preserved(self):
        rng = random.Random(8)
        v = Vector(8, [rng.gauss(0, 1) for _ in range(8)])
        got = rotate_vector(v, [rng.uniform(-3, 3) for _ in range(4)])
        assert math.fsum(x * x for x in got.data) == pytest.approx(
            math.fsum(x * x for x in v.data), rel=1e-12)

    def test_odd_dim_rejected(self):
        with pytest.raises(NumericsError, match="even"):
            rotate_vector(Vector(3, [1.0, 2.0, 3.0]), [0.1])


class TestFiniteDiff:
    def test_gradient_of_quadratic(self):
        a = Vector(3, [1.0, -2.0, 0.5])

        def f(x):
            return math.fsum(v * v for v in x.data)

        g = finite_diff_grad(f, a)
        np.testing.assert_allclose(list(g.data),
                                   [2.0, -4.0, 1.0], atol=1e-8)

    def test_matrix_input(self):
        m = Matrix(2, 2, [1.0, 2.0, 3.0, 4.0])

        def f(x):
            return math.fsum(x.data)

        g = finite_diff_grad(f, m)
        assert g.shape == (2, 2)
        np.testing.assert_allclose(list(g.data), [1.0] * 4, atol=1e-9)

    def test_input_restored_after_probing(self):
        m = Matrix(1, 2, [1.5, -0.5])
        finite_diff_grad(lambda x: math.fsum(x.data), m)
        assert list(m.data) == [1.5, -0.5]


@pytest.mark.skipif(not compiled_available(),
                    reason="compiled extension not built")
class TestBackendParity:
    """The two kernel implementations must agree bit for bit."""

    def setup_method(self):
        self._saved = active_backend()

    def teardown_method(self):
        set_backend(self._saved)

    def _both(self, fn):
        set_backend("pure")
        a = fn()
        set_backend("compiled")
        b = fn()
        return a, b

    def test_matmul_bitwise(self):
        def run():
            rng = random.Random(42)
            a = rand_matrix(rng, 17, 9)
            b = rand_matrix(rng, 9, 13)
            return matmul(a, b).data.tobytes()

        pure, compiled = self._both(run)
        assert pure == compiled

    def test_inverse_bitwise(self):
        def run():
            rng = random.Random(43)
            a = rand_matrix(rng, 6, 6)
            for i in range(6):
                a.data[i * 6 + i] += 6.0
            return inverse(a).data.tobytes()

        pure, compiled = self._both(run)
        assert pure == compiled

    def test_softmax_bitwise(self):
        def run():
            rng = random.Random(44)
            s = Vector(33, [rng.uniform(-30, 30) for _ in range(33)])
            return softmax(s).data.tobytes()

        pure, compiled = self._both(run)
        assert pure == compiled

    def test_rotate_bitwise(self):
        def run():
            rng = random.Random(45)
            v = Vector(16, [rng.gauss(0, 1) for _ in range(16)])
            return rotate_vector(
                v, [rng.uniform(-3, 3) for _ in range(8)]).data.tobytes()

        pure, compiled = self._both(run)
        assert pure == compiled

    def test_adam_step_bitwise(self):
        def run():
            rng = random.Random(46)
            n = 64
            from array import array
            p = array("d", [rng.gauss(0, 1) for _ in range(n)])
            g = array("d", [rng.gauss(0, 1) for _ in range(n)])
            m = array("d", bytes(8 * n))
            v = array("d", bytes(8 * n))
            for step in range(1, 6):
                kern.adam_step(p, g, m, v, n, 1e-2, 0.9, 0.999, 1e-8,
                               1 - 0.9 ** step, 1 - 0.999 ** step)
            return p.tobytes()

        pure, compiled = self._both(run)
        assert pure == compiled

    def test_layernorm_bitwise(self):
        def run():
            from array import array
            rng = random.Random(47)
            m, n = 5, 12
            x = array("d", [rng.gauss(0, 2) for _ in range(m * n)])
            gain = array("d", [rng.uniform(0.5, 2) for _ in range(n)])
            off = array("d", [rng.gauss(0, 1) for _ in range(n)])
            out = array("d", bytes(8 * m * n))
            mean = array("d", bytes(8 * m))
            rstd = array("d", bytes(8 * m))
            kern.layernorm(x, gain, off, out, mean, rstd, m, n, 1e-5)
            return out.tobytes()

        pure, compiled = self._both(run)
        assert pure == compiled
