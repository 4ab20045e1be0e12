import math

import numpy as np
import pytest

from ickd import oracle
from ickd import tensor as T
from ickd.distill import KernelCfg
from ickd.errors import OracleError, ShapeError
from ickd.tensor import Tensor


def test_icc_naive_hand_example():
    f = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])
    np.testing.assert_array_equal(oracle.icc_naive(f), [[5.0, 11.0], [11.0, 25.0]])


def test_icc_naive_orthonormal_channels():
    f = np.eye(4).reshape(4, 2, 2)
    np.testing.assert_array_equal(oracle.icc_naive(f), np.eye(4))
    np.testing.assert_array_equal(oracle.icc_naive(f, KernelCfg("polynomial", poly_offset=0.0)), np.eye(4))


def test_icc_naive_gaussian_diagonal_is_one():
    f = np.random.default_rng(0).standard_normal((3, 2, 2))
    np.testing.assert_array_equal(np.diag(oracle.icc_naive(f, KernelCfg("gaussian"))), np.ones(3))


def test_icc_naive_rank_check():
    with pytest.raises(ShapeError):
        oracle.icc_naive(np.zeros((2, 4)))


def test_kl_naive_examples():
    z = np.random.default_rng(1).standard_normal((2, 5))
    assert oracle.kl_naive(z, z, 2.0) == pytest.approx(0.0, abs=1e-15)
    got = oracle.kl_naive([[1.0, 0.0]], [[0.0, 1.0]], 1.0)
    assert got == pytest.approx((math.e - 1) / (math.e + 1), abs=1e-12)


def test_grad_check_exact_quadratic():
    with T.precision(np.float64):
        p = Tensor(np.random.default_rng(2).standard_normal((3, 4)), requires_grad=True)
        report = oracle.grad_check(lambda: T.scale(T.sq_frobenius(p), 0.5), [p])
    assert report.worst <= 1e-9
    assert report.passed(1e-9)
    assert all(v >= 0 and math.isfinite(v) for v in report.max_abs_error.values())


def test_grad_check_catches_a_wrong_gradient():
    with T.precision(np.float64):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def wrong():
            # forward is p^2, backward claims 3p
            out = T.mul(p, p)
            out._backward = lambda g: (3 * g * p.data,)
            out._parents = (p,)
            return T.tsum(out)

        report = oracle.grad_check(wrong, [p])
    assert not report.passed(1e-4)


def test_grad_check_detects_nondeterminism():
    rng = np.random.default_rng(3)
    with T.precision(np.float64):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(OracleError):
            oracle.grad_check(lambda: T.tsum(T.mul(p, rng.standard_normal())), [p])


def test_grad_check_needs_float64():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(OracleError):
        oracle.grad_check(lambda: T.tsum(p), [p])


def test_grad_check_restores_parameters():
    with T.precision(np.float64):
        p = Tensor(np.random.default_rng(4).standard_normal(5), requires_grad=True)
        before = p.data.copy()
        oracle.grad_check(lambda: T.tsum(T.exp(p)), {"p": p})
    np.testing.assert_array_equal(p.data, before)


def test_naive_conv_and_matmul_agree_with_numpy():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(oracle.matmul_naive(a, b), a @ b, atol=1e-12)
    x, w = rng.standard_normal((1, 1, 3, 3)), np.ones((1, 1, 1, 1))
    np.testing.assert_array_equal(oracle.conv2d_naive(x, w), x)
