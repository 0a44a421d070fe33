import numpy as np
import pytest

from routelock.errors import NumericError
from routelock.params import (
    ParamVector,
    finite_diff_grad,
    finite_diff_hessian_block,
    grads_max_relative_error,
    value_and_grad,
)
from routelock.tensor import matmul, mul, sum_all


def pv(**kw):
    return ParamVector(kw.items())


def quad_loss(leaves, _batch):
    # 0.5 * |p|^2 over every segment
    total = None
    for t in leaves.values():
        term = mul(sum_all(mul(t, t)), 0.5)
        total = term if total is None else total + term
    return total


def test_flatten_roundtrip_identity():
    rng = np.random.default_rng(0)
    p = pv(a=rng.normal(size=(3, 4)), b=rng.normal(size=7), c=rng.normal(size=(2, 2, 2)))
    again = p.from_flat(p.flatten())
    for name, arr in p.items():
        assert np.array_equal(arr, again[name])


def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        ParamVector([("a", np.zeros(2)), ("a", np.zeros(2))])


def test_segment_slice():
    p = pv(a=np.zeros((2, 3)), b=np.zeros(4))
    assert p.segment_slice("a") == (0, 6)
    assert p.segment_slice("b") == (6, 10)


def test_value_and_grad_quadratic():
    rng = np.random.default_rng(1)
    p = pv(a=rng.normal(size=5), b=rng.normal(size=(2, 3)))
    loss, grads = value_and_grad(quad_loss, p, None)
    assert abs(loss - 0.5 * float(np.sum(p.flatten() ** 2))) < 1e-12
    for name, arr in p.items():
        assert np.allclose(grads[name], arr, atol=1e-14)


def test_untouched_segment_grad_is_bitwise_zero():
    p = pv(used=np.ones(3), unused=np.ones(4))

    def loss_fn(leaves, _):
        return sum_all(mul(leaves["used"], leaves["used"]))

    _, grads = value_and_grad(loss_fn, p, None)
    assert np.array_equal(grads["unused"], np.zeros(4))
    assert grads["unused"].tobytes() == np.zeros(4).tobytes()


def test_nonfinite_loss_names_operation():
    p = pv(a=np.array([1e200]))

    def loss_fn(leaves, _):
        big = mul(leaves["a"], leaves["a"])  # overflows to inf
        return sum_all(big)

    with np.errstate(over="ignore"):
        with pytest.raises(NumericError, match="mul"):
            value_and_grad(loss_fn, p, None)


def test_finite_diff_simple_quadratic():
    p = pv(a=np.array([3.0]))

    def loss_fn(leaves, _):
        return mul(sum_all(mul(leaves["a"], leaves["a"])), 0.5)

    g = finite_diff_grad(loss_fn, p, None, step=1e-4)
    assert abs(g["a"][0] - 3.0) <= 1e-7


def test_finite_diff_constant_loss():
    p = pv(a=np.ones(4))

    def loss_fn(leaves, _):
        return sum_all(mul(leaves["a"], np.zeros(4)))

    g = finite_diff_grad(loss_fn, p, None)
    assert np.array_equal(g["a"], np.zeros(4))


def test_finite_diff_agrees_with_reverse_mode():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 4))
    p = pv(x=rng.normal(size=(3, 4)))

    def loss_fn(leaves, _):
        y = matmul(leaves["x"], w)
        return sum_all(mul(y, y))

    _, rev = value_and_grad(loss_fn, p, None)
    fd = finite_diff_grad(loss_fn, p, None)
    assert grads_max_relative_error(rev, fd) <= 1e-5


def test_hessian_block_separable():
    p = pv(a=np.array([1.0, 2.0]), b=np.array([0.5]))

    def loss_fn(leaves, _):
        return sum_all(mul(leaves["a"], leaves["a"])) + sum_all(mul(leaves["b"], leaves["b"]))

    worst = finite_diff_hessian_block(loss_fn, p, None, {"a"}, {"b"}, probes=8)
    assert worst <= 1e-6


def test_hessian_block_bilinear():
    p = pv(a=np.array([1.3]), b=np.array([-0.7]))

    def loss_fn(leaves, _):
        return sum_all(mul(leaves["a"], leaves["b"]))

    worst = finite_diff_hessian_block(loss_fn, p, None, {"a"}, {"b"}, probes=4)
    assert abs(worst - 1.0) <= 1e-4


def test_hessian_block_overlap_rejected():
    p = pv(a=np.zeros(2), b=np.zeros(2))
    with pytest.raises(ValueError, match="overlap"):
        finite_diff_hessian_block(lambda l, _: sum_all(l["a"]), p, None, {"a"}, {"a", "b"})


def test_hessian_block_bad_probes():
    p = pv(a=np.zeros(2), b=np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_hessian_block(lambda l, _: sum_all(l["a"]), p, None, {"a"}, {"b"}, probes=0)


def test_add_scaled():
    p = pv(a=np.array([1.0, 2.0]))
    q = pv(a=np.array([10.0, 20.0]))
    out = p.add_scaled(q, -0.1)
    assert np.allclose(out["a"], [0.0, 0.0])
