"""Reverse-mode core: exact gradients, kink conventions, finite differences."""

from __future__ import annotations

import numpy as np
import pytest

from lane3d import autodiff as ad


def test_product_plus_exp_gradients():
    # f(a, b) = a*b + exp(a) at (2, 3): df/da = b + e^2, df/db = a
    a, b = ad.Var(2.0), ad.Var(3.0)
    f = a * b + ad.exp(a)
    f.backward()
    assert np.isclose(float(f.value), 6.0 + np.exp(2.0), atol=1e-12)
    assert np.isclose(float(a.grad), 3.0 + np.exp(2.0), atol=1e-12)
    assert np.isclose(float(b.grad), 2.0, atol=1e-12)


def test_shared_subexpression_accumulates():
    # f = (a + a) * a = 2 a^2, df/da = 4a
    a = ad.Var(1.5)
    f = (a + a) * a
    f.backward()
    assert np.isclose(float(a.grad), 6.0, atol=1e-12)


def test_forward_does_not_touch_grad():
    a = ad.Var(2.0)
    b = a * a + ad.exp(a)
    assert a.grad is None and b.grad is None


def test_unused_leaf_gets_zero_gradient():
    a, b = ad.Var(2.0), ad.Var(5.0)
    f = a * a + 0.0 * b
    f.backward()
    assert float(b.grad) == 0.0


def test_backward_requires_scalar():
    v = ad.Var(np.ones(3))
    with pytest.raises(ValueError):
        v.backward()


def test_relu_subgradient_zero_at_kink():
    x = ad.Var(np.array([-1.0, 0.0, 2.0]))
    y = ad.relu(x).sum()
    y.backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_absolute_subgradient_zero_at_kink():
    x = ad.Var(np.array([-3.0, 0.0, 4.0]))
    y = ad.absolute(x).sum()
    y.backward()
    assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_min_tie_routes_to_lowest_index():
    x = ad.Var(np.array([3.0, 1.0, 1.0]))
    y = ad.reduce_min(x)
    y.backward()
    assert float(y.value) == 1.0
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_min_axis_gradient():
    x = ad.Var(np.array([[2.0, 5.0], [7.0, 1.0]]))
    y = ad.reduce_min(x, axis=1).sum()
    y.backward()
    assert np.array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0]])


def test_sigmoid_midpoint():
    x = ad.Var(0.0)
    y = ad.sigmoid(x)
    y.backward()
    assert float(y.value) == 0.5
    assert np.isclose(float(x.grad), 0.25, atol=1e-15)


def test_sigmoid_extreme_inputs_stay_finite():
    x = ad.Var(np.array([-800.0, 800.0]))
    y = ad.sigmoid(x)
    assert np.all(np.isfinite(y.value))
    assert np.isclose(y.value[0], 0.0, atol=1e-300)
    assert y.value[1] == 1.0


def test_broadcast_gradient_sums_to_parent_shape():
    a = ad.Var(np.ones((3, 4)))
    b = ad.Var(np.ones(4))
    c = ad.Var(2.0)
    f = ((a + b) * c).sum()
    f.backward()
    assert a.grad.shape == (3, 4) and np.all(a.grad == 2.0)
    assert b.grad.shape == (4,) and np.all(b.grad == 6.0)
    assert np.isclose(float(c.grad), 24.0)


def test_matmul_gradients_match_manual():
    rng = np.random.default_rng(0)
    av, bv = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a, b = ad.Var(av), ad.Var(bv)
    f = ad.matmul(a, b).sum()
    f.backward()
    ones = np.ones((3, 2))
    assert np.allclose(a.grad, ones @ bv.T, atol=1e-12)
    assert np.allclose(b.grad, av.T @ ones, atol=1e-12)


def test_getitem_scatter_accumulates_duplicates():
    x = ad.Var(np.array([1.0, 2.0, 3.0]))
    idx = np.array([0, 0, 2])
    y = x[idx].sum()
    y.backward()
    assert np.array_equal(x.grad, [2.0, 0.0, 1.0])


def test_divide_rejects_zero_denominator():
    with pytest.raises(ValueError):
        ad.divide(ad.Var(1.0), ad.Var(0.0))


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ad.log(ad.Var(np.array([1.0, 0.0])))


def test_where_routes_by_mask():
    a = ad.Var(np.array([1.0, 2.0]))
    b = ad.Var(np.array([10.0, 20.0]))
    y = ad.where([True, False], a, b).sum()
    y.backward()
    assert np.array_equal(a.grad, [1.0, 0.0])
    assert np.array_equal(b.grad, [0.0, 1.0])


def test_stack_splits_gradient():
    a, b = ad.Var(np.array([1.0, 2.0])), ad.Var(np.array([3.0, 4.0]))
    y = (ad.stack([a, b]) * np.array([[1.0, 2.0], [3.0, 4.0]])).sum()
    y.backward()
    assert np.array_equal(a.grad, [1.0, 2.0])
    assert np.array_equal(b.grad, [3.0, 4.0])


def test_evaluate_with_gradients_quadratic():
    value, grads = ad.evaluate_with_gradients(
        lambda xs: xs[0] * xs[0] + xs[1] * xs[0], [3.0, 5.0]
    )
    assert np.isclose(value, 24.0)
    assert np.allclose(grads, [11.0, 3.0])


def _rel_err(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))


SMOOTH_UNARY = [
    ("exp", ad.exp, (-2.0, 2.0)),
    ("log", ad.log, (0.5, 4.0)),
    ("tanh", ad.tanh, (-3.0, 3.0)),
    ("sigmoid", ad.sigmoid, (-4.0, 4.0)),
    ("square", ad.square, (-3.0, 3.0)),
]


@pytest.mark.parametrize("name,op,rng_span", SMOOTH_UNARY, ids=[s[0] for s in SMOOTH_UNARY])
def test_unary_ops_match_central_differences(name, op, rng_span):
    lo, hi = rng_span
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(lo, hi, size=5)
        report = ad.finite_difference_check(
            lambda p, op=op: op(p["x"]).sum(), {"x": x0}, step=1e-6
        )
        assert report.max_relative_error < 1e-7, (name, seed)


def test_composite_programs_match_central_differences():
    # random mixes of primitives, away from kinks, checked against FD
    def program(p):
        x, w, b = p["x"], p["w"], p["b"]
        h = ad.tanh(ad.matmul(x, w) + b)
        s = ad.sigmoid(h).mean()
        return s * s + ad.exp(-s) + ad.log(s + 2.0)

    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = {
            "x": rng.normal(size=(3, 4)),
            "w": rng.normal(size=(4, 2)),
            "b": rng.normal(size=2),
        }
        report = ad.finite_difference_check(program, params, step=1e-6)
        assert report.max_relative_error < 1e-6, seed


def test_min_and_abs_programs_away_from_kinks():
    def program(p):
        d = ad.absolute(p["a"] - p["b"])
        return ad.reduce_min(d, axis=1).sum()

    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(4, 3)) + 5.0  # keep |a-b| far from 0 and ties apart
        report = ad.finite_difference_check(program, {"a": a, "b": b}, step=1e-6)
        assert report.max_relative_error < 1e-6, seed


def test_gradcheck_report_worst_parameter():
    report = ad.GradCheckReport(
        max_relative_error=0.5, per_parameter={"w": 0.5, "b": 0.1}
    )
    assert report.worst_parameter() == "w"


def test_gradcheck_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda p: p["x"].sum(), {"x": np.ones(2)}, step=0.0)


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = ad.Var(rng.normal(size=(5, 5)))
        w = ad.Var(rng.normal(size=(5, 5)))
        f = ad.sigmoid(ad.matmul(x, w)).sum() * ad.exp(ad.reduce_min(x))
        f.backward()
        return float(f.value), x.grad.copy(), w.grad.copy()

    v1, gx1, gw1 = run()
    v2, gx2, gw2 = run()
    assert v1 == v2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)
