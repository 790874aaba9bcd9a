import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enfield import autodiff as ad
from enfield.autodiff import (
    Tensor,
    backward,
    evaluate_with_gradients,
    finite_difference_check,
)
from enfield.errors import CheckInvalidError, NumericError, ShapeError


def _fd_scalar(f, x, h=1e-6):
    """Central differences of a scalar numpy function, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f(x)
        flat[i] = orig - h
        minus = f(x)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


PRIMITIVES = {
    "add": lambda a, b: ad.tsum(ad.add(a, b)),
    "sub": lambda a, b: ad.tsum(ad.sub(a, b)),
    "mul": lambda a, b: ad.tsum(ad.mul(a, b)),
    "div": lambda a, b: ad.tsum(ad.div(a, ad.add(b, Tensor(3.0)))),
    "matmul": lambda a, b: ad.tsum(ad.matmul(a, ad.transpose(b))),
    "exp": lambda a, b: ad.tsum(ad.exp(a)),
    "sin": lambda a, b: ad.tsum(ad.sin(ad.mul(a, b))),
    "cos": lambda a, b: ad.tsum(ad.cos(a)),
    "sumsq": lambda a, b: ad.squared_norm(ad.mul(a, b)),
    "softmax": lambda a, b: ad.tsum(ad.mul(ad.softmax(a, axis=1), b)),
    "concat": lambda a, b: ad.tsum(ad.squared_norm(ad.concat([a, b], axis=1))),
    "mean": lambda a, b: ad.mean(ad.mul(a, a)),
    "reshape": lambda a, b: ad.tsum(ad.mul(ad.reshape(a, (a.data.size,)), ad.reshape(b, (b.data.size,)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name, rng):
    op = PRIMITIVES[name]
    a0 = rng.uniform(-1, 1, (3, 4))
    b0 = rng.uniform(-1, 1, (3, 4))
    value, grads = evaluate_with_gradients(lambda p: op(p["a"], p["b"]), {"a": a0, "b": b0})
    for key, base in (("a", a0), ("b", b0)):
        def scalar(x, key=key):
            parts = {"a": Tensor(a0), "b": Tensor(b0)}
            parts[key] = Tensor(x)
            return float(op(parts["a"], parts["b"]).data)

        fd = _fd_scalar(scalar, base.copy())
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grads[key] - fd) / denom) < 1e-6, f"{name}/{key}"


def test_gather_scatter_gradients(rng):
    x0 = rng.standard_normal((5, 3))
    idx = np.array([0, 2, 2, 4])

    def f(p):
        g = ad.gather(p["x"], idx, axis=0)
        return ad.squared_norm(g)

    _, grads = evaluate_with_gradients(f, {"x": x0})
    expected = np.zeros_like(x0)
    for i in idx:
        expected[i] += 2 * x0[i]
    # row 2 is taken twice: gradient accumulates
    assert np.allclose(grads["x"], expected, atol=1e-12)


def test_sine_gradient_at_zero():
    value, grads = evaluate_with_gradients(lambda p: ad.sin(p["x"]), {"x": np.array(0.0)})
    assert value == 0.0
    assert grads["x"] == pytest.approx(1.0, abs=1e-15)


def test_squared_norm_gradient():
    _, grads = evaluate_with_gradients(
        lambda p: ad.squared_norm(p["x"]), {"x": np.array([1.0, 2.0, 3.0])})
    assert np.array_equal(grads["x"], np.array([2.0, 4.0, 6.0]))


def test_softmax_dot_matches_finite_differences(rng):
    w = rng.standard_normal(4)

    def f(p):
        return ad.tsum(ad.mul(ad.softmax(p["x"], axis=0), Tensor(w)))

    report = finite_difference_check(f, {"x": rng.standard_normal(4)}, h=1e-5, tol=1e-6)
    assert report.passed, str(report)


def test_backward_requires_scalar(rng):
    x = Tensor(rng.standard_normal((2, 2)))
    with pytest.raises(ShapeError):
        backward(ad.mul(x, x), [x])


def test_backward_sum_of_subgraphs_is_sum_of_backwards(rng):
    x0 = rng.standard_normal((3,))
    y0 = rng.standard_normal((3,))

    def build(p):
        f1 = ad.squared_norm(ad.sin(p["x"]))
        f2 = ad.tsum(ad.exp(p["y"]))
        return f1, f2

    def total(p):
        f1, f2 = build(p)
        return ad.add(f1, f2)

    _, combined = evaluate_with_gradients(total, {"x": x0, "y": y0})
    _, only_x = evaluate_with_gradients(lambda p: build(p)[0], {"x": x0, "y": y0})
    _, only_y = evaluate_with_gradients(lambda p: build(p)[1], {"x": x0, "y": y0})
    assert np.allclose(combined["x"], only_x["x"] + only_y["x"], atol=1e-15)
    assert np.allclose(combined["y"], only_x["y"] + only_y["y"], atol=1e-15)


def test_repeated_evaluation_is_bit_identical(rng):
    x0 = rng.standard_normal((4, 4))

    def f(p):
        return ad.tsum(ad.softmax(ad.matmul(p["x"], p["x"]), axis=1))

    v1, g1 = evaluate_with_gradients(f, {"x": x0})
    v2, g2 = evaluate_with_gradients(f, {"x": x0})
    assert v1 == v2
    assert np.array_equal(g1["x"], g2["x"])


def test_second_order_through_gradient_step(rng):
    # d/dx of g(x) where g = d/dx x^3 must be 6x.
    x = Tensor(np.array(2.0))
    y = ad.mul(ad.mul(x, x), x)
    (g1,) = backward(y, [x], create_graph=True)
    (g2,) = backward(g1, [x])
    assert float(g2.data) == pytest.approx(12.0, rel=1e-12)


def test_second_order_inner_loop_matches_fd(rng):
    target = rng.standard_normal((5, 1))
    design = rng.standard_normal((5, 3))

    def outer(p):
        w = p["w"]
        c = Tensor(np.zeros((2, 1)))
        for _ in range(2):
            pred = ad.matmul(ad.matmul(Tensor(design), w), c)
            loss = ad.mul(ad.squared_norm(ad.sub(pred, Tensor(target))), Tensor(0.2))
            (gc,) = backward(loss, [c], create_graph=True)
            c = ad.sub(c, ad.mul(Tensor(0.5), gc))
        pred = ad.matmul(ad.matmul(Tensor(design), w), c)
        return ad.mul(ad.squared_norm(ad.sub(pred, Tensor(target))), Tensor(0.2))

    report = finite_difference_check(outer, {"w": rng.standard_normal((3, 2))}, h=1e-6, tol=1e-6)
    assert report.passed, str(report)


def test_linear_function_differentiates_exactly(rng):
    w = rng.standard_normal(6)

    def f(p):
        return ad.tsum(ad.mul(p["x"], Tensor(w)))

    report = finite_difference_check(f, {"x": rng.standard_normal(6)}, h=1e-4, tol=1e-9)
    assert report.passed
    assert report.max_rel_err < 1e-9


def test_nondeterministic_target_is_rejected():
    def f(p):
        return ad.mul(p["x"], Tensor(np.random.rand()))

    with pytest.raises(CheckInvalidError):
        finite_difference_check(f, {"x": np.array(1.0)})


def test_nonpositive_step_rejected():
    with pytest.raises(CheckInvalidError):
        finite_difference_check(lambda p: p["x"], {"x": np.array(1.0)}, h=0.0)


def test_shape_mismatch_raises_dimension_error(rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((4, 5)))
    with pytest.raises(ShapeError):
        ad.matmul(a, b)
    with pytest.raises(ShapeError):
        ad.add(a, Tensor(rng.standard_normal((3, 2))))


def test_nonfinite_intermediate_is_flagged_with_node():
    def f(p):
        return ad.tsum(ad.div(Tensor(np.ones(2)), p["x"]))

    with pytest.raises(NumericError, match="op="):
        evaluate_with_gradients(f, {"x": np.zeros(2)})


def test_random_direction_mode_for_large_parameters(rng):
    big = rng.standard_normal((40, 40))

    def f(p):
        return ad.squared_norm(ad.sin(p["x"]))

    report = finite_difference_check(f, {"x": big}, h=1e-6, tol=1e-6,
                                     exhaustive_limit=100, n_directions=4)
    assert report.passed, str(report)


def test_large_parameter_count_uses_directions_not_coordinates(rng):
    calls = {"n": 0}

    def f(p):
        calls["n"] += 1
        return ad.squared_norm(p["x"])

    finite_difference_check(f, {"x": rng.standard_normal(2048)},
                            exhaustive_limit=512, n_directions=3)
    # determinism check (2) + analytic (1) + 2 evals per direction
    assert calls["n"] == 2 + 1 + 2 * 3


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_mul_add_gradients_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a0 = rng.uniform(-1, 1, (rows, cols))
    b0 = rng.uniform(-1, 1, (rows, cols))

    def f(p):
        return ad.tsum(ad.add(ad.mul(p["a"], p["b"]), ad.mul(p["a"], p["a"])))

    _, grads = evaluate_with_gradients(f, {"a": a0, "b": b0})
    assert np.allclose(grads["a"], b0 + 2 * a0, atol=1e-12)
    assert np.allclose(grads["b"], a0, atol=1e-12)


def test_no_grad_blocks_recording():
    with ad.no_grad():
        x = Tensor(np.ones(3))
        y = ad.mul(x, x)
    assert y.parents == ()
    assert y.vjp is None


def test_broadcasting_add_unbroadcasts_gradient(rng):
    a0 = rng.standard_normal((4, 3))
    b0 = rng.standard_normal((1, 3))

    def f(p):
        return ad.squared_norm(ad.add(p["a"], p["b"]))

    _, grads = evaluate_with_gradients(f, {"a": a0, "b": b0})
    assert grads["b"].shape == (1, 3)
    assert np.allclose(grads["b"], (2 * (a0 + b0)).sum(axis=0, keepdims=True), atol=1e-12)
