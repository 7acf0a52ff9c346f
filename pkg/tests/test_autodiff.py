import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connectprune.autodiff import (
    DimensionError,
    Tape,
    TapeStateError,
    abs_with_subgradient,
    backward,
    forward,
)
from connectprune.harness.properties import finite_difference_gradient


def _run(build):
    tape = Tape()
    tape.set_exit(build(tape))
    return forward(tape), tape


def test_matmul_value():
    value, tape = _run(lambda t: t.matmul(t.constant("a", [[1.0, 2.0]]), t.constant("b", [[3.0], [4.0]])))
    assert value == 11.0


def test_relu_value():
    tape = Tape()
    r = tape.relu(tape.constant("x", [[-1.0, 2.0]]))
    tape.set_exit(tape.sum(r))
    forward(tape)
    np.testing.assert_array_equal(r.value, [[0.0, 2.0]])


def test_sum_of_ones():
    value, _ = _run(lambda t: t.sum(t.constant("x", np.ones((2, 2)))))
    assert value == 4.0


def test_linear_gradient():
    tape = Tape()
    w = tape.leaf("W", np.array([[0.3, -1.2], [2.0, 0.5]]))
    x = tape.constant("x", np.ones((2, 1)))
    tape.set_exit(tape.sum(tape.matmul(w, x)))
    forward(tape)
    np.testing.assert_array_equal(backward(tape)["W"], np.ones((2, 2)))


def test_log_gradient():
    tape = Tape()
    s = tape.leaf("s", 2.0)
    tape.set_exit(tape.log(s))
    forward(tape)
    assert backward(tape)["s"][0, 0] == pytest.approx(0.5, abs=1e-15)


def test_two_consumers_accumulate():
    tape = Tape()
    x = tape.leaf("x", 1.7)
    tape.set_exit(tape.mul(x, x))
    forward(tape)
    assert backward(tape)["x"][0, 0] == pytest.approx(3.4, abs=1e-15)


def test_abs_subgradient_convention():
    value, sign = abs_with_subgradient([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(value, [2.0, 0.0, 3.0])
    np.testing.assert_array_equal(sign, [-1.0, 0.0, 1.0])

    tape = Tape()
    x = tape.leaf("x", 0.0)
    tape.set_exit(tape.abs(x))
    forward(tape)
    assert backward(tape)["x"][0, 0] == 0.0


@given(st.floats(min_value=1e-3, max_value=10.0), st.booleans())
def test_abs_gradient_matches_fd(mag, negative):
    x0 = -mag if negative else mag
    tape = Tape()
    x = tape.leaf("x", x0)
    tape.set_exit(tape.abs(x))
    forward(tape)
    g = backward(tape)["x"][0, 0]
    h = 1e-5 * max(1.0, abs(x0))
    fd = (abs(x0 + h) - abs(x0 - h)) / (2 * h)
    assert abs(g - fd) <= 1e-6 * abs(fd)


def test_backward_before_forward():
    tape = Tape()
    tape.set_exit(tape.sum(tape.leaf("x", 1.0)))
    with pytest.raises(TapeStateError):
        backward(tape)


def test_rebinding_invalidates_forward():
    tape = Tape()
    tape.set_exit(tape.sum(tape.leaf("x", 1.0)))
    forward(tape)
    tape.bind("x", 2.0)
    with pytest.raises(TapeStateError):
        backward(tape)


def test_shape_error_names_both_nodes():
    tape = Tape()
    a = tape.leaf("alpha", np.ones((2, 3)))
    b = tape.leaf("beta", np.ones((2, 3)))
    tape.set_exit(tape.sum(tape.matmul(a, b)))
    with pytest.raises(DimensionError, match="alpha.*beta"):
        forward(tape)


def test_exit_must_be_scalar():
    tape = Tape()
    tape.set_exit(tape.leaf("x", np.ones((2, 2))))
    with pytest.raises(DimensionError):
        forward(tape)


def test_unbound_leaf():
    tape = Tape()
    tape.set_exit(tape.sum(tape.leaf("x")))
    with pytest.raises(TapeStateError, match="not bound"):
        forward(tape)


def test_zero_safe_div():
    tape = Tape()
    a = tape.leaf("a", [[1.0, 2.0]])
    b = tape.leaf("b", [[0.0, 4.0]])
    q = tape.div(a, b, zero_safe=True)
    tape.set_exit(tape.sum(q))
    forward(tape)
    np.testing.assert_array_equal(q.value, [[0.0, 0.5]])
    g = backward(tape)
    np.testing.assert_array_equal(g["a"], [[0.0, 0.25]])
    np.testing.assert_array_equal(g["b"], [[0.0, -2.0 / 16.0]])


def test_log_floor_has_zero_slope_below():
    tape = Tape()
    s = tape.leaf("s", 1e-20)
    tape.set_exit(tape.log(s, floor=1e-12))
    assert forward(tape) == pytest.approx(np.log(1e-12))
    assert backward(tape)["s"][0, 0] == 0.0


def _mlp_tape(rng):
    tape = Tape()
    x = tape.constant("x", rng.normal(size=(7, 4)))
    y = tape.constant("y", (rng.random((7, 1)) > 0.5).astype(float))
    h = x
    for k, (n_in, n_out) in enumerate([(4, 5), (5, 3), (3, 1)]):
        w = tape.leaf(f"W{k}", rng.uniform(0.1, 1.0, (n_out, n_in)) * rng.choice([-1, 1], (n_out, n_in)))
        b = tape.leaf(f"b{k}", rng.uniform(0.1, 1.0, (1, n_out)))
        h = tape.add(tape.matmul(h, tape.transpose(w)), b)
        if k < 2:
            h = tape.sigmoid(h)
    tape.set_exit(tape.bce_logits(h, y))
    return tape


def test_mlp_gradient_matches_finite_differences():
    tape = _mlp_tape(np.random.default_rng(3))
    params = {n.name: n.value.copy() for n in tape.params}

    def f():
        for name, v in params.items():
            tape.bind(name, v)
        return forward(tape)

    fd = finite_difference_gradient(f, params)
    f()
    ad = backward(tape)
    for name in params:
        err = np.abs(ad[name] - fd[name])
        ok = (err <= 1e-4 * np.abs(fd[name])) | (err < 1e-8)
        assert ok.all(), name


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_expression_gradients(seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    a = tape.leaf("a", rng.uniform(1e-3, 10, (3, 2)) * rng.choice([-1, 1], (3, 2)))
    b = tape.leaf("b", rng.uniform(1e-3, 10, (2, 2)))
    prod = tape.matmul(a, b)
    expr = tape.add(tape.log(tape.add(tape.abs(prod), tape.constant("one", 1.0))), tape.scale(tape.mul(a, a), 0.01))
    expr2 = tape.div(tape.sum(expr), tape.sum(tape.abs(b)))
    tape.set_exit(expr2)
    params = {"a": a.value.copy(), "b": b.value.copy()}

    def f():
        tape.bind("a", params["a"])
        tape.bind("b", params["b"])
        return forward(tape)

    fd = finite_difference_gradient(f, params)
    f()
    ad = backward(tape)
    for name in params:
        err = np.abs(ad[name] - fd[name])
        assert ((err <= 1e-4 * np.abs(fd[name])) | (err < 1e-8)).all()


def test_repeated_backward_is_bit_identical():
    tape = _mlp_tape(np.random.default_rng(11))
    forward(tape)
    first = {k: v.copy() for k, v in backward(tape).items()}
    forward(tape)
    second = backward(tape)
    for k in first:
        assert first[k].tobytes() == second[k].tobytes()
