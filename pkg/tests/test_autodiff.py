import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipcd import autodiff as ad

TOL = 1e-4


def check_op(build, shapes, seed=0):
    """Grad-check ``sum(W * build(*inputs))`` with respect to every input."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    out_shape = None

    def run(vals, want_grad=False):
        nonlocal out_shape
        tape = ad.Tape()
        ts = [tape.param(f"x{i}", v) for i, v in enumerate(vals)]
        y = build(*ts)
        if out_shape is None:
            out_shape = y.shape
        w = np.random.default_rng(99).normal(size=out_shape)
        loss = ad.sum_all(ad.mul(y, w))
        if want_grad:
            return ad.backward(loss)
        return float(loss.value), tape.signature()

    grads = run(xs, want_grad=True)
    for i, x in enumerate(xs):
        def f(v, i=i):
            vals = list(xs)
            vals[i] = v.reshape(x.shape)
            return run(vals)
        rep = ad.grad_check_report(f, x, grads[f"x{i}"])
        assert rep.max_rel_error < TOL, (i, rep)
        assert rep.checked > 0


OPS = {
    "add": (lambda a, b: ad.add(a, b), [(4, 3), (4, 3)]),
    "add_rows": (lambda a, b: ad.add(a, b), [(5, 3), (1, 3)]),
    "sub": (lambda a, b: ad.sub(a, b), [(4, 3), (1, 3)]),
    "mul": (lambda a, b: ad.mul(a, b), [(4, 3), (4, 3)]),
    "scale": (lambda a: ad.scale(a, -2.5), [(3, 2)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(4, 3), (3, 5)]),
    "relu": (lambda a: ad.relu(a), [(6, 4)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(6, 4)]),
    "concat": (lambda a, b: ad.concat([a, b]), [(4, 2), (4, 3)]),
    "gather_rows": (lambda a: ad.gather_rows(a, np.array([[0, 2, 2], [1, 1, 3]])), [(4, 3)]),
    "reduce_max": (lambda a: ad.reduce_max(a, 1), [(5, 4, 3)]),
    "gather_max": (lambda a: ad.gather_max(a, np.array([[1, 2], [0, 2], [3, 3], [0, 1]])), [(4, 3)]),
    "sum_all": (lambda a: ad.sum_all(a), [(3, 3)]),
    "mean_all": (lambda a: ad.mean_all(a), [(3, 3)]),
    "frobenius_norm": (lambda a: ad.frobenius_norm(a), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradients(name, seed):
    build, shapes = OPS[name]
    check_op(build, shapes, seed)


def test_composite_gradient():
    def build(x, w1, w2):
        h = ad.relu(ad.matmul(x, w1))
        g = ad.gather_max(h, np.array([[1, 2], [0, 2], [0, 1]]))
        return ad.frobenius_norm(ad.sub(ad.sigmoid(ad.matmul(ad.concat([h, g]), w2)), 0.3))
    check_op(build, [(3, 4), (4, 5), (10, 2)])


def test_examples():
    np.testing.assert_array_equal(ad.relu(ad.const([-1.0, 2.0])).value, [0.0, 2.0])
    assert ad.sigmoid(ad.const(0.0)).value == 0.5
    assert float(ad.frobenius_norm(ad.const(np.full((100, 3), 0.1))).value) == pytest.approx(np.sqrt(3.0), abs=1e-12)


def test_backward_examples():
    tape = ad.Tape()
    x = tape.param("x", [1.0, -2.0, 5.0])
    np.testing.assert_array_equal(ad.backward(ad.sum_all(x))["x"], [1, 1, 1])
    tape = ad.Tape()
    x = tape.param("x", [3.0, 4.0])
    np.testing.assert_allclose(ad.backward(ad.frobenius_norm(x))["x"], [0.6, 0.8], atol=1e-15)


def test_constants_get_no_gradient():
    tape = ad.Tape()
    p = tape.bind({"a": np.ones(3), "b": np.ones(3)}, names={"a"})
    grads = ad.backward(ad.sum_all(ad.mul(p["a"], p["b"])))
    assert set(grads) == {"a"}


def test_unused_param_gets_zero():
    tape = ad.Tape()
    x = tape.param("x", np.ones(2))
    tape.param("unused", np.ones((2, 2)))
    grads = ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_gather_rows_accumulates_duplicates():
    tape = ad.Tape()
    x = tape.param("x", np.arange(6.0).reshape(3, 2))
    g = ad.backward(ad.sum_all(ad.gather_rows(x, [0, 0, 2, 0])))["x"]
    np.testing.assert_array_equal(g, [[3, 3], [0, 0], [1, 1]])


def test_gather_max_matches_unfused(rng):
    x = rng.normal(size=(50, 8))
    x[3] = x[7]  # exact ties go to the first maximizer in both paths
    idx = rng.integers(0, 50, size=(50, 6))
    idx[:, 1] = idx[:, 0]
    w = rng.normal(size=(50, 8))
    out = {}
    for fused in (True, False):
        tape = ad.Tape()
        t = tape.param("x", x)
        y = ad.gather_max(t, idx) if fused else ad.reduce_max(ad.gather_rows(t, idx), 1)
        out[fused] = (y.value, ad.backward(ad.sum_all(ad.mul(y, w)))["x"])
    np.testing.assert_array_equal(out[True][0], out[False][0])
    np.testing.assert_allclose(out[True][1], out[False][1], atol=1e-14)


def test_backward_linear(rng):
    x0 = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))

    def grads(a, b):
        tape = ad.Tape()
        x = tape.param("x", x0)
        h = ad.relu(ad.matmul(x, w))
        l1 = ad.frobenius_norm(h)
        l2 = ad.mean_all(ad.sigmoid(x))
        return ad.backward(ad.add(ad.scale(l1, a), ad.scale(l2, b)))["x"]

    np.testing.assert_allclose(grads(2.0, -3.0), 2.0 * grads(1.0, 0.0) - 3.0 * grads(0.0, 1.0), atol=1e-10)


def test_backward_deterministic(rng):
    x0 = rng.normal(size=(20, 5))

    def run():
        tape = ad.Tape()
        x = tape.param("x", x0)
        return ad.backward(ad.frobenius_norm(ad.gather_max(ad.relu(x), np.tile(np.arange(20), (3, 1)).T)))["x"]

    assert run().tobytes() == run().tobytes()


def test_errors():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.const(np.ones((2, 3))), ad.const(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(ad.const(np.ones((2, 3))), ad.const(np.ones((3, 2))))
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([ad.const(np.ones((2, 3))), ad.const(np.ones((3, 3)))])
    tape = ad.Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(ad.ContractError):
        ad.backward(x * 2.0)
    with pytest.raises(FloatingPointError):
        ad.mul(x, np.array([np.inf, 1, 1]))


def test_adam_first_step_is_lr():
    state = ad.AdamState(lr=1e-3)
    p = {"w": np.zeros(4)}
    out = ad.adam_step(p, {"w": np.array([0.5, -2.0, 10.0, -1e-3])}, state)
    np.testing.assert_allclose(np.abs(out["w"]), 1e-3, rtol=1e-4)
    assert state.step == 1


def test_adam_zero_gradient():
    state = ad.AdamState()
    p = {"w": np.array([1.0, 2.0])}
    out = ad.adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(out["w"], p["w"])
    np.testing.assert_array_equal(state.m["w"], 0)
    np.testing.assert_array_equal(state.v["w"], 0)


def test_adam_quadratic():
    state = ad.AdamState(lr=0.1)
    p = {"x": np.array([1.0])}
    for _ in range(200):
        p = ad.adam_step(p, {"x": 2 * p["x"]}, state)
    assert abs(p["x"][0]) < 0.05


def test_grad_check_examples():
    assert ad.grad_check(lambda v: float(v[0] ** 2), np.array([3.0]), np.array([6.0])) < 1e-8

    def relu_fn(v):
        tape = ad.Tape()
        return float(ad.relu(tape.param("x", v)).value[0]), tape.signature()

    rep = ad.grad_check_report(relu_fn, np.array([0.0]), np.array([0.0]))
    assert rep.skipped == 1 and rep.checked == 0
    with pytest.raises(FloatingPointError):
        ad.grad_check(lambda v: float("nan"), np.array([1.0]), np.array([0.0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_relu_chain_property(n, m, k, seed):
    check_op(lambda a, b: ad.relu(ad.matmul(a, b)), [(n, m), (m, k)], seed)
