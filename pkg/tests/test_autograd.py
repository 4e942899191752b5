import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resprop.autograd import (
    AutogradError,
    NonFiniteError,
    ShapeMismatch,
    Tensor,
    active_graph,
    add,
    affine,
    backward,
    fresh_graph,
    grad_check,
    mul,
    reduce_sum,
    reset_graph,
    scale,
)


@pytest.fixture(autouse=True)
def clean_graph():
    reset_graph()
    yield
    reset_graph()


def central_diff(f, x, eps=1e-6):
    """Independent finite-difference oracle for scalar f over array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def test_add_elementwise():
    out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_scale_by_one_is_bit_identical():
    x = Tensor(np.random.default_rng(0).normal(size=7))
    assert np.array_equal(scale(x, 1.0).data, x.data)


def test_mul_gradient_matches_finite_differences():
    a = Tensor([2.0], requires_grad=True)
    b = Tensor([5.0], requires_grad=True)
    backward(reduce_sum(mul(a, b)))
    oracle_a = central_diff(lambda v: float(v[0] * 5.0), np.array([2.0]))
    oracle_b = central_diff(lambda v: float(2.0 * v[0]), np.array([5.0]))
    assert np.allclose(a.grad, [5.0]) and np.allclose(a.grad, oracle_a, atol=1e-9)
    assert np.allclose(b.grad, [2.0]) and np.allclose(b.grad, oracle_b, atol=1e-9)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(2,\).*\(3,\)"):
        add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_backward_linear_map():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(reduce_sum(scale(x, 3.0)))
    assert np.array_equal(x.grad, [3.0, 3.0])


def test_backward_fanout_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(reduce_sum(add(x, x)))
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = scale(x, 2.0)
    with pytest.raises(AutogradError, match="scalar"):
        backward(y)


def test_backward_twice_without_reset_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = reduce_sum(x)
    backward(loss)
    with pytest.raises(AutogradError, match="already ran"):
        backward(loss)


def test_backward_disconnected_errors():
    with pytest.raises(AutogradError, match="not connected"):
        backward(Tensor([1.0]))


def test_random_chain_matches_finite_differences():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(2, 3))

    def raw(v):
        t = v * 1.3 + 0.2
        t = t * (v + 0.5 * v)
        return float(t.sum())

    x = Tensor(x0.copy(), requires_grad=True)
    backward(reduce_sum(mul(affine(x, 1.3, 0.2), add(x, scale(x, 0.5)))))
    oracle = central_diff(raw, x0.copy())
    rel = np.abs(x.grad - oracle) / np.maximum(np.abs(oracle), 1e-12)
    assert rel.max() < 1e-7


def test_grad_check_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    err = grad_check(lambda t: reduce_sum(mul(t, t)), x)
    assert err < 1e-9
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_grad_check_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    const = Tensor([5.0])
    assert grad_check(lambda t: const, x) == 0.0


def test_grad_check_requires_float64():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(AutogradError, match="float64"):
        grad_check(lambda t: reduce_sum(t), x)


def test_nonfinite_intermediate_names_op():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(NonFiniteError, match="scale"):
        grad_check(lambda t: reduce_sum(scale(t, float("inf"))), x)


def test_gradient_accumulation_order_independent():
    rng = np.random.default_rng(1)
    vals = [rng.normal(size=4) for _ in range(4)]

    def run(swap):
        reset_graph()
        a, b, c, d = (Tensor(v.copy(), requires_grad=True) for v in vals)
        left, right = mul(a, b), mul(c, d)
        out = add(right, left) if swap else add(left, right)
        backward(reduce_sum(out))
        return a.grad.copy(), b.grad.copy(), c.grad.copy(), d.grad.copy()

    for g1, g2 in zip(run(False), run(True)):
        assert np.array_equal(g1, g2)


def test_forward_backward_rerun_is_bit_identical():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(3, 3))

    def run():
        reset_graph()
        x = Tensor(x0.copy(), requires_grad=True)
        backward(reduce_sum(mul(affine(x, 0.7, -0.1), x)))
        return x.grad.copy()

    assert np.array_equal(run(), run())


def test_graph_append_order_is_topological():
    x = Tensor([1.0], requires_grad=True)
    reduce_sum(mul(scale(x, 2.0), affine(x, 1.0, 1.0)))
    g = active_graph()
    for node in g.nodes:
        for iid in node.input_ids:
            assert iid is None or iid < node.id


def test_graph_replay_reproduces_outputs():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    reduce_sum(mul(add(x, y), scale(x, -0.3)))
    g = active_graph()
    replayed = g.replay()
    assert len(replayed) == len(g.nodes)
    for node, arr in zip(g.nodes, replayed):
        assert np.array_equal(node.output.data, arr)


def test_graph_checkpoints_record_node_ids():
    x = Tensor([1.0], requires_grad=True)
    y = scale(x, 2.0)
    g = active_graph()
    g.mark("doubled", y)
    assert g.checkpoints["doubled"] == y.node_id
    with pytest.raises(AutogradError):
        g.mark("leaf", x)


def test_blocked_backward_stops_propagation():
    x = Tensor([1.0, 2.0], requires_grad=True)
    via = scale(x, 3.0)
    out = add(x, via)
    backward(reduce_sum(out), blocked=[via])
    # Only the direct path contributes; the scaled branch is held constant.
    assert np.array_equal(x.grad, [1.0, 1.0])
    assert np.array_equal(via.grad, [1.0, 1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3), st.integers(1, 4))
def test_property_op_grads_match_finite_differences(seed, rows, cols):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(rows, cols))
    other = rng.normal(size=(rows, cols))
    s = float(rng.normal())

    def f(t):
        return reduce_sum(mul(add(t, Tensor(other)), affine(t, s, 0.3)))

    with fresh_graph():
        err = grad_check(f, Tensor(x0, requires_grad=True), eps=1e-6)
    assert err < 1e-6
