import numpy as np
import pytest

from planlm.tensor import (
    ShapeError, Tape, Tensor, add, causal_attention, cross_entropy, default_dtype, embedding_lookup,
    finite_difference, gelu, hard_select, layer_norm, matmul, mean, mul, no_grad, reshape, softmax,
    straight_through, sub, sum_, transpose,
)

from conftest import rel_err


def grad_check(build, *shapes, seed=0, scale=1.0):
    """Compare tape gradients of scalar build(*xs) against central differences in float64."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        xs = [Tensor(rng.normal(0, scale, s), requires_grad=True) for s in shapes]
        with Tape() as tape:
            out = build(*xs)
        tape.backward(out)
        for x in xs:
            fd = finite_difference(lambda: build(*xs), x)
            assert x.grad is not None
            assert rel_err(x.grad, fd) <= 1e-4


# ------------------------------------------------------------------ forward values

def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_cross_entropy_uniform_logits():
    for target in range(4):
        loss = cross_entropy(Tensor(np.zeros((1, 4))), np.array([target]))
        assert loss.item() == pytest.approx(np.log(4), abs=1e-6)


def test_cross_entropy_ignores_masked_targets():
    logits = Tensor(np.random.default_rng(1).normal(size=(2, 3, 5)))
    targets = np.array([[1, -1, 2], [0, 4, -1]])
    full = cross_entropy(logits, targets).item()
    z = logits.data - logits.data.max(-1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    picks = [lp[0, 0, 1], lp[0, 2, 2], lp[1, 0, 0], lp[1, 1, 4]]
    assert full == pytest.approx(-np.mean(picks), rel=1e-6)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0, 0.0])).data, [0.25] * 4)
    np.testing.assert_allclose(softmax(Tensor([np.log(1.0), np.log(3.0)])).data, [0.25, 0.75], rtol=1e-6)
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1.0, 0.0])


def test_softmax_rows_normalized_and_positive():
    s = Tensor(np.random.default_rng(2).normal(0, 5, (50, 17)))
    p = softmax(s).data
    assert (p > 0).all()
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_hard_select_examples():
    np.testing.assert_array_equal(hard_select(Tensor([0.1, 2.0, -1.0])).data, [0, 1, 0])
    np.testing.assert_array_equal(hard_select(Tensor([5.0, 5.0, 1.0])).data, [1, 0, 0])


def test_hard_select_matches_linear_scan():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.normal(size=32)
        best = 0
        for i in range(1, 32):
            if v[i] > v[best]:
                best = i
        out = hard_select(Tensor(v)).data
        assert out.sum() == 1.0 and out[best] == 1.0


def test_straight_through_forward_is_hard_select_bitwise():
    rng = np.random.default_rng(4)
    for shape in [(3,), (4, 7), (2, 3, 32)]:
        s = Tensor(rng.normal(size=shape), requires_grad=True)
        with Tape():
            st = straight_through(s)
        assert st.data.tobytes() == hard_select(s).data.tobytes()
    np.testing.assert_array_equal(straight_through(Tensor([0.1, 2.0, -1.0])).data, [0, 1, 0])


def test_straight_through_backward_equals_softmax_backward():
    rng = np.random.default_rng(5)
    with default_dtype(np.float64):
        s1 = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        s2 = Tensor(s1.data.copy(), requires_grad=True)
        g = rng.normal(size=(3, 6))
        with Tape() as t1:
            out1 = straight_through(s1)
        t1.backward(out1, g)
        with Tape() as t2:
            out2 = softmax(s2)
        t2.backward(out2, g)
    np.testing.assert_array_equal(s1.grad, s2.grad)


def test_straight_through_gives_nonzero_gradient_through_linear_loss():
    s = Tensor(np.array([0.3, -0.2, 1.1]), requires_grad=True)
    w = Tensor(np.array([1.0, 2.0, -3.0]))
    with Tape() as tape:
        loss = sum_(mul(straight_through(s), w))
    tape.backward(loss)
    assert np.abs(s.grad).max() > 0


# ------------------------------------------------------------------ gradients

@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_gradient(seed):
    targets = np.random.default_rng(seed).integers(0, 7, size=(3, 4))
    targets[0, 0] = -1
    grad_check(lambda x: cross_entropy(x, targets), (3, 4, 7), seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_elementwise_and_broadcast_gradients(seed):
    grad_check(lambda a, b: sum_(mul(add(a, b), sub(a, b))), (3, 4), (4,), seed=seed)
    grad_check(lambda a, b: sum_(mul(mul(a, b), a)), (2, 3, 4), (3, 4), seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_matmul_gradients(seed):
    w = np.random.default_rng(seed + 100).normal(size=(2, 3, 5))
    loss = lambda a, b: sum_(mul(matmul(a, b), Tensor(w)))  # noqa: E731
    grad_check(loss, (2, 3, 4), (2, 4, 5), seed=seed)
    grad_check(loss, (2, 3, 4), (4, 5), seed=seed)
    grad_check(loss, (3, 4), (2, 4, 5), seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_gelu_layer_norm_softmax_gradients(seed):
    w = Tensor(np.random.default_rng(seed + 7).normal(size=(4, 6)))
    grad_check(lambda x: sum_(mul(gelu(x), w)), (4, 6), seed=seed, scale=2.0)
    grad_check(lambda x, g, b: sum_(mul(layer_norm(x, g, b), w)), (4, 6), (6,), (6,), seed=seed)
    grad_check(lambda x: sum_(mul(softmax(x), w)), (4, 6), seed=seed)
    grad_check(lambda x: sum_(mul(softmax(x, mask=np.tril(np.ones((4, 6), bool))), w)), (4, 6), seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_shape_op_gradients(seed):
    w = Tensor(np.random.default_rng(seed).normal(size=(4, 3, 2)))
    grad_check(lambda x: sum_(mul(transpose(reshape(x, (2, 3, 4)), (2, 1, 0)), w)), (6, 4), seed=seed)
    grad_check(lambda x: mean(mul(sum_(x, axis=0), sum_(x, axis=0))), (3, 5), seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_embedding_gradient_accumulates_repeated_rows(seed):
    idx = np.array([[0, 2, 2], [1, 0, 2]])
    w = Tensor(np.random.default_rng(seed).normal(size=(2, 3, 4)))
    grad_check(lambda t: sum_(mul(embedding_lookup(t, idx), w)), (3, 4), seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_causal_attention_gradient_and_causality(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(2, 5, 3)))
    grad_check(lambda q, k, v: sum_(mul(causal_attention(q, k, v), w)), (2, 5, 3), (2, 5, 3), (2, 5, 3),
               seed=seed)
    q, k, v = (rng.normal(size=(1, 5, 3)) for _ in range(3))
    base = causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    k2, v2 = k.copy(), v.copy()
    k2[0, 4] += 10.0
    v2[0, 4] -= 3.0
    moved = causal_attention(Tensor(q), Tensor(k2), Tensor(v2)).data
    np.testing.assert_allclose(moved[0, :4], base[0, :4], rtol=1e-6)


# ------------------------------------------------------------------ tape semantics

def test_fan_out_gradient_is_sum_of_paths():
    with default_dtype(np.float64):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        with Tape() as tape:
            y = add(mul(x, x), mul(x, Tensor(np.array([3.0, 3.0]))))
            loss = sum_(y)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_runs_in_reverse_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        a = mul(x, Tensor(np.full(2, 2.0)))
        b = add(a, a)
        c = sum_(b)
    assert [n.op for n in tape.records] == ["mul", "add", "sum"]
    seen = []
    for node in tape.records:
        inner = node.backward
        node.backward = lambda g, inner=inner, op=node.op: (seen.append(op), inner(g))[1]
    tape.backward(c)
    assert seen == ["sum", "add", "mul"]


def test_no_recording_without_tape_or_under_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = mul(x, x)
    assert not y.requires_grad
    with Tape() as tape:
        with no_grad():
            mul(x, x)
        mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert tape.records == []


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))))
    assert info.value.op == "add"
    assert "(2, 3)" in str(info.value) and "(2,)" in str(info.value)
    with pytest.raises(ShapeError) as info:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert info.value.op == "matmul"
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 1))))


def test_forward_ops_stay_finite_on_large_inputs():
    x = Tensor(np.array([[800.0, -800.0, 0.0]]))
    for out in (softmax(x), gelu(x), cross_entropy(x, np.array([1]))):
        assert np.isfinite(out.data).all()


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
