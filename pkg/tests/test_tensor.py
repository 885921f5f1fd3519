"""
Tests for the float64 tensor and its reverse-mode differentiation.
"""
import numpy as np
import pytest

from promptvit.errors import ContractError, DimensionError, NumericOverflowError
from promptvit.functional import cross_entropy, gelu, index_add, layer_norm, softmax
from promptvit.gradcheck import gradcheck
from promptvit.tensor import Tape, Tensor, backward


def leaf(array):
    return Tensor(np.asarray(array, dtype=float), requires_grad=True)


# ========== matmul ==========

def test_matmul_identity():
    """I2 x A = A"""
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_projector_selects_first_row():
    out = Tensor([[1.0, 0.0], [0.0, 0.0]]) @ Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop():
    """Random 3x4 . 4x2 against the textbook loop."""
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    out = (Tensor(a) @ Tensor(b)).data
    assert np.max(np.abs(out - expected)) < 1e-12


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


# ========== softmax / layer_norm ==========

def test_softmax_equal_inputs_split_evenly():
    for c in (-40.0, 0.0, 3.5, 50.0):
        np.testing.assert_allclose(softmax(Tensor([c, c])).data, [0.5, 0.5], rtol=0, atol=1e-15)


def test_softmax_single_element_is_one():
    assert softmax(Tensor([7.25])).data[0] == 1.0


def test_softmax_hand_evaluated():
    """[0, ln 3] -> [1/4, 3/4]"""
    out = softmax(Tensor([0.0, np.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = rng.uniform(-50, 50, size=(20, 7))
    sums = softmax(Tensor(x), axis=-1).data.sum(axis=-1)
    assert np.max(np.abs(sums - 1.0)) < 1e-12


def test_layer_norm_constant_token_is_zero():
    x = Tensor(np.full((1, 4), 3.0))
    out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_two_values():
    """mean 2, std 1 -> [-1, 1]"""
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-10)


def test_layer_norm_zero_gain_returns_bias():
    rng = np.random.default_rng(2)
    bias = rng.normal(size=5)
    out = layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(bias))
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (3, 5)))


# ========== backward ==========

def test_backward_sum_gives_ones():
    p = leaf([1.0, -2.0, 3.0])
    tape = Tape()
    tape.register("p", p, trainable=True)
    backward(tape, p.sum())
    np.testing.assert_array_equal(p.grad, np.ones(3))


def test_backward_half_square():
    """loss = sum(p^2)/2 at p=[1,2] -> grad [1,2]"""
    p = leaf([1.0, 2.0])
    Tape().backward((p * p).sum() * 0.5)
    np.testing.assert_array_equal(p.grad, [1.0, 2.0])


def test_backward_rejects_non_scalar_loss():
    p = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        Tape().backward(p * 2.0)


def test_frozen_leaf_gets_no_gradient():
    """A frozen weight feeding the loss never allocates a gradient buffer."""
    tape = Tape()
    w = tape.register("w", Tensor(np.ones((2, 2))), trainable=False)
    x = tape.register("x", Tensor(np.ones((3, 2))), trainable=True)
    tape.backward((x @ w).sum())
    assert w.grad is None
    assert x.grad is not None
    assert list(tape.trainable()) == ["x"]
    assert list(tape.frozen()) == ["w"]


def test_register_twice_is_an_error():
    tape = Tape()
    tape.register("a", Tensor([1.0]), trainable=True)
    with pytest.raises(ContractError):
        tape.register("a", Tensor([2.0]), trainable=True)


def test_nodes_visited_once_in_reverse_topological_order():
    """Diamond graph: every node appears once and before each of its parents."""
    p = leaf([0.5, -1.0])
    a = p * 2.0
    b = p.exp()
    loss = (a * b + a).sum()
    tape = Tape()
    tape.backward(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        if node.creator is not None:
            for parent in node.creator.tensors:
                if parent.requires_grad:
                    assert position[id(parent)] > position[id(node)]


def test_gradient_reaches_shared_leaf_from_both_uses():
    """d/dp of sum(p*p + p) = 2p + 1"""
    p = leaf([1.0, 2.0, -3.0])
    Tape().backward((p * p + p).sum())
    np.testing.assert_array_equal(p.grad, [3.0, 5.0, -5.0])


def test_overflow_is_an_error():
    with pytest.raises(NumericOverflowError):
        Tensor([1000.0]).exp()


# ========== finite differences ==========

OPS = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "scale_neg": (lambda a: -(a * 1.5), [(5,)]),
    "exp": (lambda a: a.exp(), [(2, 3)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "matmul_both_batched": (lambda a, b: a @ b.T, [(2, 3, 4), (2, 5, 4)]),
    "reshape_permute": (lambda a: a.reshape(2, 3, 2).permute(2, 0, 1), [(3, 4)]),
    "cat_slice": (lambda a, b: Tensor.cat([a, b], axis=1).slice(1, 1, 4), [(2, 2), (2, 3)]),
    "sum_axis": (lambda a: a.sum(axis=0), [(3, 4)]),
    "mean_keepdims": (lambda a: a.mean(axis=-1, keepdims=True), [(3, 4)]),
    "expand": (lambda a: a.expand(3, 2, 4), [(2, 4)]),
    "softmax": (lambda a: softmax(a, axis=-1), [(3, 5)]),
    "layer_norm": (lambda a, g, b: layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    "gelu": (lambda a: gelu(a), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    """Weighted-sum loss through the op; relative error < 1e-4 over 10 seeds."""
    op, shapes = OPS[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        inputs = [leaf(rng.normal(size=s)) for s in shapes]
        weight = Tensor(rng.normal(size=op(*inputs).shape))
        assert gradcheck(lambda: (op(*inputs) * weight).sum(), inputs) < 1e-4, (name, seed)


def test_cross_entropy_gradient():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        logits = leaf(rng.normal(size=(5, 3)))
        labels = rng.integers(0, 3, size=5)
        assert gradcheck(lambda: cross_entropy(logits, labels), [logits]) < 1e-4


def test_index_add_gradient():
    """Per-sample scatter: the gradient of p[j] gathers the rows each sample sent it to."""
    for seed in range(10):
        rng = np.random.default_rng(seed)
        z = leaf(rng.normal(size=(2, 5, 3)))
        p = leaf(rng.normal(size=(2, 3)))
        index = np.array([[4, 1], [0, 2]])
        weight = Tensor(rng.normal(size=(2, 5, 3)))
        assert gradcheck(lambda: (index_add(z, p, index) * weight).sum(), [z, p]) < 1e-4


def test_identical_inputs_give_identical_outputs():
    def run():
        rng = np.random.default_rng(9)
        a, b = leaf(rng.normal(size=(4, 6))), leaf(rng.normal(size=(6, 3)))
        loss = softmax(a @ b).sum(axis=0).exp().sum()
        Tape().backward(loss)
        return loss.data.copy(), a.grad.copy(), b.grad.copy()

    first, second = run(), run()
    for x, y in zip(first, second):
        assert np.array_equal(x, y)
