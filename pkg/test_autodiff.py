"""自动微分引擎测试"""
import numpy as np
import pytest

from gatedkv import tensor as T
from gatedkv.errors import ContractError, ShapeError
from gatedkv.tensor import Tensor, numerical_gradient, relative_error

STEP = 1e-4
TOLERANCE = 1e-4


def check_gradient(build, *inputs, weights=None):
    """对 sum(out ⊙ W) 比较解析梯度与中心差分"""
    out = build(*inputs)
    w = weights if weights is not None else np.random.default_rng(7).normal(size=out.shape)

    def loss():
        return T.tensor_sum(T.mul(build(*inputs), w))

    for t in inputs:
        t.zero_grad()
    loss().backward()
    with T.no_grad():
        for t in inputs:
            numeric = numerical_gradient(lambda: loss().item(), t, STEP)
            assert relative_error(t.grad, numeric) <= TOLERANCE, t


# ----------------------------------------------------------------------
# matmul
# ----------------------------------------------------------------------
def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    out = Tensor([[1, 2]]) @ Tensor([[3], [4]])
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert "(2, 3)" in str(e.value)


def test_matmul_gradient_of_sum(rng):
    a = T.parameter(rng.normal(size=(3, 4)))
    b = T.parameter(rng.normal(size=(4, 2)))
    (a @ b).sum().backward()
    # d sum(AB)/dA = 1·Bᵀ
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    numeric = numerical_gradient(lambda: float((a.data @ b.data).sum()), a, STEP)
    assert relative_error(a.grad, numeric) <= TOLERANCE


def test_matmul_deterministic(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    first = (Tensor(a) @ Tensor(b)).data
    second = (Tensor(a) @ Tensor(b)).data
    assert first.tobytes() == second.tobytes()


# ----------------------------------------------------------------------
# softmax
# ----------------------------------------------------------------------
def test_softmax_symmetric_row():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_single_live_entry_is_one_hot():
    np.testing.assert_array_equal(T.softmax_rows(Tensor([[0.0, -np.inf]])).data, [[1.0, 0.0]])


def test_softmax_matches_exp_normalize():
    out = T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(out, e / e.sum(), rtol=1e-7)


def test_softmax_all_masked_row_is_contract_error():
    with pytest.raises(ContractError):
        T.softmax_rows(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


def test_softmax_rows_sum_to_one(rng):
    out = T.softmax_rows(Tensor(rng.normal(scale=20.0, size=(6, 9)))).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_masked_softmax_equals_neg_inf_mask(rng):
    scores = rng.normal(size=(5, 5))
    mask = np.tril(rng.integers(0, 2, size=(5, 5)).astype(float))
    np.fill_diagonal(mask, 1.0)
    additive = T.softmax_rows(Tensor(np.where(mask > 0, scores, -np.inf))).data
    multiplicative = T.masked_softmax(Tensor(scores), mask).data
    np.testing.assert_allclose(multiplicative, additive, atol=1e-12)


# ----------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------
def test_backward_of_sum():
    x = T.parameter([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_of_square():
    x = T.parameter([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = T.parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_accumulates_on_leaves():
    x = T.parameter([1.0, 2.0])
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_no_grad_records_nothing():
    x = T.parameter(np.ones((2, 2)))
    with T.no_grad():
        y = x @ x
    assert not y.requires_grad


# ----------------------------------------------------------------------
# 逐算子数值梯度
# ----------------------------------------------------------------------
def test_elementwise_gradients(rng):
    x = T.parameter(rng.normal(size=(3, 4)))
    check_gradient(T.exp, x)
    check_gradient(T.sigmoid, x)
    check_gradient(T.silu, x)
    check_gradient(lambda a: T.log(T.exp(a) + 1.0), x)


def test_abs_gradient_away_from_zero(rng):
    x = T.parameter(rng.uniform(0.2, 1.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3)))
    check_gradient(T.tensor_abs, x)


def test_abs_subgradient_at_zero_is_zero():
    x = T.parameter([[0.0]])
    T.tensor_abs(x).sum().backward()
    assert x.grad[0, 0] == 0.0


def test_add_broadcast_gradients(rng):
    a = T.parameter(rng.normal(size=(3, 4)))
    row = T.parameter(rng.normal(size=(4,)))
    col = T.parameter(rng.normal(size=(3, 1)))
    check_gradient(lambda x, r, c: (x + r) + c, a, row, col)


def test_shape_ops_gradients(rng):
    a = T.parameter(rng.normal(size=(4, 3)))
    b = T.parameter(rng.normal(size=(4, 2)))
    check_gradient(lambda x, y: T.concat_cols([x, y]), a, b)
    check_gradient(lambda x: T.column(x, 1), a)
    check_gradient(lambda x: T.tile_rows(T.column(x, 0).T, 3), a)
    check_gradient(lambda x: x.T, a)


def test_take_rows_scatter_add(rng):
    table = T.parameter(rng.normal(size=(5, 3)))
    check_gradient(lambda w: T.take_rows(w, [0, 2, 2, 4]), table)


def test_rms_norm_gradient(rng):
    x = T.parameter(rng.normal(size=(3, 5)))
    gain = T.parameter(rng.uniform(0.5, 1.5, size=(5,)))
    check_gradient(lambda a, g: T.rms_norm(a, g), x, gain)


def test_softmax_and_masked_softmax_gradients(rng):
    scores = T.parameter(rng.normal(size=(4, 4)))
    check_gradient(T.softmax_rows, scores)
    mask = T.parameter(np.tril(rng.uniform(0.2, 0.9, size=(4, 4))) + np.eye(4) * 0.1)
    check_gradient(T.masked_softmax, scores, mask)


def test_masked_softmax_mask_gradient_of_evicted_column():
    # 被驱逐列的掩码梯度为 −exp(S − c)，指数超过 EXP_CLIP 时被截断
    for gap, expected in ((3.0, -np.exp(3.0)), (60.0, -np.exp(T.EXP_CLIP))):
        scores = T.parameter([[0.0, gap]])
        mask = T.parameter([[1.0, 0.0]])
        T.tensor_sum(T.mul(T.masked_softmax(scores, mask), np.array([[1.0, 0.0]]))).backward()
        np.testing.assert_allclose(mask.grad, [[0.0, expected]], rtol=1e-12)
        np.testing.assert_array_equal(scores.grad, [[0.0, 0.0]])


def test_item_requires_single_element():
    assert T.parameter([2.5]).item() == 2.5
    with pytest.raises(ContractError):
        T.parameter([1.0, 2.0]).item()


def test_cross_entropy_gradient(rng):
    logits = T.parameter(rng.normal(size=(5, 6)))
    targets = [0, 3, 5, 1, 1]
    loss = T.cross_entropy(logits, targets)
    loss.backward()
    with T.no_grad():
        numeric = numerical_gradient(lambda: T.cross_entropy(logits, targets).item(), logits, STEP)
    assert relative_error(logits.grad, numeric) <= TOLERANCE


def test_straight_through_forward_hard_backward_identity(rng):
    soft = T.parameter(rng.uniform(size=(3, 2)))
    hard = (soft.data > 0.5).astype(float)
    out = T.straight_through(soft, hard)
    np.testing.assert_array_equal(out.data, hard)
    out.sum().backward()
    np.testing.assert_array_equal(soft.grad, np.ones((3, 2)))
