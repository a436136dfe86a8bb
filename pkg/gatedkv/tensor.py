"""极简反向模式自动微分引擎

基于 numpy float64 的二维张量，图在每次前向时重建（define-by-run）。
除行/列偏置加法外不做隐式广播，其余形状转换均需显式调用。
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import MASK_INF
from .errors import ContractError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

# 每个线程独立的建图开关
_state = threading.local()

# masked_softmax 中 exp 的指数上限（相对活跃列最大值）
EXP_CLIP = 50.0


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """推理路径：不记录计算图"""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """带梯度的稠密数组

    data 为行主序 float64 数组，grad（存在时）与 data 同形状。
    op_record 由 (_parents, _backward, op) 三者组成。
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = ""

    # ------------------------------------------------------------------
    # 基本属性
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op='{self.op}', requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # 运算符
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(-self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a Tensor is not supported; multiply by an explicit reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def column(self, index: int) -> "Tensor":
        return column(self, index)

    # ------------------------------------------------------------------
    # 反向传播
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """从标量损失反向传播

        叶子张量的 grad 跨调用累加；中间结果的 grad 为本次传播的值。
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        pass_grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pass_grads.get(id(node))
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in pass_grads:
                        pass_grads[key] = pass_grads[key] + pg
                    else:
                        pass_grads[key] = pg
        for node in order:
            if not node.requires_grad:
                continue
            g = pass_grads.get(id(node))
            if g is None:
                g = np.zeros_like(node.data)
            if node._parents:
                node.grad = g
            else:
                node.grad = g.copy() if node.grad is None else node.grad + g


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=True)


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {t.shape}")


# ----------------------------------------------------------------------
# 线性代数
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """标准矩阵乘法 [m×k]·[k×p] → [m×p]"""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    _require_2d(a, "transpose")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


# ----------------------------------------------------------------------
# 逐元素运算
# ----------------------------------------------------------------------
def add(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    """加法；b 可与 a 同形状、为标量，或为行/列偏置"""
    a = as_tensor(a)
    b = as_tensor(b)
    if b.data.ndim == 0 or b.shape == a.shape:
        reduce_b = (lambda g: g) if b.shape == a.shape else (lambda g: np.asarray(g.sum()))
    elif a.data.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        reduce_b = lambda g: g.sum(axis=0).reshape(b.shape)
    elif a.data.ndim == 2 and b.shape == (a.shape[0], 1):
        reduce_b = lambda g: g.sum(axis=1, keepdims=True)
    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    def backward(g):
        return g, reduce_b(g)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    """逐元素乘法；b 为同形状张量/常数数组或标量"""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=np.float64)
        if const.ndim != 0 and const.shape != a.shape:
            raise ShapeError(f"mul shape mismatch: {a.shape} * {const.shape}")
        return _result(a.data * const, (a,), lambda g: (g * const,), "mul_const")
    if b.shape != a.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def backward(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def tensor_abs(a: Tensor) -> Tensor:
    """|x|，x=0 处次梯度取 0"""
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# ----------------------------------------------------------------------
# 归约与形状
# ----------------------------------------------------------------------
def tensor_sum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, float(g) / n),), "mean")


def column(a: Tensor, index: int) -> Tensor:
    """取第 index 列，结果形状 [m×1]"""
    _require_2d(a, "column")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, index:index + 1] = g
        return (full,)

    return _result(a.data[:, index:index + 1].copy(), (a,), backward, "column")


def tile_rows(row: Tensor, m: int) -> Tensor:
    """把 [1×n] 行向量复制成 [m×n]"""
    if row.data.ndim != 2 or row.shape[0] != 1:
        raise ShapeError(f"tile_rows expects shape (1, n), got {row.shape}")
    return _result(np.repeat(row.data, m, axis=0), (row,), lambda g: (g.sum(axis=0, keepdims=True),), "tile_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """沿列拼接（多头输出合并）"""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols shape mismatch: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward, "concat_cols")


def take_rows(weight: Tensor, ids: Sequence[int]) -> Tensor:
    """按行索引取 embedding，反向为 scatter-add"""
    _require_2d(weight, "take_rows")
    index = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(weight.data[index].copy(), (weight,), backward, "take_rows")


# ----------------------------------------------------------------------
# 融合算子
# ----------------------------------------------------------------------
def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """逐行 RMS 归一化后乘以增益"""
    _require_2d(x, "rms_norm")
    if gain.shape != (x.shape[1],):
        raise ShapeError(f"rms_norm gain shape {gain.shape} does not match {x.shape}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=1, keepdims=True) + eps)
    xhat = x.data * r

    def backward(g):
        dxhat = g * gain.data
        dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0)

    return _result(xhat * gain.data, (x, gain), backward, "rms_norm")


def softmax_rows(a: Tensor) -> Tensor:
    """逐行 softmax；被掩码位置携带 -inf

    -inf 在求指数前替换为 -MASK_INF。整行均为 -inf 视为契约违反
    （对角线永远保留，掩码模块负责避免这种情况）。
    """
    _require_2d(a, "softmax_rows")
    dead = np.all(np.isneginf(a.data), axis=1)
    if np.any(dead):
        raise ContractError(f"softmax_rows: rows {np.flatnonzero(dead).tolist()} are entirely -INF")
    z = np.where(np.isneginf(a.data), -MASK_INF, a.data)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (a,), backward, "softmax_rows")


def masked_softmax(scores: Tensor, mask: Union[Tensor, np.ndarray]) -> Tensor:
    """乘性掩码 softmax：A[j,t] = M[j,t]·exp(S[j,t]) / Σ_u M[j,u]·exp(S[j,u])

    M 取 {0,1} 时与 softmax(S − INF(1−M)) 完全一致；M 可微时梯度同时流向掩码，
    供直通估计器把门控的平滑输出接入注意力。

    指数以活跃列（M>0）的行最大值 c 为基准，并截断在 exp(EXP_CLIP)：前向输出不受影响，
    但被驱逐列若满足 S − c > EXP_CLIP，其掩码梯度按 exp(EXP_CLIP) 计算，小于精确值。
    """
    _require_2d(scores, "masked_softmax")
    mask = as_tensor(mask)
    if mask.shape != scores.shape:
        raise ShapeError(f"masked_softmax mask shape {mask.shape} does not match scores {scores.shape}")
    live = mask.data > 0
    if not np.all(live.any(axis=1)):
        raise ContractError("masked_softmax: a row has no live entry")
    c = np.where(live, scores.data, -np.inf).max(axis=1, keepdims=True)
    e = np.exp(np.minimum(scores.data - c, EXP_CLIP))
    w = mask.data * e
    z = w.sum(axis=1, keepdims=True)
    out = w / z

    def backward(g):
        centered = (g - (g * out).sum(axis=1, keepdims=True)) / z
        return centered * w, centered * e

    return _result(out, (scores, mask), backward, "masked_softmax")


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """平均 token 级负对数似然"""
    _require_2d(logits, "cross_entropy")
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy targets {idx.shape} do not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(idx.size)
    nll = -log_probs[rows, idx].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, idx] -= 1.0
        return (grad * (float(g) / idx.size),)

    return _result(np.asarray(nll), (logits,), backward, "cross_entropy")


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """直通估计器：前向取硬值，反向按恒等映射传给平滑值"""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through shape mismatch: {soft.shape} vs {hard.shape}")
    return _result(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# ----------------------------------------------------------------------
# 梯度检查辅助
# ----------------------------------------------------------------------
def numerical_gradient(f: Callable[[], float], t: Tensor, eps: float = 1e-4,
                       indices: Optional[Iterable[Tuple[int, ...]]] = None) -> np.ndarray:
    """中心差分数值梯度；f 在 t.data 被原地扰动后重新求值"""
    grad = np.zeros_like(t.data)
    targets = indices if indices is not None else np.ndindex(*t.shape)
    for idx in targets:
        original = t.data[idx]
        t.data[idx] = original + eps
        plus = f()
        t.data[idx] = original - eps
        minus = f()
        t.data[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a − n| / max(|a|, |n|, floor)"""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
