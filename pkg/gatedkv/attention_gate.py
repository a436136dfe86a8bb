"""Attention-Gate (AG) 模块

AG(X) = G(MHA'(X), τ)：少头注意力打分 + Sigmoid 阈值门控，输出每个 token、
每个注意力头的保留标志，并据此构造注意力掩码（对角线永远保留）。
训练时通过直通估计器（STE）让硬标志的梯度沿 Sigmoid 平滑输出回传。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .models import GateVariant, ModelConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class GateWeights:
    """单层 AG 参数

    MHA' 变体：每个 AG 头一组 W_Q'/W_K'/W_V'（d×d_k'），W_O' 为 h'·d_k' × h；
    线性变体只使用 w_lin（d×h）。norm 为 AG 内部的 RMS 归一化增益。
    """
    norm: Tensor
    w_q: List[Tensor] = field(default_factory=list)
    w_k: List[Tensor] = field(default_factory=list)
    w_v: List[Tensor] = field(default_factory=list)
    w_o: Optional[Tensor] = None
    w_lin: Optional[Tensor] = None

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        params = [(f"{prefix}.norm", self.norm)]
        for i, (q, k, v) in enumerate(zip(self.w_q, self.w_k, self.w_v)):
            params += [(f"{prefix}.w_q.{i}", q), (f"{prefix}.w_k.{i}", k), (f"{prefix}.w_v.{i}", v)]
        if self.w_o is not None:
            params.append((f"{prefix}.w_o", self.w_o))
        if self.w_lin is not None:
            params.append((f"{prefix}.w_lin", self.w_lin))
        return params


@dataclass
class EvictionFlags:
    """单层驱逐标志

    hard[t][i] ∈ {0,1}，当且仅当 soft[t][i] > τ（严格大于）时为 1；
    soft = Sigmoid(s + γ)，保留到 AG 参数的梯度链接。
    """
    layer: int
    soft: Tensor
    hard: np.ndarray
    tau: float
    _ste: Optional[Tensor] = field(default=None, repr=False)

    @property
    def n_tokens(self) -> int:
        return self.hard.shape[0]

    @property
    def n_heads(self) -> int:
        return self.hard.shape[1]

    @property
    def ste(self) -> Tensor:
        """前向为硬标志、反向为平滑输出的张量"""
        if self._ste is None:
            self._ste = T.straight_through(self.soft, self.hard)
        return self._ste

    def retained_positions(self, head: int) -> List[int]:
        return np.flatnonzero(self.hard[:, head] > 0.5).tolist()

    @classmethod
    def from_hard(cls, layer: int, hard: np.ndarray, tau: float = 0.5) -> "EvictionFlags":
        """外部给定的标志（测试或强制指定），不携带梯度"""
        hard = np.asarray(hard, dtype=np.float64)
        return cls(layer=layer, soft=Tensor(hard), hard=hard, tau=tau)


@dataclass
class GateStats:
    """门控统计

    mean_retention 即驱逐损失中的 AG 均值（所有门控层、头、token 的平均），
    前向取硬值、反向走平滑输出。eviction = 1 − retention。
    """
    mean_retention: Tensor
    layers: List[int]
    per_layer_eviction: List[float]
    per_head_eviction: np.ndarray

    @property
    def retention(self) -> float:
        return float(self.mean_retention.item())

    @property
    def eviction_ratio(self) -> float:
        return 1.0 - self.retention


# ----------------------------------------------------------------------
# 门控
# ----------------------------------------------------------------------
def _apply_gate(scores: Tensor, config: ModelConfig, layer: int, tau: Optional[float]) -> EvictionFlags:
    threshold = config.tau if tau is None else tau
    soft = T.sigmoid(scores + config.gamma)
    hard = (soft.data > threshold).astype(np.float64)
    return EvictionFlags(layer=layer, soft=soft, hard=hard, tau=threshold)


def _causal_neg_inf(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


def mha_prime_scores(X: Tensor, gate: GateWeights, config: ModelConfig) -> Tensor:
    """MHA'(X)：h' 个头的因果注意力，经 W_O' 投影为每个注意力头一个分数"""
    if not gate.w_q or gate.w_o is None:
        raise ContractError("gate weights carry no MHA' projections")
    n = X.shape[0]
    h = T.rms_norm(X, gate.norm, config.norm_eps)
    causal = _causal_neg_inf(n)
    scale = 1.0 / math.sqrt(gate.w_q[0].shape[1])
    heads = []
    for w_q, w_k, w_v in zip(gate.w_q, gate.w_k, gate.w_v):
        q, k, v = h @ w_q, h @ w_k, h @ w_v
        attn = T.softmax_rows((q @ k.T) * scale + causal)
        heads.append(attn @ v)
    return T.concat_cols(heads) @ gate.w_o


def ag_forward(X: Tensor, gate: GateWeights, config: ModelConfig, layer: int = 0,
               tau: Optional[float] = None) -> Tuple[Tensor, EvictionFlags]:
    """AG 前向：scores = MHA'(X)，soft = Sigmoid(scores + γ)，hard = soft > τ"""
    if config.gate_variant != GateVariant.MHA_GATE:
        raise ContractError(f"ag_forward requires gate_variant=mha_gate, got {config.gate_variant.value}")
    scores = mha_prime_scores(X, gate, config)
    return scores, _apply_gate(scores, config, layer, tau)


def ag_forward_linear(X: Tensor, gate: GateWeights, config: ModelConfig, layer: int = 0,
                      tau: Optional[float] = None) -> Tuple[Tensor, EvictionFlags]:
    """线性门控：scores = RMSNorm(X)·W_lin，每个 token 只看自己的隐状态"""
    if config.gate_variant != GateVariant.LINEAR_GATE:
        raise ContractError(f"ag_forward_linear requires gate_variant=linear_gate, got {config.gate_variant.value}")
    if gate.w_lin is None:
        raise ContractError("gate weights carry no linear projection")
    scores = T.rms_norm(X, gate.norm, config.norm_eps) @ gate.w_lin
    return scores, _apply_gate(scores, config, layer, tau)


def ag_forward_prev_layer(X_prev: Tensor, gate_prev: GateWeights, config: ModelConfig, layer: int,
                          tau: Optional[float] = None) -> EvictionFlags:
    """用上一层的输入隐状态与上一层的 AG 决定本层驱逐，可与上一层 MHA 并行"""
    if config.gate_variant != GateVariant.PREV_LAYER_GATE:
        raise ContractError(f"ag_forward_prev_layer requires gate_variant=prev_layer_gate, got {config.gate_variant.value}")
    if layer < max(1, config.gate_start_layer):
        raise ContractError(f"layer {layer} is below gate_start_layer {config.gate_start_layer}")
    scores = mha_prime_scores(X_prev, gate_prev, config)
    return _apply_gate(scores, config, layer, tau)


def select_gate(variant: GateVariant) -> Callable:
    """按配置的变体返回对应的门控前向函数"""
    return {
        GateVariant.MHA_GATE: ag_forward,
        GateVariant.LINEAR_GATE: ag_forward_linear,
        GateVariant.PREV_LAYER_GATE: ag_forward_prev_layer,
    }[variant]


def gate_owner_layers(config: ModelConfig) -> List[int]:
    """持有 AG 参数的层

    prev_layer_gate 下第 ℓ 层的标志由第 ℓ−1 层的 AG 计算，因此参数落在 start−1 … L−2。
    """
    if config.gate_variant == GateVariant.PREV_LAYER_GATE:
        return list(range(config.gate_start_layer - 1, config.n_layers - 1))
    return list(range(config.gate_start_layer, config.n_layers))


def compute_layer_flags(config: ModelConfig, layer: int, x_in: Tensor, x_prev: Optional[Tensor],
                        gate: Optional[GateWeights], prev_gate: Optional[GateWeights],
                        tau: Optional[float] = None) -> Optional[EvictionFlags]:
    """按变体选择门控；未启用门控的层返回 None（全部保留）"""
    if not config.is_gated(layer):
        return None
    gate_fn = select_gate(config.gate_variant)
    if config.gate_variant == GateVariant.PREV_LAYER_GATE:
        return gate_fn(x_prev, prev_gate, config, layer, tau)
    return gate_fn(x_in, gate, config, layer, tau)[1]


def ste_backward(flags: EvictionFlags) -> np.ndarray:
    """d(hard)/d(s) 在 STE 下取 σ'(s+γ) = soft·(1−soft)"""
    soft = flags.soft.data
    return soft * (1.0 - soft)


# ----------------------------------------------------------------------
# 掩码
# ----------------------------------------------------------------------
def _mask_parts(n: int, r: int) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (常数部分, 受标志控制的位置)

    常数部分：对角线为 1，近期窗口 t ≥ j − r 为 1，未来位置为 0。
    """
    j = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    constant = (j == t) | ((r > 0) & (t < j) & (t >= j - r))
    controlled = (t < j) & ~constant
    return constant.astype(np.float64), controlled.astype(np.float64)


def build_mask(flags: Optional[np.ndarray], n: int, r: int = 0, n_heads: Optional[int] = None) -> np.ndarray:
    """构造 h×n×n 掩码

    m_i[j][t] = 0（j < t），1（j == t），1（r > 0 且 t ≥ j − r），否则 flags[t][i]。
    flags 为 None 表示全部保留（标准因果掩码）。
    """
    if flags is None:
        if n_heads is None:
            raise ContractError("build_mask needs n_heads when flags is None")
        flags = np.ones((n, n_heads))
    flags = np.asarray(flags, dtype=np.float64)
    if flags.ndim != 2 or flags.shape[0] != n:
        raise ShapeError(f"flags shape {flags.shape} does not match n={n}")
    constant, controlled = _mask_parts(n, r)
    # [h, 1, n] 广播到每一行
    return constant[None, :, :] + controlled[None, :, :] * flags.T[:, None, :]


def gate_mask_tensor(flags: EvictionFlags, head: int, r: int = 0, relaxed: bool = False) -> Tensor:
    """单个头的可微掩码：前向与 build_mask 一致，梯度经 STE（或松弛时的 soft）流向 AG"""
    n = flags.n_tokens
    constant, controlled = _mask_parts(n, r)
    source = flags.soft if relaxed else flags.ste
    row = T.column(source, head).T
    return T.tile_rows(row, n) * controlled + constant


def gate_stats(flags_list: Sequence[Optional[EvictionFlags]], relaxed: bool = False) -> Optional[GateStats]:
    """汇总所有门控层；没有门控层时返回 None"""
    gated = [f for f in flags_list if f is not None]
    if not gated:
        return None
    total = None
    for flags in gated:
        term = T.tensor_mean(flags.soft if relaxed else flags.ste)
        total = term if total is None else total + term
    mean_retention = total * (1.0 / len(gated))
    per_head = np.stack([1.0 - f.hard.mean(axis=0) for f in gated])
    return GateStats(
        mean_retention=mean_retention,
        layers=[f.layer for f in gated],
        per_layer_eviction=[float(1.0 - f.hard.mean()) for f in gated],
        per_head_eviction=per_head,
    )


def flag_rows(flags_list: Sequence[Optional[EvictionFlags]]) -> List[Tuple[int, int, int, float, int]]:
    """CSV 导出行：(layer, head, token_index, soft, hard)"""
    rows = []
    for flags in flags_list:
        if flags is None:
            continue
        for head in range(flags.n_heads):
            for t in range(flags.n_tokens):
                rows.append((flags.layer, head, t, float(flags.soft.data[t, head]), int(flags.hard[t, head])))
    return rows
