"""仅解码器 Transformer：训练视图（整段掩码注意力）与推理视图（预填充 + 逐 token 解码）

结构：可学习绝对位置编码，pre-norm（RMS），两层 SiLU 前馈，logits 复用 token embedding 转置。
每层注意力前可挂一个 AG，训练时以门控掩码参与注意力，推理时按标志物理剪枝 KV-Cache。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .attention_gate import (
    EvictionFlags,
    GateStats,
    GateWeights,
    build_mask,
    compute_layer_flags,
    gate_mask_tensor,
    gate_stats,
)
from .errors import ContractError, ShapeError
from .kv_cache import KVCache, prune_cache
from .models import ModelConfig, TrainableSet
from .policies import AttentionGatePolicy, EvictionPolicy, RetentionPlan
from .tensor import Tensor

logger = logging.getLogger(__name__)

MaskLike = Union[np.ndarray, Sequence[Tensor]]


@dataclass
class LayerWeights:
    """单层参数；gate 为 None 表示该层不持有 AG"""
    attn_norm: Tensor
    w_q: List[Tensor]
    w_k: List[Tensor]
    w_v: List[Tensor]
    w_o: Tensor
    ffn_norm: Tensor
    w_up: Tensor
    w_down: Tensor
    gate: Optional[GateWeights] = None

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        params = [(f"{prefix}.attn.norm", self.attn_norm)]
        for i, (q, k, v) in enumerate(zip(self.w_q, self.w_k, self.w_v)):
            params += [(f"{prefix}.attn.w_q.{i}", q), (f"{prefix}.attn.w_k.{i}", k), (f"{prefix}.attn.w_v.{i}", v)]
        params += [
            (f"{prefix}.attn.w_o", self.w_o),
            (f"{prefix}.ffn.norm", self.ffn_norm),
            (f"{prefix}.ffn.w_up", self.w_up),
            (f"{prefix}.ffn.w_down", self.w_down),
        ]
        if self.gate is not None:
            params += self.gate.named_parameters(f"{prefix}.gate")
        return params


def is_ag_parameter(name: str) -> bool:
    return ".gate." in name


def is_attention_projection(name: str) -> bool:
    return ".attn.w_" in name


def is_trainable(name: str, trainable_set: TrainableSet) -> bool:
    """参数是否属于给定的可训练集合"""
    if trainable_set == TrainableSet.ALL:
        return True
    if trainable_set == TrainableSet.AG_ONLY:
        return is_ag_parameter(name)
    return is_ag_parameter(name) or is_attention_projection(name)


@dataclass
class GatedTransformer:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: List[LayerWeights]
    final_norm: Tensor

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            params += layer.named_parameters(f"layers.{i}")
        params.append(("final_norm", self.final_norm))
        return params

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def gate_weights(self, layer: int) -> Optional[GateWeights]:
        return self.layers[layer].gate if 0 <= layer < len(self.layers) else None


@dataclass
class MacCounter:
    """注意力实际执行的乘加次数

    score：q·k 乘加，value：概率·v 乘加；只统计掩码中存活的 (query, key) 对。
    """
    score_macs: int = 0
    value_macs: int = 0
    pairs: int = 0

    @property
    def total(self) -> int:
        return self.score_macs + self.value_macs

    def add_pairs(self, live_pairs: int, d_k: int, d_v: int) -> None:
        self.pairs += live_pairs
        self.score_macs += live_pairs * d_k
        self.value_macs += live_pairs * d_v

    def add_mask(self, mask: np.ndarray, d_k: int, d_v: int) -> None:
        self.add_pairs(int(np.count_nonzero(np.asarray(mask) > 0)), d_k, d_v)

    def to_dict(self) -> Dict[str, int]:
        return {"score_macs": self.score_macs, "value_macs": self.value_macs, "total_macs": self.total}


@dataclass
class ForwardResult:
    """训练视图的前向结果"""
    logits: Tensor
    flags: List[Optional[EvictionFlags]]
    stats: Optional[GateStats]
    keys: List[List[np.ndarray]] = field(default_factory=list)
    values: List[List[np.ndarray]] = field(default_factory=list)
    attention: List[np.ndarray] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)


@dataclass
class PrefillResult:
    logits: Tensor
    cache: KVCache
    flags: List[Optional[EvictionFlags]]
    plan: RetentionPlan
    attention: List[np.ndarray] = field(default_factory=list)


# ----------------------------------------------------------------------
# 注意力
# ----------------------------------------------------------------------
def _head_masks(mask: MaskLike, n_heads: int, n: int) -> List[Tensor]:
    if isinstance(mask, np.ndarray):
        if mask.shape != (n_heads, n, n):
            raise ContractError(f"mask shape {mask.shape} != {(n_heads, n, n)}")
        heads = [Tensor(m) for m in mask]
    else:
        heads = [T.as_tensor(m) for m in mask]
        if len(heads) != n_heads or any(m.shape != (n, n) for m in heads):
            raise ContractError(f"mask must hold {n_heads} matrices of shape {(n, n)}")
    for i, m in enumerate(heads):
        if not np.all(np.diagonal(m.data) == 1.0):
            raise ContractError(f"mask diagonal for head {i} is not all ones")
    return heads


def _attention(X: Tensor, mask: MaskLike, weights: LayerWeights):
    n = X.shape[0]
    n_heads = len(weights.w_q)
    head_masks = _head_masks(mask, n_heads, n)
    scale = 1.0 / math.sqrt(weights.w_q[0].shape[1])
    outputs, probs, keys, values = [], [], [], []
    for w_q, w_k, w_v, m in zip(weights.w_q, weights.w_k, weights.w_v, head_masks):
        q, k, v = X @ w_q, X @ w_k, X @ w_v
        a = T.masked_softmax((q @ k.T) * scale, m)
        outputs.append(a @ v)
        probs.append(a.data)
        keys.append(k.data)
        values.append(v.data)
    return T.concat_cols(outputs) @ weights.w_o, probs, keys, values, head_masks


def mha_forward(X: Tensor, mask: MaskLike, weights: LayerWeights) -> Tensor:
    """多头注意力：每头 Softmax(QKᵀ/√d_k − INF(1−M))·V，拼接后乘 W_O

    mask 为 h×n×n 数组或 h 个 n×n 张量（可微掩码），对角线必须为 1。
    """
    return _attention(X, mask, weights)[0]


def _feed_forward(x: Tensor, layer: LayerWeights, eps: float) -> Tensor:
    return T.silu(T.rms_norm(x, layer.ffn_norm, eps) @ layer.w_up) @ layer.w_down


def _logits(model: GatedTransformer, x: Tensor) -> Tensor:
    return T.rms_norm(x, model.final_norm, model.config.norm_eps) @ model.tok_emb.T


def _embed(model: GatedTransformer, tokens: Sequence[int], start: int = 0) -> Tensor:
    ids = [int(t) for t in tokens]
    if any(t < 0 or t >= model.config.vocab_size for t in ids):
        raise ContractError(f"token id outside vocabulary of size {model.config.vocab_size}")
    positions = list(range(start, start + len(ids)))
    return T.take_rows(model.tok_emb, ids) + T.take_rows(model.pos_emb, positions)


def _flags_from_override(override, layer: int, n: int, n_heads: int, tau: float) -> Optional[EvictionFlags]:
    value = override[layer]
    if value is None:
        return None
    if isinstance(value, EvictionFlags):
        return value
    hard = np.asarray(value, dtype=np.float64)
    if hard.shape != (n, n_heads):
        raise ShapeError(f"flags override for layer {layer} has shape {hard.shape}, expected {(n, n_heads)}")
    return EvictionFlags.from_hard(layer, hard, tau)


# ----------------------------------------------------------------------
# 训练视图
# ----------------------------------------------------------------------
def forward(model: GatedTransformer, tokens: Sequence[int], use_gate: bool = True,
            flags_override: Optional[Sequence] = None, relaxed: bool = False,
            tau_override: Optional[float] = None, capture_attention: bool = False,
            counter: Optional[MacCounter] = None) -> ForwardResult:
    """整段序列前向

    Args:
        use_gate: False 时所有层使用标准因果掩码（基线策略的预填充）
        flags_override: 每层一个 n×h 硬标志矩阵（或 None 表示该层不驱逐），替代 AG 输出
        relaxed: 掩码与 AG 均值都使用 Sigmoid 平滑输出（梯度检查用）
        tau_override: 临时替换阈值 τ
        capture_attention: 记录每层 h×n×n 的 softmax 注意力
        counter: 累计存活 (query, key) 对的乘加次数
    """
    cfg = model.config
    n = len(tokens)
    if n == 0:
        raise ContractError("empty token sequence")
    if n > cfg.max_seq:
        raise ContractError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
    if flags_override is not None and len(flags_override) != cfg.n_layers:
        raise ContractError(f"flags_override needs {cfg.n_layers} entries, got {len(flags_override)}")
    tau = cfg.tau if tau_override is None else tau_override
    causal = build_mask(None, n, 0, cfg.n_heads)

    x = _embed(model, tokens)
    x_prev: Optional[Tensor] = None
    result = ForwardResult(logits=None, flags=[], stats=None)
    for layer_idx, layer in enumerate(model.layers):
        x_in = x
        flags = None
        if flags_override is not None:
            flags = _flags_from_override(flags_override, layer_idx, n, cfg.n_heads, tau)
        elif use_gate:
            flags = compute_layer_flags(cfg, layer_idx, x_in, x_prev, layer.gate,
                                        model.gate_weights(layer_idx - 1), tau)
        result.flags.append(flags)
        if flags is None:
            mask: MaskLike = causal
        else:
            mask = [gate_mask_tensor(flags, head, cfg.recent_window, relaxed) for head in range(cfg.n_heads)]

        attn_out, probs, keys, values, head_masks = _attention(
            T.rms_norm(x_in, layer.attn_norm, cfg.norm_eps), mask, layer)
        x = x_in + attn_out
        x = x + _feed_forward(x, layer, cfg.norm_eps)
        x_prev = x_in

        result.keys.append(keys)
        result.values.append(values)
        hard_mask = np.stack([m.data for m in head_masks])
        result.masks.append(hard_mask)
        if capture_attention:
            result.attention.append(np.stack(probs))
        if counter is not None:
            counter.add_mask(hard_mask, cfg.d_k, cfg.d_v)

    result.logits = _logits(model, x)
    result.stats = gate_stats(result.flags, relaxed)
    return result


# ----------------------------------------------------------------------
# 推理视图
# ----------------------------------------------------------------------
def prefill(tokens: Sequence[int], model: GatedTransformer, policy: Optional[EvictionPolicy] = None,
            flags_override: Optional[Sequence] = None, tau_override: Optional[float] = None,
            capture_attention: bool = False, counter: Optional[MacCounter] = None) -> PrefillResult:
    """预填充：计算所有位置的 logits，并按策略只缓存被保留的 K/V

    policy 缺省为 AG 策略。AG 策略在掩码注意力下预填充，基线策略使用标准因果注意力、
    在预填充结束时一次性剪枝。
    """
    cfg = model.config
    if len(tokens) == 0:
        raise ContractError("prefill needs at least one token")
    policy = policy or AttentionGatePolicy(recent_window=cfg.recent_window)
    gated = policy.uses_gate or flags_override is not None
    with T.no_grad():
        res = forward(model, tokens, use_gate=gated, flags_override=flags_override,
                      tau_override=tau_override,
                      capture_attention=capture_attention or policy.needs_attention, counter=counter)
    n = len(tokens)
    full = KVCache.from_prefill(res.keys, res.values, recent_window=cfg.recent_window if gated else 0)
    if flags_override is not None and not policy.uses_gate:
        policy = AttentionGatePolicy(recent_window=cfg.recent_window)
    plan = policy.plan(n, cfg.n_layers, cfg.n_heads, attention=res.attention or None, flags=res.flags)
    cache = prune_cache(full, plan.retained, plan.pinned)
    logger.debug(f"[Prefill] n={n} 策略={policy.name} 保留 {cache.entry_count()}/{full.entry_count()} 条目")
    return PrefillResult(logits=res.logits, cache=cache, flags=res.flags, plan=plan, attention=res.attention)


def decode_step(token: int, cache: KVCache, model: GatedTransformer,
                counter: Optional[MacCounter] = None) -> Tuple[np.ndarray, KVCache]:
    """单 token 解码：新 K/V 无条件追加到每个头（解码阶段不运行 AG），cache 原地更新"""
    cfg = model.config
    if cache.n_layers != cfg.n_layers or cache.n_heads != cfg.n_heads:
        raise ContractError(
            f"cache layout {cache.n_layers}x{cache.n_heads} does not match model {cfg.n_layers}x{cfg.n_heads}")
    position = cache.next_position
    if position >= cfg.max_seq:
        raise ContractError(f"position {position} exceeds max_seq {cfg.max_seq}")
    scale = 1.0 / math.sqrt(cfg.d_k)
    with T.no_grad():
        x = _embed(model, [token], start=position)
        for layer_idx, layer in enumerate(model.layers):
            h = T.rms_norm(x, layer.attn_norm, cfg.norm_eps)
            outputs = []
            for head_idx, (w_q, w_k, w_v) in enumerate(zip(layer.w_q, layer.w_k, layer.w_v)):
                q = h @ w_q
                cache.head(layer_idx, head_idx).append(position, (h @ w_k).data, (h @ w_v).data, pinned=True)
                cache.drop_expired(layer_idx, head_idx, position)
                head = cache.head(layer_idx, head_idx)
                a = T.softmax_rows((q @ Tensor(head.keys).T) * scale)
                outputs.append(a @ Tensor(head.values))
                if counter is not None:
                    counter.add_pairs(len(head), cfg.d_k, cfg.d_v)
            x = x + T.concat_cols(outputs) @ layer.w_o
            x = x + _feed_forward(x, layer, cfg.norm_eps)
        logits = _logits(model, x)
    cache.n_decoded += 1
    return logits.data[0].copy(), cache


def generate(model: GatedTransformer, prompt: Sequence[int], max_new_tokens: int,
             policy: Optional[EvictionPolicy] = None, temperature: float = 0.0, seed: int = 0) -> List[int]:
    """贪心（temperature=0）或温度采样生成，止于 max_seq"""
    rng = np.random.default_rng(seed)
    pre = prefill(prompt, model, policy)
    cache = pre.cache
    logits = pre.logits.data[-1]
    generated: List[int] = []
    for _ in range(max_new_tokens):
        if temperature <= 0.0:
            token = int(np.argmax(logits))
        else:
            z = logits / temperature
            p = np.exp(z - z.max())
            token = int(rng.choice(len(p), p=p / p.sum()))
        generated.append(token)
        if cache.next_position >= model.config.max_seq:
            break
        logits, cache = decode_step(token, cache, model)
    return generated
