"""指标：FLOPs 模型、实测乘加次数、KV 内存、困惑度与保留率扫描"""
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .config import BYTES_PER_SCALAR
from .corpus import TrainingWindow
from .errors import ContractError, CorpusError
from .kv_cache import KVCache
from .models import ModelConfig
from .policies import AttentionGatePolicy, EvictionPolicy, NoEvictionPolicy
from .transformer import GatedTransformer, MacCounter, decode_step, prefill

logger = logging.getLogger(__name__)

Number = Union[int, Fraction]

# 默认扫描阈值：τ≈1 只剩对角线，τ=0 全部保留
DEFAULT_SWEEP_TAUS = (1.0, 0.9, 0.6, 0.0)


# ----------------------------------------------------------------------
# FLOPs
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class AttentionDims:
    """FLOPs 模型所需的注意力维度；h′ 允许为 0（无 AG）"""
    d_k: int
    n_heads: int
    ag_d_k: int = 0
    ag_heads: int = 0

    @classmethod
    def from_config(cls, config: ModelConfig) -> "AttentionDims":
        return cls(d_k=config.d_k, n_heads=config.n_heads, ag_d_k=config.ag_d_k, ag_heads=config.ag_heads)


@dataclass(frozen=True)
class FlopsBreakdown:
    """主导项计数，统一放大 100 倍以保持整数"""
    ag: Number
    mha: Number
    combined: Number


def _exact(value: Union[int, float, Fraction, str]) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(str(value))


def _as_number(value: Fraction) -> Number:
    return value.numerator if value.denominator == 1 else value


def flops_model(n: int, dims: Union[ModelConfig, AttentionDims], t_percent: Union[int, float, Fraction] = 0) -> FlopsBreakdown:
    """注意力 FLOPs 主导项（×100）

    ag = 100·n²·d_k′·h′，mha = (100 − t)·n²·d_k·h，combined = max(ag, mha)。
    t 为被驱逐的 KV 百分比。
    """
    if isinstance(dims, ModelConfig):
        dims = AttentionDims.from_config(dims)
    t = _exact(t_percent)
    if not 0 <= t <= 100:
        raise ContractError(f"t_percent must be in [0, 100], got {t_percent}")
    n2 = n * n
    ag = Fraction(100 * n2 * dims.ag_d_k * dims.ag_heads)
    mha = (100 - t) * n2 * dims.d_k * dims.n_heads
    return FlopsBreakdown(ag=_as_number(ag), mha=_as_number(mha), combined=_as_number(max(ag, mha)))


def empirical_flops(source: Union[KVCache, np.ndarray, Sequence[np.ndarray]], d_k: int, d_v: int) -> MacCounter:
    """实际执行的注意力乘加次数

    掩码（h×n×n 或其列表）：统计存活的 (query, key) 对；
    KVCache：一个解码 query 对当前缓存的乘加。
    """
    counter = MacCounter()
    if isinstance(source, KVCache):
        counter.add_pairs(source.entry_count(), d_k, d_v)
    elif isinstance(source, np.ndarray):
        counter.add_mask(source, d_k, d_v)
    else:
        for mask in source:
            counter.add_mask(np.asarray(mask), d_k, d_v)
    return counter


def kv_bytes(entries: int, d_k: int, d_v: int) -> int:
    return entries * (d_k + d_v) * BYTES_PER_SCALAR


# ----------------------------------------------------------------------
# 评估
# ----------------------------------------------------------------------
@dataclass
class RunMetrics:
    """一个策略在一份评估语料上的全部指标"""
    policy: str
    perplexity: float
    eviction_ratio_mean: float
    eviction_per_layer_head: List[List[float]]
    kv_bytes_full: int
    kv_bytes_pruned: int
    flops_ag: Number
    flops_mha: Number
    flops_combined: Number
    empirical_macs: int = 0
    retained_entries: int = 0
    full_entries: int = 0
    tokens_scored: int = 0
    # 预填充墙钟时间（秒），仅用于日志与终端摘要，不写入 CSV
    prefill_seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        """固定列顺序，矩阵按 "a;b|c;d" 展开"""
        return {
            "policy": self.policy,
            "perplexity": f"{self.perplexity:.6f}",
            "eviction_ratio_mean": f"{self.eviction_ratio_mean:.6f}",
            "retained_entries": self.retained_entries,
            "full_entries": self.full_entries,
            "kv_bytes_full": self.kv_bytes_full,
            "kv_bytes_pruned": self.kv_bytes_pruned,
            "flops_ag": str(self.flops_ag),
            "flops_mha": str(self.flops_mha),
            "flops_combined": str(self.flops_combined),
            "empirical_macs": self.empirical_macs,
            "tokens_scored": self.tokens_scored,
            "eviction_per_layer_head": "|".join(
                ";".join(f"{v:.4f}" for v in row) for row in self.eviction_per_layer_head),
        }


@dataclass
class PolicyEvaluation:
    """逐窗口累计的原始计数"""
    nll_sum: float = 0.0
    tokens: int = 0
    retained_entries: int = 0
    full_entries: int = 0
    retained_per_layer_head: Optional[np.ndarray] = None
    macs: MacCounter = field(default_factory=MacCounter)
    prefill_seconds: float = 0.0

    @property
    def perplexity(self) -> float:
        return math.exp(self.nll_sum / self.tokens)

    @property
    def retention_ratio(self) -> float:
        return self.retained_entries / self.full_entries if self.full_entries else 1.0

    @property
    def eviction_ratio(self) -> float:
        return 1.0 - self.retention_ratio


def _nll(logits: np.ndarray, target: int) -> float:
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[target])


def evaluate_policy(model: GatedTransformer, windows: Sequence[TrainingWindow], policy: EvictionPolicy,
                    prompt_len: int, tau_override: Optional[float] = None) -> PolicyEvaluation:
    """每个窗口：预填充前 prompt_len 个 token 并按策略剪枝，其余 token 逐个以真实 token 输入解码并打分"""
    if not windows:
        raise CorpusError("evaluation corpus yields no windows")
    cfg = model.config
    result = PolicyEvaluation(retained_per_layer_head=np.zeros((cfg.n_layers, cfg.n_heads)))
    for window in windows:
        if len(window.inputs) <= prompt_len:
            raise ContractError(f"window of {len(window.inputs)} tokens leaves no continuation after {prompt_len}")
        started = time.perf_counter()
        pre = prefill(window.inputs[:prompt_len], model, policy, tau_override=tau_override, counter=result.macs)
        result.prefill_seconds += time.perf_counter() - started
        cache = pre.cache
        result.nll_sum += _nll(pre.logits.data[-1], window.targets[prompt_len - 1])
        result.tokens += 1
        result.full_entries += cfg.n_layers * cfg.n_heads * prompt_len
        result.retained_entries += cache.prefill_entry_count()
        for layer in range(cfg.n_layers):
            for head in range(cfg.n_heads):
                result.retained_per_layer_head[layer, head] += len(pre.plan.retained[layer][head])
        for i in range(prompt_len, len(window.inputs)):
            logits, cache = decode_step(window.inputs[i], cache, model, counter=result.macs)
            result.nll_sum += _nll(logits, window.targets[i])
            result.tokens += 1
    result.retained_per_layer_head /= len(windows) * prompt_len
    return result


def perplexity(model: GatedTransformer, windows: Sequence[TrainingWindow], policy: Optional[EvictionPolicy] = None,
               prompt_len: Optional[int] = None) -> float:
    """exp(续写部分的平均 token 负对数似然)；policy 缺省为不驱逐"""
    if not windows:
        raise CorpusError("evaluation corpus yields no windows")
    prompt_len = prompt_len or max(1, len(windows[0].inputs) // 2)
    return evaluate_policy(model, windows, policy or NoEvictionPolicy(), prompt_len).perplexity


def run_metrics(name: str, evaluation: PolicyEvaluation, config: ModelConfig, prompt_len: int) -> RunMetrics:
    """把原始计数整理为 RunMetrics；FLOPs 用实测驱逐率代入主导项模型"""
    t_percent = Fraction(100 * (evaluation.full_entries - evaluation.retained_entries), evaluation.full_entries)
    flops = flops_model(prompt_len, config, t_percent)
    dims = config.d_k, config.d_v
    return RunMetrics(
        policy=name,
        perplexity=evaluation.perplexity,
        eviction_ratio_mean=evaluation.eviction_ratio,
        eviction_per_layer_head=(1.0 - evaluation.retained_per_layer_head).tolist(),
        kv_bytes_full=kv_bytes(evaluation.full_entries, *dims),
        kv_bytes_pruned=kv_bytes(evaluation.retained_entries, *dims),
        flops_ag=flops.ag,
        flops_mha=flops.mha,
        flops_combined=flops.combined,
        empirical_macs=evaluation.macs.total,
        retained_entries=evaluation.retained_entries,
        full_entries=evaluation.full_entries,
        tokens_scored=evaluation.tokens,
        prefill_seconds=evaluation.prefill_seconds,
    )


@dataclass
class SweepPoint:
    tau: float
    retention: float
    perplexity: float


def retention_sweep(model: GatedTransformer, windows: Sequence[TrainingWindow], prompt_len: int,
                    taus: Sequence[float] = DEFAULT_SWEEP_TAUS) -> List[SweepPoint]:
    """在若干 τ 下评估 AG 策略；保留率升高而困惑度上升时只记录警告"""
    policy = AttentionGatePolicy(recent_window=model.config.recent_window)
    points = []
    for tau in taus:
        evaluation = evaluate_policy(model, windows, policy, prompt_len, tau_override=tau)
        points.append(SweepPoint(tau=tau, retention=evaluation.retention_ratio, perplexity=evaluation.perplexity))
        logger.info(f"[Sweep] τ={tau}: retention={evaluation.retention_ratio:.3f} ppl={evaluation.perplexity:.3f}")
    ordered = sorted(points, key=lambda p: p.retention)
    for low, high in zip(ordered, ordered[1:]):
        if high.retention > low.retention and high.perplexity > low.perplexity:
            logger.warning(f"[Sweep] 困惑度未随保留率单调下降: retention {low.retention:.3f}→{high.retention:.3f}, "
                           f"ppl {low.perplexity:.3f}→{high.perplexity:.3f}")
    return points
