"""策略基准评估

先评估 AG 得到实测驱逐率，再把各基线策略的预算对齐到该驱逐率并发评估。
模型权重只读共享，每个评估任务独占自己的 KV-Cache；结果由调用方按策略顺序统一写出。
"""
import asyncio
import logging
from typing import Dict, List, Optional, Sequence

from .config import GATEDKV_THREADS
from .corpus import TrainingWindow
from .metrics import RunMetrics, evaluate_policy, run_metrics
from .models import BenchSpec, PolicyKind, PolicySpec
from .policies import matched_policy_spec, policy_registry
from .transformer import GatedTransformer

logger = logging.getLogger(__name__)


def _evaluate(model: GatedTransformer, windows: Sequence[TrainingWindow], spec: PolicySpec,
              bench: BenchSpec) -> RunMetrics:
    policy = policy_registry.create(spec, recent_window=model.config.recent_window)
    evaluation = evaluate_policy(model, windows, policy, bench.prompt_len)
    metrics = run_metrics(spec.kind.value, evaluation, model.config, bench.prompt_len)
    logger.info(f"[Bench] {policy.description}: ppl={metrics.perplexity:.4f} "
                f"evict={metrics.eviction_ratio_mean:.4f} kv={metrics.kv_bytes_pruned}/{metrics.kv_bytes_full} bytes "
                f"prefill={metrics.prefill_seconds * 1000:.2f}ms flops={metrics.flops_combined}")
    return metrics


async def run_bench(model: GatedTransformer, windows: Sequence[TrainingWindow], bench: BenchSpec,
                    kinds: Optional[Sequence[PolicyKind]] = None, threads: int = GATEDKV_THREADS) -> List[RunMetrics]:
    """按 kinds 顺序返回每个策略的 RunMetrics

    AG 总是先评估（即使未被请求），其驱逐率决定基线的保留预算。
    """
    kinds = list(kinds or bench.policies)
    ag_metrics = _evaluate(model, windows, PolicySpec(kind=PolicyKind.ATTENTION_GATE), bench)
    ratio = ag_metrics.eviction_ratio_mean
    logger.info(f"[Bench] AG 实测驱逐率 {ratio:.4f}，基线按该驱逐率对齐预算")

    semaphore = asyncio.Semaphore(max(1, threads))

    async def evaluate_one(kind: PolicyKind) -> RunMetrics:
        async with semaphore:
            spec = matched_policy_spec(kind, bench.prompt_len, ratio, bench)
            return await asyncio.to_thread(_evaluate, model, windows, spec, bench)

    pending = [k for k in kinds if k != PolicyKind.ATTENTION_GATE]
    results = await asyncio.gather(*(evaluate_one(k) for k in pending))
    by_kind: Dict[PolicyKind, RunMetrics] = dict(zip(pending, results))
    by_kind[PolicyKind.ATTENTION_GATE] = ag_metrics
    return [by_kind[k] for k in kinds]


def bench_policies(model: GatedTransformer, windows: Sequence[TrainingWindow], bench: BenchSpec,
                   kinds: Optional[Sequence[PolicyKind]] = None, threads: int = GATEDKV_THREADS) -> List[RunMetrics]:
    """run_bench 的同步入口"""
    return asyncio.run(run_bench(model, windows, bench, kinds, threads))
