"""驱逐策略注册表

把 PolicySpec 解析为策略对象，并负责在基准评估中把基线策略的预算
对齐到 AG 实测的驱逐率。
"""
import logging
from typing import Callable, Dict, List

from ..errors import PolicyError
from ..models import BenchSpec, PolicyKind, PolicySpec
from .base import EvictionPolicy
from .gate import AttentionGatePolicy, NoEvictionPolicy, RandomPolicy
from .h2o import H2OPolicy
from .static import LocalPolicy, StreamingLLMPolicy

logger = logging.getLogger(__name__)

# 命令行里的简写
_ALIASES = {
    "ag": PolicyKind.ATTENTION_GATE,
    "gate": PolicyKind.ATTENTION_GATE,
    "streaming": PolicyKind.STREAMING_LLM,
    "full": PolicyKind.NONE,
}


class PolicyRegistry:
    """策略注册表，管理策略构造函数的注册与查找"""

    def __init__(self):
        self._factories: Dict[PolicyKind, Callable[[PolicySpec, int], EvictionPolicy]] = {}

    def register_policy(self, kind: PolicyKind, factory: Callable[[PolicySpec, int], EvictionPolicy]) -> None:
        """注册策略

        Args:
            kind: 策略类型
            factory: (spec, recent_window) -> EvictionPolicy
        """
        self._factories[kind] = factory

    def is_allowed(self, kind: PolicyKind) -> bool:
        return kind in self._factories

    def names(self) -> List[str]:
        return [kind.value for kind in self._factories]

    def create(self, spec: PolicySpec, recent_window: int = 0) -> EvictionPolicy:
        """按规格构造策略对象"""
        if not self.is_allowed(spec.kind):
            raise PolicyError(f"policy '{spec.kind.value}' is not registered")
        policy = self._factories[spec.kind](spec, recent_window)
        logger.debug(f"[Registry] 构造策略: {policy.description}")
        return policy


def _require_budget(spec: PolicySpec) -> int:
    if spec.budget is None:
        raise PolicyError(f"policy '{spec.kind.value}' needs a budget")
    return spec.budget


policy_registry = PolicyRegistry()
policy_registry.register_policy(PolicyKind.NONE, lambda spec, r: NoEvictionPolicy())
policy_registry.register_policy(PolicyKind.ATTENTION_GATE, lambda spec, r: AttentionGatePolicy(recent_window=r))
policy_registry.register_policy(PolicyKind.LOCAL, lambda spec, r: LocalPolicy(window=max(spec.window, 1)))
policy_registry.register_policy(
    PolicyKind.STREAMING_LLM, lambda spec, r: StreamingLLMPolicy(sink_count=spec.sink_count, window=spec.window))
policy_registry.register_policy(
    PolicyKind.H2O, lambda spec, r: H2OPolicy(budget=_require_budget(spec), window=spec.window))
policy_registry.register_policy(
    PolicyKind.RANDOM, lambda spec, r: RandomPolicy(budget=_require_budget(spec), seed=spec.seed))


def parse_policy_names(text: str) -> List[PolicyKind]:
    """解析 "NAME[,NAME…]"，保持给定顺序并去重；未知名称抛出 PolicyError"""
    kinds: List[PolicyKind] = []
    for raw in text.split(","):
        name = raw.strip().lower()
        if not name:
            continue
        if name in _ALIASES:
            kind = _ALIASES[name]
        else:
            try:
                kind = PolicyKind(name)
            except ValueError:
                raise PolicyError(f"unknown policy '{raw.strip()}' (known: {', '.join(k.value for k in PolicyKind)})")
        if kind not in kinds:
            kinds.append(kind)
    if not kinds:
        raise PolicyError("no policy given")
    return kinds


def retention_for_ratio(n: int, eviction_ratio: float) -> int:
    """给定驱逐率时每头保留的条目数：round((1 − ratio)·n)，至少 1、至多 n"""
    if not 0.0 <= eviction_ratio <= 1.0:
        raise PolicyError(f"eviction ratio {eviction_ratio} outside [0, 1]")
    return min(n, max(1, int(round((1.0 - eviction_ratio) * n))))


def matched_policy_spec(kind: PolicyKind, n: int, eviction_ratio: float, bench: BenchSpec) -> PolicySpec:
    """把基线策略的预算对齐到目标驱逐率"""
    budget = retention_for_ratio(n, eviction_ratio)
    if kind == PolicyKind.STREAMING_LLM:
        sinks = min(bench.sink_count, budget)
        return PolicySpec(kind=kind, sink_count=sinks, window=budget - sinks, budget=budget)
    if kind == PolicyKind.H2O:
        return PolicySpec(kind=kind, window=min(bench.h2o_window, budget), budget=budget)
    if kind == PolicyKind.LOCAL:
        return PolicySpec(kind=kind, window=budget, budget=budget)
    if kind == PolicyKind.RANDOM:
        return PolicySpec(kind=kind, budget=budget, seed=bench.random_seed)
    return PolicySpec(kind=kind)
