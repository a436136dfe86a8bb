"""静态策略：Local（仅近期窗口）与 StreamingLLM（attention sink + 近期窗口）"""
from typing import Optional, Sequence, Set

import numpy as np

from ..errors import ContractError
from .base import EvictionPolicy, RetentionPlan


def apply_local(n: int, window: int) -> Set[int]:
    """保留 {n−window, …, n−1}"""
    if window < 1:
        raise ContractError(f"local window must be >= 1, got {window}")
    return set(range(max(0, n - window), n))


def apply_streaming_llm(n: int, sink_count: int, window: int) -> Set[int]:
    """保留 {0, …, sink_count−1} ∪ {n−window, …, n−1}"""
    if sink_count < 0 or window < 0 or (sink_count == 0 and window == 0):
        raise ContractError(f"invalid streaming_llm split: sinks={sink_count}, window={window}")
    sinks = set(range(min(sink_count, n)))
    recent = set(range(max(0, n - window), n)) if window > 0 else set()
    return sinks | recent


class LocalPolicy(EvictionPolicy):
    """只保留最近的 window 个 token，所有层、所有头相同"""

    def __init__(self, window: int):
        self.window = window

    def plan(self, n, n_layers, n_heads, attention=None, flags=None) -> RetentionPlan:
        return RetentionPlan.uniform(apply_local(n, self.window), n_layers, n_heads)

    @property
    def name(self) -> str:
        return "local"

    @property
    def description(self) -> str:
        return f"Local: keep last {self.window} tokens"


class StreamingLLMPolicy(EvictionPolicy):
    """attention sink + 近期窗口"""

    def __init__(self, sink_count: int = 4, window: int = 0):
        self.sink_count = sink_count
        self.window = window

    def plan(self, n, n_layers, n_heads, attention=None, flags=None) -> RetentionPlan:
        return RetentionPlan.uniform(apply_streaming_llm(n, self.sink_count, self.window), n_layers, n_heads)

    @property
    def name(self) -> str:
        return "streaming_llm"

    @property
    def description(self) -> str:
        return f"StreamingLLM: keep first {self.sink_count} sink token(s) + last {self.window} recent tokens"
