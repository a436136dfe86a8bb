"""H2O：按累计注意力分数（A2S）保留 heavy hitter

在预填充结束时基于完整注意力矩阵一次性选择，每个头独立。
"""
from typing import List, Set

import numpy as np

from ..errors import ContractError
from .base import EvictionPolicy, RetentionPlan


def apply_h2o(attention: np.ndarray, budget: int, window: int) -> List[Set[int]]:
    """每个头：score(t) = Σ_j A[j][t]；无条件保留最近 window 个位置，
    其余按分数从高到低补足 budget，分数相同时位置小者优先。
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 3 or attention.shape[1] != attention.shape[2]:
        raise ContractError(f"attention must be h×n×n, got {attention.shape}")
    n = attention.shape[1]
    if budget < window:
        raise ContractError(f"h2o budget ({budget}) < window ({window})")
    if budget > n:
        raise ContractError(f"h2o budget ({budget}) exceeds sequence length {n}")
    recent = set(range(max(0, n - window), n))
    quota = budget - len(recent)
    result = []
    for head_attention in attention:
        scores = head_attention.sum(axis=0)
        candidates = sorted((t for t in range(n) if t not in recent), key=lambda t: (-scores[t], t))
        result.append(recent | set(candidates[:quota]))
    return result


class H2OPolicy(EvictionPolicy):
    needs_attention = True

    def __init__(self, budget: int, window: int = 0):
        self.budget = budget
        self.window = window

    def plan(self, n, n_layers, n_heads, attention=None, flags=None) -> RetentionPlan:
        if attention is None:
            raise ContractError("h2o needs the prefill attention matrices")
        budget = min(self.budget, n)
        window = min(self.window, budget)
        return RetentionPlan(retained=[apply_h2o(layer_attention, budget, window) for layer_attention in attention])

    @property
    def name(self) -> str:
        return "h2o"

    @property
    def description(self) -> str:
        return f"H2O: budget {self.budget}, recent window {self.window}"
