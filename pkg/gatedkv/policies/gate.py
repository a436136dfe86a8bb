"""AG 驱动的保留计划，以及无驱逐 / 随机驱逐两个对照策略"""
from typing import Optional, Sequence

import numpy as np

from .base import EvictionPolicy, RetentionPlan


class AttentionGatePolicy(EvictionPolicy):
    """保留 flag=1 的位置，外加近期窗口覆盖的位置（仅窗口保留者不 pinned）"""
    uses_gate = True

    def __init__(self, recent_window: int = 0):
        self.recent_window = recent_window

    def plan(self, n, n_layers, n_heads, attention=None, flags=None) -> RetentionPlan:
        window = set(range(max(0, n - self.recent_window), n)) if self.recent_window > 0 else set()
        retained, pinned = [], []
        for layer in range(n_layers):
            layer_flags = flags[layer] if flags is not None else None
            if layer_flags is None:
                everything = set(range(n))
                retained.append([set(everything) for _ in range(n_heads)])
                pinned.append([set(everything) for _ in range(n_heads)])
                continue
            head_pins = [set(layer_flags.retained_positions(h)) for h in range(n_heads)]
            pinned.append(head_pins)
            retained.append([pins | window for pins in head_pins])
        return RetentionPlan(retained=retained, pinned=pinned)

    @property
    def name(self) -> str:
        return "attention_gate"


class NoEvictionPolicy(EvictionPolicy):
    """保留全部 token"""

    def plan(self, n, n_layers, n_heads, attention=None, flags=None) -> RetentionPlan:
        return RetentionPlan.uniform(set(range(n)), n_layers, n_heads)

    @property
    def name(self) -> str:
        return "none"


class RandomPolicy(EvictionPolicy):
    """每头独立随机保留 budget 个位置，作为同驱逐率下的对照

    整个策略对象共用一条随机流：逐次调用（逐窗口）得到不同的保留集合，
    同种子新建的策略按相同调用顺序可复现。
    """

    def __init__(self, budget: int, seed: int = 0):
        self.budget = budget
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def plan(self, n, n_layers, n_heads, attention=None, flags=None) -> RetentionPlan:
        budget = min(self.budget, n)
        retained = []
        for _ in range(n_layers):
            retained.append([set(int(p) for p in self._rng.choice(n, size=budget, replace=False))
                             for _ in range(n_heads)])
        return RetentionPlan(retained=retained)

    @property
    def name(self) -> str:
        return "random"

    @property
    def description(self) -> str:
        return f"Random: keep {self.budget} positions per head"
