"""驱逐策略基类"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set

import numpy as np


@dataclass
class RetentionPlan:
    """每层每头的保留位置集合

    pinned 为其中由标志保留的位置（其余仅因近期窗口保留）；None 表示全部 pinned。
    """
    retained: List[List[Set[int]]]
    pinned: Optional[List[List[Set[int]]]] = None

    def retained_count(self) -> int:
        return sum(len(s) for layer in self.retained for s in layer)

    def retention_ratio(self, n: int) -> float:
        slots = sum(len(layer) for layer in self.retained) * n
        return self.retained_count() / slots if slots else 1.0

    @classmethod
    def uniform(cls, positions: Set[int], n_layers: int, n_heads: int) -> "RetentionPlan":
        """所有层、所有头使用同一保留集合"""
        return cls(retained=[[set(positions) for _ in range(n_heads)] for _ in range(n_layers)])


class EvictionPolicy(ABC):
    """预填充结束时一次性决定保留集合的驱逐策略"""

    # 是否需要完整预填充注意力矩阵（H2O）
    needs_attention: bool = False
    # 是否由 AG 标志驱动（预填充阶段即使用掩码注意力）
    uses_gate: bool = False

    @abstractmethod
    def plan(self, n: int, n_layers: int, n_heads: int,
             attention: Optional[Sequence[np.ndarray]] = None,
             flags: Optional[Sequence] = None) -> RetentionPlan:
        """返回保留计划

        Args:
            n: 预填充长度
            attention: 每层一个 h×n×n 的 softmax 后注意力（needs_attention 时提供）
            flags: 每层的 EvictionFlags 或 None（uses_gate 时提供）
        """

    @property
    @abstractmethod
    def name(self) -> str:
        ...

    @property
    def description(self) -> str:
        return self.name
