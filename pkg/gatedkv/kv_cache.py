"""KV-Cache 存储

每层、每个注意力头保存被保留 token 的 (原始位置, k, v)。
- 位置在每个头内严格递增
- 解码阶段产生的条目永不被 AG 驱逐
- 仅因近期窗口而保留的条目（pinned=False）在滑出窗口后删除
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Set

import numpy as np

from .config import BYTES_PER_SCALAR
from .errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class HeadCache:
    """单个注意力头的缓存条目"""
    positions: List[int]
    keys: np.ndarray
    values: np.ndarray
    pinned: List[bool]

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, d_k: int, d_v: int) -> "HeadCache":
        return cls(positions=[], keys=np.zeros((0, d_k)), values=np.zeros((0, d_v)), pinned=[])

    def append(self, position: int, k: np.ndarray, v: np.ndarray, pinned: bool = True) -> None:
        if self.positions and position <= self.positions[-1]:
            raise ContractError(f"position {position} not after last cached position {self.positions[-1]}")
        self.positions.append(position)
        self.keys = np.vstack([self.keys, np.asarray(k, dtype=np.float64).reshape(1, -1)])
        self.values = np.vstack([self.values, np.asarray(v, dtype=np.float64).reshape(1, -1)])
        self.pinned.append(pinned)

    def select(self, keep: Sequence[int]) -> "HeadCache":
        """按条目下标筛选，顺序保持"""
        keep = list(keep)
        return HeadCache(
            positions=[self.positions[i] for i in keep],
            keys=self.keys[keep].copy(),
            values=self.values[keep].copy(),
            pinned=[self.pinned[i] for i in keep],
        )


@dataclass
class KVCache:
    """按层、按头组织的 KV-Cache

    n_prefill 记录原始预填充长度（剪枝后不变，用于掩码与统计），
    n_decoded 记录解码步数。
    """
    layers: List[List[HeadCache]]
    n_prefill: int = 0
    n_decoded: int = 0
    recent_window: int = 0
    d_k: int = 0
    d_v: int = 0
    _evictions: int = field(default=0, repr=False)

    @classmethod
    def from_prefill(cls, keys: Sequence[Sequence[np.ndarray]], values: Sequence[Sequence[np.ndarray]],
                     recent_window: int = 0) -> "KVCache":
        """由完整预填充 K/V（每层每头 n×d）构造未剪枝缓存"""
        layers = []
        n = keys[0][0].shape[0]
        for layer_keys, layer_values in zip(keys, values):
            layers.append([
                HeadCache(positions=list(range(n)), keys=np.array(k, dtype=np.float64),
                          values=np.array(v, dtype=np.float64), pinned=[True] * n)
                for k, v in zip(layer_keys, layer_values)
            ])
        return cls(layers=layers, n_prefill=n, recent_window=recent_window,
                   d_k=keys[0][0].shape[1], d_v=values[0][0].shape[1])

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return len(self.layers[0]) if self.layers else 0

    @property
    def next_position(self) -> int:
        return self.n_prefill + self.n_decoded

    def head(self, layer: int, head: int) -> HeadCache:
        return self.layers[layer][head]

    def entry_count(self) -> int:
        return sum(len(h) for layer in self.layers for h in layer)

    def prefill_entry_count(self) -> int:
        return sum(sum(1 for p in h.positions if p < self.n_prefill) for layer in self.layers for h in layer)

    def memory_bytes(self) -> int:
        """条目数 × (d_k + d_v) × 每标量字节数"""
        return self.entry_count() * (self.d_k + self.d_v) * BYTES_PER_SCALAR

    def drop_expired(self, layer: int, head: int, query_position: int) -> None:
        """删除已滑出近期窗口、且未被标志保留的条目"""
        cache = self.layers[layer][head]
        if all(cache.pinned):
            return
        limit = query_position - self.recent_window
        keep = [i for i, (p, pin) in enumerate(zip(cache.positions, cache.pinned)) if pin or p >= limit]
        if len(keep) != len(cache):
            self._evictions += len(cache) - len(keep)
            self.layers[layer][head] = cache.select(keep)

    def get_stats(self) -> Dict[str, Any]:
        """缓存统计信息"""
        per_layer = [sum(len(h) for h in layer) for layer in self.layers]
        full = self.n_layers * self.n_heads * (self.n_prefill + self.n_decoded)
        return {
            "n_prefill": self.n_prefill,
            "n_decoded": self.n_decoded,
            "entries": self.entry_count(),
            "entries_full": full,
            "per_layer_entries": per_layer,
            "window_evictions": self._evictions,
            "memory_bytes": self.memory_bytes(),
        }

    def snapshot_rows(self) -> List[tuple]:
        """CSV 导出行：(layer, head, position)"""
        return [
            (layer_idx, head_idx, position)
            for layer_idx, layer in enumerate(self.layers)
            for head_idx, head in enumerate(layer)
            for position in head.positions
        ]

    def print_stats(self) -> None:
        stats = self.get_stats()
        logger.info(
            f"[KVCache] 条目 {stats['entries']}/{stats['entries_full']}，"
            f"内存 {stats['memory_bytes']} bytes，窗口驱逐 {stats['window_evictions']}"
        )


def prune_cache(cache: KVCache, retained: Sequence[Sequence[Set[int]]],
                pinned: Optional[Sequence[Sequence[Set[int]]]] = None) -> KVCache:
    """按每层每头的保留位置集合剪枝

    retained 必须是已有位置的子集；pinned 给出其中由标志保留的位置，
    缺省时全部视为 pinned。n_prefill 保持不变。
    """
    if len(retained) != cache.n_layers or any(len(r) != cache.n_heads for r in retained):
        raise ContractError("retained sets do not match cache layer/head layout")
    layers = []
    for layer_idx, layer in enumerate(cache.layers):
        new_layer = []
        for head_idx, head in enumerate(layer):
            keep_positions = set(retained[layer_idx][head_idx])
            missing = keep_positions.difference(head.positions)
            if missing:
                raise ContractError(f"layer {layer_idx} head {head_idx}: positions {sorted(missing)} not in cache")
            keep = [i for i, p in enumerate(head.positions) if p in keep_positions]
            pruned = head.select(keep)
            if pinned is not None:
                pin_set = pinned[layer_idx][head_idx]
                pruned.pinned = [p in pin_set for p in pruned.positions]
            new_layer.append(pruned)
        layers.append(new_layer)
    result = KVCache(layers=layers, n_prefill=cache.n_prefill, n_decoded=cache.n_decoded,
                     recent_window=cache.recent_window, d_k=cache.d_k, d_v=cache.d_v)
    logger.debug(f"[KVCache] 剪枝：{cache.entry_count()} → {result.entry_count()} 条目")
    return result
