"""可视化导出：驱逐网格、驱逐前注意力热图、标志与缓存快照 CSV"""
import logging
import os
from typing import Dict, List, Sequence

import numpy as np

from . import tensor as T
from .attention_gate import flag_rows
from .errors import ContractError
from .policies import AttentionGatePolicy
from .transformer import GatedTransformer, forward, prefill
from .utils.pgm import write_pgm
from .utils.reporting import write_rows

logger = logging.getLogger(__name__)


def eviction_grid(mask: np.ndarray) -> np.ndarray:
    """单头 n×n 网格：1（白）为被计算且缓存的 (query, key)，0（黑）为被驱逐或未来位置"""
    return (np.asarray(mask) > 0).astype(np.float64)


def flag_grid(hard: np.ndarray) -> np.ndarray:
    """h×n 网格：每行一个头，白为保留"""
    return np.asarray(hard, dtype=np.float64).T


def attention_heatmap(attention: np.ndarray) -> np.ndarray:
    """按行最大值归一化，方便观察每个 query 的注意力分布"""
    peak = attention.max(axis=1, keepdims=True)
    return np.divide(attention, peak, out=np.zeros_like(attention), where=peak > 0)


def export_visualizations(model: GatedTransformer, tokens: Sequence[int], out_dir: str,
                          scale: int = 4) -> Dict[str, List[str]]:
    """写出所有可视化文件，返回按类别分组的路径"""
    cfg = model.config
    if len(tokens) > cfg.max_seq:
        raise ContractError(f"text of {len(tokens)} tokens exceeds max_seq {cfg.max_seq}")
    os.makedirs(out_dir, exist_ok=True)
    written: Dict[str, List[str]] = {"eviction": [], "flags": [], "attention": [], "csv": []}

    with T.no_grad():
        gated = forward(model, tokens)
        dense = forward(model, tokens, use_gate=False, capture_attention=True)

    mask_rows = []
    for layer, masks in enumerate(gated.masks):
        for head, mask in enumerate(masks):
            path = os.path.join(out_dir, f"eviction_L{layer}_H{head}.pgm")
            write_pgm(path, eviction_grid(mask), scale)
            written["eviction"].append(path)
            for j, t in zip(*np.nonzero(mask > 0)):
                mask_rows.append((layer, head, int(j), int(t)))
        flags = gated.flags[layer]
        if flags is not None:
            path = os.path.join(out_dir, f"flags_L{layer}.pgm")
            write_pgm(path, flag_grid(flags.hard), scale)
            written["flags"].append(path)

    for layer, attention in enumerate(dense.attention):
        for head, a in enumerate(attention):
            path = os.path.join(out_dir, f"attention_L{layer}_H{head}.pgm")
            write_pgm(path, attention_heatmap(a), scale)
            written["attention"].append(path)

    cache = prefill(tokens, model, AttentionGatePolicy(recent_window=cfg.recent_window)).cache
    cache.print_stats()
    csv_files = {
        "flags.csv": (["layer", "head", "token_index", "soft", "hard"], flag_rows(gated.flags)),
        "eviction_grid.csv": (["layer", "head", "query", "key"], mask_rows),
        "cache_snapshot.csv": (["layer", "head", "position"], cache.snapshot_rows()),
    }
    for name, (header, rows) in csv_files.items():
        path = os.path.join(out_dir, name)
        write_rows(path, header, rows)
        written["csv"].append(path)

    evicted = [1.0 - float(f.hard.mean()) for f in gated.flags if f is not None]
    logger.info(f"[Viz] 写出 {sum(len(v) for v in written.values())} 个文件到 {out_dir}；"
                f"各门控层驱逐率 {', '.join(f'{e:.3f}' for e in evicted) or '-'}")
    return written
