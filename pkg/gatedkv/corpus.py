"""字节级语料处理与训练窗口切分"""
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import CorpusError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingWindow:
    """定长训练窗口：targets 为 inputs 右移一位"""
    inputs: List[int]
    targets: List[int]


def tokenize(text: Union[str, bytes]) -> List[int]:
    """UTF-8 字节即 token，词表大小 256"""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def detokenize(tokens: Sequence[int]) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


def chunk_tokens(tokens: Sequence[int], seq_len: int, max_windows: Optional[int] = None) -> List[TrainingWindow]:
    """
    按固定长度不重叠地切分 token 序列。

    :param tokens: token 序列
    :param seq_len: 每个窗口的输入长度
    :param max_windows: 最多返回的窗口数，None 表示不限
    :return: floor((n−1)/seq_len) 个窗口（受 max_windows 截断）
    """
    if seq_len <= 0:
        raise CorpusError(f"seq_len must be positive, got {seq_len}")
    count = max(0, (len(tokens) - 1) // seq_len)
    if max_windows is not None:
        count = min(count, max_windows)
    windows = []
    for i in range(count):
        start = i * seq_len
        windows.append(TrainingWindow(
            inputs=[int(t) for t in tokens[start:start + seq_len]],
            targets=[int(t) for t in tokens[start + 1:start + seq_len + 1]],
        ))
    return windows


def read_corpus(path: str) -> List[int]:
    """读取语料文件为 token 序列；文件缺失或为空时抛出 CorpusError"""
    if not path or not os.path.isfile(path):
        raise CorpusError(f"corpus file not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if not data:
        raise CorpusError(f"corpus file is empty: {path}")
    return tokenize(data)


def ingest_corpus(path: str, seq_len: int, max_windows: Optional[int] = None) -> List[TrainingWindow]:
    tokens = read_corpus(path)
    windows = chunk_tokens(tokens, seq_len, max_windows)
    logger.info(f"[Corpus] {path}: {len(tokens)} bytes → {len(windows)} 个窗口 (seq_len={seq_len})")
    return windows


# ----------------------------------------------------------------------
# 合成语料
# ----------------------------------------------------------------------
_SYLLABLES = ["ka", "lo", "mi", "ru", "te", "zo", "na", "vi", "pe", "su", "do", "ga"]
_FILLER = [
    "as noted before, ",
    "and so on and so on, ",
    "the record above is kept as is. ",
    "nothing else changes here. ",
    "again, the same as before. ",
]


def _word(rng: np.random.Generator) -> str:
    return "".join(rng.choice(_SYLLABLES, size=2))


def generate_synthetic_corpus(n_bytes: int, seed: int = 0, noise: float = 0.02) -> str:
    """生成带冗余填充的结构化文本

    每条记录给出 key=value，随后是若干可被驱逐的填充句，最后提问并复述答案。
    noise 为逐字符随机替换的概率。同一 seed 输出完全一致。
    """
    if n_bytes <= 0:
        raise CorpusError(f"n_bytes must be positive, got {n_bytes}")
    rng = np.random.default_rng(seed)
    parts: List[str] = []
    size = 0
    while size < n_bytes:
        key, value = _word(rng), int(rng.integers(10, 100))
        filler = "".join(rng.choice(_FILLER, size=int(rng.integers(1, 4))))
        record = f"{key}={value}; {filler}q: {key}? a: {value}.\n"
        parts.append(record)
        size += len(record)
    chars = list("".join(parts)[:n_bytes])
    alphabet = "abcdefghijklmnopqrstuvwxyz "
    for i in np.flatnonzero(rng.random(len(chars)) < noise):
        if chars[i] != "\n":
            chars[i] = alphabet[int(rng.integers(len(alphabet)))]
    return "".join(chars)
