"""检查点：带版本号的命名张量二进制容器

布局（全部小端）：
    b"GKVC" | uint32 version | uint32 header_len | header(JSON, UTF-8) | float64 payload
header = {"model_config": {...}, "tensors": [{"name", "shape", "offset"}, ...]}，
offset 为相对 payload 起点的字节偏移。
"""
import json
import logging
import os
import struct
from typing import Any, Dict, Optional

import numpy as np
from pydantic import ValidationError

from .errors import CheckpointError
from .models import ModelConfig
from .training import create_model
from .transformer import GatedTransformer

logger = logging.getLogger(__name__)

MAGIC = b"GKVC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f8")


def save_checkpoint(model: GatedTransformer, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
    entries, offset = [], 0
    params = model.named_parameters()
    for name, p in params:
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size * _DTYPE.itemsize
    header = {"model_config": model.config.model_dump(mode="json"), "tensors": entries}
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, p in params:
            f.write(np.ascontiguousarray(p.data, dtype=_DTYPE).tobytes())
    logger.info(f"[Checkpoint] 已保存 {len(entries)} 个张量到 {path}")


def read_header(path: str) -> Dict[str, Any]:
    with open(path, "rb") as f:
        return _read_header(f, path)[0]


def _read_header(f, path: str):
    prefix = f.read(_PREFIX.size)
    if len(prefix) != _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint prefix")
    magic, version, header_len = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(f.read(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}")
    return header, _PREFIX.size + header_len


def load_checkpoint(path: str) -> GatedTransformer:
    """读取检查点并重建模型；形状或名称不符时抛出 CheckpointError"""
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        header, _ = _read_header(f, path)
        payload = f.read()
    try:
        config = ModelConfig.model_validate(header["model_config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid model_config: {e}")
    model = create_model(config)
    stored = {entry["name"]: entry for entry in header.get("tensors", [])}
    for name, p in model.named_parameters():
        entry = stored.pop(name, None)
        if entry is None:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {entry['shape']}, model expects {list(p.shape)}")
        count = int(np.prod(p.shape))
        end = entry["offset"] + count * _DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {name} runs past end of file")
        p.data[...] = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=entry["offset"]).reshape(p.shape)
    if stored:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(stored)}")
    logger.info(f"[Checkpoint] 已加载 {path}")
    return model


def load_weights_into(model: GatedTransformer, path: str) -> int:
    """把检查点中名称与形状都匹配的张量拷入已有模型，返回拷贝数量

    用于分阶段训练：先 trainable_set=all 预训练基座，再换一组门控超参数训练 AG。
    """
    source = load_checkpoint(path)
    stored = source.state_dict()
    copied = 0
    for name, p in model.named_parameters():
        data = stored.get(name)
        if data is not None and data.shape == p.shape:
            p.data[...] = data
            copied += 1
    return copied
