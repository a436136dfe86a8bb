"""训练：自回归交叉熵 + 驱逐损失，AdamW，Xavier 初始化"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attention_gate import GateStats, GateWeights, gate_owner_layers
from .corpus import TrainingWindow
from .errors import ContractError, CorpusError, TrainingError
from .models import GateVariant, LossConfig, ModelConfig, TrainSpec
from .optim import AdamW
from .tensor import Tensor
from .transformer import GatedTransformer, LayerWeights, forward, is_trainable

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# 模型构造与初始化
# ----------------------------------------------------------------------
def _zeros(rows: int, cols: int) -> Tensor:
    return T.parameter(np.zeros((rows, cols)))


def _ones(width: int) -> Tensor:
    return T.parameter(np.ones(width))


def _gate_weights(config: ModelConfig) -> GateWeights:
    d = config.d_model
    if config.gate_variant == GateVariant.LINEAR_GATE:
        return GateWeights(norm=_ones(d), w_lin=_zeros(d, config.n_heads))
    return GateWeights(
        norm=_ones(d),
        w_q=[_zeros(d, config.ag_d_k) for _ in range(config.ag_heads)],
        w_k=[_zeros(d, config.ag_d_k) for _ in range(config.ag_heads)],
        w_v=[_zeros(d, config.ag_d_k) for _ in range(config.ag_heads)],
        w_o=_zeros(config.ag_heads * config.ag_d_k, config.n_heads),
    )


def create_model(config: ModelConfig) -> GatedTransformer:
    """按配置分配全零参数（归一化增益为 1）"""
    d, h = config.d_model, config.n_heads
    owners = set(gate_owner_layers(config))
    layers = [
        LayerWeights(
            attn_norm=_ones(d),
            w_q=[_zeros(d, config.d_k) for _ in range(h)],
            w_k=[_zeros(d, config.d_k) for _ in range(h)],
            w_v=[_zeros(d, config.d_v) for _ in range(h)],
            w_o=_zeros(h * config.d_v, d),
            ffn_norm=_ones(d),
            w_up=_zeros(d, config.d_ff),
            w_down=_zeros(config.d_ff, d),
            gate=_gate_weights(config) if i in owners else None,
        )
        for i in range(config.n_layers)
    ]
    return GatedTransformer(
        config=config,
        tok_emb=_zeros(config.vocab_size, d),
        pos_emb=_zeros(config.max_seq, d),
        layers=layers,
        final_norm=_ones(d),
    )


def init_weights(model: GatedTransformer, seed: int) -> None:
    """所有矩阵 Xavier 均匀初始化 U(±sqrt(6/(fan_in+fan_out)))，归一化增益置 1

    γ 偏移在门控内部加到分数上而不是参数，初始保留概率 ≈ σ(γ)。
    """
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        if p.data.ndim == 2:
            fan_in, fan_out = p.shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            p.data[...] = rng.uniform(-limit, limit, size=p.shape)
        else:
            p.data[...] = 1.0
        p.zero_grad()


def build_model(config: ModelConfig, seed: int = 0) -> GatedTransformer:
    model = create_model(config)
    init_weights(model, seed)
    return model


# ----------------------------------------------------------------------
# 损失
# ----------------------------------------------------------------------
def eviction_loss(stats: Optional[GateStats], cfg: LossConfig) -> Tensor:
    """ℓ_evict = α·|AG_mean − β|；无门控层时为 0"""
    if stats is None:
        return Tensor(0.0)
    return T.tensor_abs(stats.mean_retention - cfg.beta) * cfg.alpha


def total_loss(lm_loss: Tensor, evict_loss: Tensor, lm_weight: float = 1.0) -> Tensor:
    if lm_loss.size != 1 or evict_loss.size != 1:
        raise ContractError("total_loss expects scalar components")
    return lm_loss * lm_weight + evict_loss


def sequence_loss(model: GatedTransformer, window: TrainingWindow, cfg: LossConfig,
                  relaxed: bool = False) -> Tuple[Tensor, Tensor, Tensor, Optional[GateStats]]:
    """单个窗口的 (total, lm, evict, stats)"""
    res = forward(model, window.inputs, relaxed=relaxed)
    lm = T.cross_entropy(res.logits, window.targets)
    ev = eviction_loss(res.stats, cfg)
    return total_loss(lm, ev, cfg.lm_weight), lm, ev, res.stats


# ----------------------------------------------------------------------
# 训练循环
# ----------------------------------------------------------------------
@dataclass
class StepRecord:
    """单步训练指标"""
    step: int
    epoch: int
    lm_loss: float
    evict_loss: float
    total_loss: float
    mean_retention: float
    eviction_ratio: float
    per_layer_eviction: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def set_trainable(model: GatedTransformer, spec: TrainSpec) -> Dict[str, bool]:
    """按 trainable_set 设置 requires_grad，返回原状态以便恢复"""
    previous = {}
    for name, p in model.named_parameters():
        previous[name] = p.requires_grad
        p.requires_grad = is_trainable(name, spec.trainable_set)
        p.zero_grad()
    return previous


def _restore_trainable(model: GatedTransformer, previous: Dict[str, bool]) -> None:
    for name, p in model.named_parameters():
        p.requires_grad = previous.get(name, True)


def train(windows: Sequence[TrainingWindow], model: GatedTransformer, spec: TrainSpec, loss_cfg: LossConfig,
          callback: Optional[Callable[[StepRecord], None]] = None) -> Tuple[GatedTransformer, List[StepRecord]]:
    """训练 epochs 轮（或至 max_steps）

    每个 epoch 用 seed 派生的随机序打乱窗口；不在 trainable_set 内的参数保持原值。
    """
    if not windows:
        raise CorpusError("training corpus yields no windows")
    previous = set_trainable(model, spec)
    optimizer = AdamW(model.named_parameters(), lr=spec.learning_rate, weight_decay=spec.weight_decay)
    rng = np.random.default_rng(spec.seed)
    history: List[StepRecord] = []
    step = 0
    logger.info(f"[Trainer] 开始训练: {len(windows)} 个窗口, 可训练参数 "
                f"{sum(p.size for _, p in optimizer.params)}/{model.parameter_count()}, "
                f"trainable_set={spec.trainable_set.value}")
    try:
        for epoch in range(spec.epochs):
            order = rng.permutation(len(windows))
            for start in range(0, len(order), spec.batch_size):
                if spec.max_steps is not None and step >= spec.max_steps:
                    break
                batch = [windows[i] for i in order[start:start + spec.batch_size]]
                record = _train_step(model, optimizer, batch, loss_cfg, step, epoch)
                history.append(record)
                if callback is not None:
                    callback(record)
                if step % spec.log_every == 0:
                    logger.info(f"[Trainer] step {step}: lm={record.lm_loss:.4f} evict={record.evict_loss:.4f} "
                                f"retention={record.mean_retention:.3f}")
                step += 1
            if spec.max_steps is not None and step >= spec.max_steps:
                break
    finally:
        _restore_trainable(model, previous)
    logger.info(f"[Trainer] 训练结束: {step} 步")
    return model, history


def _train_step(model: GatedTransformer, optimizer: AdamW, batch: Sequence[TrainingWindow],
                loss_cfg: LossConfig, step: int, epoch: int) -> StepRecord:
    scale = 1.0 / len(batch)
    batch_total = None
    lm_sum = evict_sum = retention_sum = 0.0
    per_layer = None
    for window in batch:
        total, lm, ev, stats = sequence_loss(model, window, loss_cfg)
        batch_total = total if batch_total is None else batch_total + total
        lm_sum += lm.item()
        evict_sum += ev.item()
        retention_sum += stats.retention if stats is not None else 1.0
        if stats is not None:
            layer_ratios = np.asarray(stats.per_layer_eviction)
            per_layer = layer_ratios if per_layer is None else per_layer + layer_ratios
    loss = batch_total * scale
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch})")
    loss.backward()
    for name, p in optimizer.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {name} at step {step} (epoch {epoch})")
    optimizer.step()
    optimizer.zero_grad()
    mean_retention = retention_sum * scale
    return StepRecord(
        step=step,
        epoch=epoch,
        lm_loss=lm_sum * scale,
        evict_loss=evict_sum * scale,
        total_loss=value,
        mean_retention=mean_retention,
        eviction_ratio=1.0 - mean_retention,
        per_layer_eviction=[] if per_layer is None else [float(x) for x in per_layer * scale],
    )
