"""配置数据结构定义

符号对照：L=n_layers, d=d_model, h=n_heads, h'=ag_heads, d_k'=ag_d_k,
τ=tau, γ=gamma, r=recent_window, α=alpha, β=beta。
"""
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class GateVariant(str, Enum):
    """AG 结构变体"""
    MHA_GATE = "mha_gate"                # MHA' + Sigmoid 门控（默认）
    LINEAR_GATE = "linear_gate"          # 线性层替代 MHA'，仅使用局部信息
    PREV_LAYER_GATE = "prev_layer_gate"  # 由上一层隐状态与 AG 决定本层驱逐


class TrainableSet(str, Enum):
    """可训练参数集合"""
    AG_ONLY = "ag_only"
    AG_PLUS_ATTENTION = "ag_plus_attention_projections"
    ALL = "all"  # 从零预训练玩具基座模型


class PolicyKind(str, Enum):
    """KV-Cache 驱逐策略"""
    ATTENTION_GATE = "attention_gate"
    STREAMING_LLM = "streaming_llm"
    H2O = "h2o"
    LOCAL = "local"
    RANDOM = "random"
    NONE = "none"


class ModelConfig(BaseModel):
    """模型结构与门控超参数"""
    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(256, gt=0)
    n_layers: int = Field(2, gt=0)
    d_model: int = Field(64, gt=0)
    n_heads: int = Field(4, gt=0)
    d_k: int = Field(16, gt=0)
    d_v: int = Field(16, gt=0)
    d_ff: int = Field(256, gt=0)
    ag_heads: int = Field(2, gt=0)
    ag_d_k: int = Field(16, gt=0)
    tau: float = Field(0.5, gt=0.0, lt=1.0)
    gamma: float = Field(2.0, ge=0.0)
    gate_variant: GateVariant = GateVariant.MHA_GATE
    gate_start_layer: int = Field(0, ge=0)
    recent_window: int = Field(0, ge=0)
    max_seq: int = Field(128, gt=0)
    norm_eps: float = Field(1e-6, gt=0.0)

    @model_validator(mode="after")
    def _check_gate(self) -> "ModelConfig":
        if self.ag_heads >= self.n_heads:
            raise ValueError(f"ag_heads ({self.ag_heads}) must be smaller than n_heads ({self.n_heads})")
        if self.gate_start_layer >= self.n_layers:
            raise ValueError(f"gate_start_layer ({self.gate_start_layer}) must be < n_layers ({self.n_layers})")
        if self.gate_variant == GateVariant.PREV_LAYER_GATE and self.gate_start_layer < 1:
            raise ValueError("prev_layer_gate requires gate_start_layer >= 1")
        return self

    def is_gated(self, layer: int) -> bool:
        """该层是否产生驱逐决策"""
        return layer >= self.gate_start_layer


class LossConfig(BaseModel):
    """驱逐损失配置：ℓ_evict = α·|AG_mean − β|"""
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(5.0, ge=0.0)
    beta: float = Field(0.4, ge=0.0, le=1.0)
    lm_weight: float = Field(1.0, ge=0.0)


class TrainSpec(BaseModel):
    """训练配置"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(1e-3, gt=0.0)
    epochs: int = Field(1, gt=0)
    batch_size: int = Field(4, gt=0)
    seq_len: int = Field(64, gt=0)
    weight_decay: float = Field(0.01, ge=0.0)
    seed: int = 0
    trainable_set: TrainableSet = TrainableSet.AG_PLUS_ATTENTION
    max_steps: Optional[int] = Field(None, gt=0)
    log_every: int = Field(50, gt=0)
    init_checkpoint: Optional[str] = None


class PolicySpec(BaseModel):
    """单个驱逐策略的参数"""
    model_config = ConfigDict(extra="forbid")

    kind: PolicyKind = PolicyKind.NONE
    sink_count: int = Field(4, ge=0)
    window: int = Field(0, ge=0)
    budget: Optional[int] = Field(None, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_budget(self) -> "PolicySpec":
        if self.budget is None:
            return self
        if self.kind == PolicyKind.STREAMING_LLM and self.budget < self.sink_count + self.window:
            raise ValueError(f"budget ({self.budget}) < sink_count + window ({self.sink_count + self.window})")
        if self.kind == PolicyKind.H2O and self.budget < self.window:
            raise ValueError(f"budget ({self.budget}) < window ({self.window})")
        return self


class BenchSpec(BaseModel):
    """评估/基准配置"""
    model_config = ConfigDict(extra="forbid")

    prompt_len: int = Field(48, gt=0)
    continuation_len: int = Field(16, gt=0)
    max_windows: int = Field(32, gt=0)
    sink_count: int = Field(4, ge=0)
    h2o_window: int = Field(4, ge=0)
    policies: List[PolicyKind] = [
        PolicyKind.NONE, PolicyKind.LOCAL, PolicyKind.STREAMING_LLM,
        PolicyKind.H2O, PolicyKind.RANDOM, PolicyKind.ATTENTION_GATE,
    ]
    random_seed: int = 0


class RunConfig(BaseModel):
    """一次运行的完整配置（JSON 配置文件的顶层结构）"""
    model_config = ConfigDict(extra="forbid")

    name: str = "run"
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainSpec = TrainSpec()
    bench: BenchSpec = BenchSpec()
    corpus_path: Optional[str] = None
    eval_corpus_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_beta(self) -> "RunConfig":
        # β ∈ [0, τ]
        if self.loss.beta > self.model.tau:
            raise ValueError(f"loss.beta ({self.loss.beta}) must be <= model.tau ({self.model.tau})")
        if self.train.seq_len > self.model.max_seq:
            raise ValueError(f"train.seq_len ({self.train.seq_len}) exceeds model.max_seq ({self.model.max_seq})")
        if self.bench.prompt_len + self.bench.continuation_len > self.model.max_seq:
            raise ValueError("bench.prompt_len + bench.continuation_len exceeds model.max_seq")
        return self
