"""KV-Cache 驱逐策略"""
from .base import EvictionPolicy, RetentionPlan
from .h2o import H2OPolicy, apply_h2o
from .gate import AttentionGatePolicy, NoEvictionPolicy, RandomPolicy
from .static import LocalPolicy, StreamingLLMPolicy, apply_local, apply_streaming_llm
from .registry import PolicyRegistry, matched_policy_spec, parse_policy_names, policy_registry, retention_for_ratio

__all__ = [
    "EvictionPolicy", "RetentionPlan",
    "apply_local", "apply_streaming_llm", "apply_h2o",
    "LocalPolicy", "StreamingLLMPolicy", "H2OPolicy",
    "AttentionGatePolicy", "NoEvictionPolicy", "RandomPolicy",
    "PolicyRegistry", "policy_registry", "parse_policy_names", "retention_for_ratio", "matched_policy_spec",
]
