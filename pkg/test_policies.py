"""驱逐策略、策略注册表与 KV-Cache 剪枝测试"""
import numpy as np
import pytest
from pydantic import ValidationError

from gatedkv.attention_gate import EvictionFlags
from gatedkv.errors import ContractError, PolicyError
from gatedkv.kv_cache import KVCache, prune_cache
from gatedkv.models import BenchSpec, PolicyKind, PolicySpec
from gatedkv.policies import (
    AttentionGatePolicy,
    H2OPolicy,
    LocalPolicy,
    NoEvictionPolicy,
    RandomPolicy,
    StreamingLLMPolicy,
    apply_h2o,
    apply_local,
    apply_streaming_llm,
    matched_policy_spec,
    parse_policy_names,
    policy_registry,
    retention_for_ratio,
)


def make_cache(n_layers=2, n_heads=2, n=6, d_k=3, d_v=2, recent_window=0, seed=0) -> KVCache:
    rng = np.random.default_rng(seed)
    keys = [[rng.normal(size=(n, d_k)) for _ in range(n_heads)] for _ in range(n_layers)]
    values = [[rng.normal(size=(n, d_v)) for _ in range(n_heads)] for _ in range(n_layers)]
    return KVCache.from_prefill(keys, values, recent_window=recent_window)


def h2o_oracle(attention: np.ndarray, budget: int, window: int):
    """逐位置计数比它更优的候选数，排名小于配额者保留"""
    n = attention.shape[1]
    recent = set(range(n - window, n)) if window else set()
    quota = budget - len(recent)
    result = []
    for head in attention:
        scores = head.sum(axis=0)
        candidates = [t for t in range(n) if t not in recent]
        keep = set(recent)
        for t in candidates:
            better = sum(1 for u in candidates if scores[u] > scores[t] or (scores[u] == scores[t] and u < t))
            if better < quota:
                keep.add(t)
        result.append(keep)
    return result


def random_causal_attention(rng, h: int, n: int) -> np.ndarray:
    raw = rng.random((h, n, n)) * np.tril(np.ones((n, n)))
    return raw / raw.sum(axis=2, keepdims=True)


# ----------------------------------------------------------------------
# Local / StreamingLLM
# ----------------------------------------------------------------------
def test_local_examples():
    assert apply_local(10, 3) == {7, 8, 9}
    assert apply_local(5, 9) == {0, 1, 2, 3, 4}
    assert apply_local(1, 1) == {0}


def test_local_window_below_one_is_contract_error():
    with pytest.raises(ContractError):
        apply_local(4, 0)


def test_streaming_examples():
    assert apply_streaming_llm(10, 2, 3) == {0, 1, 7, 8, 9}
    assert apply_streaming_llm(4, 3, 3) == {0, 1, 2, 3}


def test_streaming_without_sinks_is_local():
    for n in range(1, 12):
        for window in range(1, 12):
            assert apply_streaming_llm(n, 0, window) == apply_local(n, window)


def test_streaming_rejects_empty_split():
    with pytest.raises(ContractError):
        apply_streaming_llm(8, 0, 0)


def test_static_policies_match_closed_form_on_grid():
    for n in range(1, 21):
        for window in range(0, 21):
            if window >= 1:
                assert apply_local(n, window) == set(range(max(0, n - window), n))
            for sinks in range(0, 21):
                if sinks == 0 and window == 0:
                    continue
                expected = set(range(min(sinks, n))) | set(range(max(0, n - window), n))
                kept = apply_streaming_llm(n, sinks, window)
                assert kept == expected, (n, sinks, window)
                assert len(kept) == min(n, sinks + window)


def test_static_policies_are_uniform_across_heads():
    plan = StreamingLLMPolicy(sink_count=1, window=2).plan(8, n_layers=3, n_heads=2)
    assert all(s == {0, 6, 7} for layer in plan.retained for s in layer)
    assert plan.retention_ratio(8) == pytest.approx(3 / 8)
    assert LocalPolicy(window=3).plan(8, 1, 2).retained == [[{5, 6, 7}, {5, 6, 7}]]


# ----------------------------------------------------------------------
# H2O
# ----------------------------------------------------------------------
def test_h2o_uniform_causal_attention_keeps_earliest():
    n = 6
    uniform = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
    for k in range(1, n + 1):
        assert apply_h2o(uniform[None], budget=k, window=0) == [set(range(k))]


def test_h2o_keeps_attended_token():
    n = 8
    attention = np.zeros((1, n, n))
    attention[0, :, 3] = 1.0
    for window in range(0, 4):
        for budget in range(1 + window, n + 1):
            assert 3 in apply_h2o(attention, budget, window)[0]


def test_h2o_always_keeps_recent_window(rng):
    for _ in range(50):
        n = int(rng.integers(1, 12))
        window = int(rng.integers(0, n + 1))
        budget = int(rng.integers(window, n + 1))
        for kept in apply_h2o(random_causal_attention(rng, 2, n), budget, window):
            assert set(range(n - window, n)) <= kept
            assert len(kept) == budget


def test_h2o_matches_bruteforce_oracle(rng):
    for _ in range(500):
        n = int(rng.integers(1, 17))
        h = int(rng.integers(1, 4))
        window = int(rng.integers(0, n + 1))
        budget = int(rng.integers(window, n + 1))
        attention = random_causal_attention(rng, h, n)
        assert apply_h2o(attention, budget, window) == h2o_oracle(attention, budget, window)


def test_h2o_tie_break_prefers_lower_position():
    attention = np.full((1, 4, 4), 0.25)
    assert apply_h2o(attention, budget=2, window=0) == [{0, 1}]


def test_h2o_contract_errors():
    attention = np.full((1, 4, 4), 0.25)
    with pytest.raises(ContractError):
        apply_h2o(attention, budget=1, window=2)
    with pytest.raises(ContractError):
        apply_h2o(attention, budget=5, window=0)
    with pytest.raises(ContractError):
        apply_h2o(np.ones((4, 4)), budget=2, window=0)


def test_h2o_policy_needs_attention():
    with pytest.raises(ContractError):
        H2OPolicy(budget=2).plan(4, 1, 1)


def test_h2o_policy_clamps_budget_to_length(rng):
    attention = [random_causal_attention(rng, 2, 3)]
    plan = H2OPolicy(budget=10, window=1).plan(3, 1, 2, attention=attention)
    assert plan.retained == [[{0, 1, 2}, {0, 1, 2}]]


# ----------------------------------------------------------------------
# AG / 随机 / 无驱逐
# ----------------------------------------------------------------------
def test_gate_plan_unions_flags_with_window():
    hard = np.array([[1, 0], [0, 0], [1, 1], [0, 0], [0, 1]], dtype=float)
    flags = [None, EvictionFlags.from_hard(1, hard)]
    plan = AttentionGatePolicy(recent_window=2).plan(5, 2, 2, flags=flags)
    assert plan.retained[0] == [set(range(5)), set(range(5))]
    assert plan.retained[1] == [{0, 2, 3, 4}, {2, 3, 4}]
    assert plan.pinned[1] == [{0, 2}, {2, 4}]


def test_random_policy_is_deterministic_per_seed():
    a = RandomPolicy(budget=4, seed=7).plan(10, 2, 3)
    b = RandomPolicy(budget=4, seed=7).plan(10, 2, 3)
    c = RandomPolicy(budget=4, seed=8).plan(10, 2, 3)
    assert a.retained == b.retained
    assert a.retained != c.retained
    assert all(len(s) == 4 and s <= set(range(10)) for layer in a.retained for s in layer)


def test_random_draws_fresh_positions_per_window():
    policy = RandomPolicy(budget=4, seed=7)
    windows = [policy.plan(16, 2, 3).retained for _ in range(3)]
    assert windows[0] != windows[1] and windows[1] != windows[2]
    replay = RandomPolicy(budget=4, seed=7)
    assert [replay.plan(16, 2, 3).retained for _ in range(3)] == windows


def test_no_eviction_keeps_everything():
    plan = NoEvictionPolicy().plan(5, 2, 2)
    assert plan.retained_count() == 2 * 2 * 5
    assert plan.retention_ratio(5) == 1.0


# ----------------------------------------------------------------------
# 注册表
# ----------------------------------------------------------------------
def test_parse_policy_names_aliases_and_order():
    assert parse_policy_names("none, ag,streaming,h2o,ag") == [
        PolicyKind.NONE, PolicyKind.ATTENTION_GATE, PolicyKind.STREAMING_LLM, PolicyKind.H2O]
    assert parse_policy_names("Local") == [PolicyKind.LOCAL]


@pytest.mark.parametrize("text", ["bogus", "none,lru", "", " , "])
def test_parse_policy_names_rejects(text):
    with pytest.raises(PolicyError):
        parse_policy_names(text)


def test_registry_knows_every_kind():
    assert sorted(policy_registry.names()) == sorted(k.value for k in PolicyKind)


def test_registry_requires_budget_for_h2o_and_random():
    with pytest.raises(PolicyError):
        policy_registry.create(PolicySpec(kind=PolicyKind.H2O))
    with pytest.raises(PolicyError):
        policy_registry.create(PolicySpec(kind=PolicyKind.RANDOM))


def test_registry_passes_recent_window_to_gate():
    policy = policy_registry.create(PolicySpec(kind=PolicyKind.ATTENTION_GATE), recent_window=3)
    assert isinstance(policy, AttentionGatePolicy) and policy.recent_window == 3


def test_policy_spec_budget_validation():
    with pytest.raises(ValidationError):
        PolicySpec(kind=PolicyKind.STREAMING_LLM, sink_count=4, window=4, budget=6)
    with pytest.raises(ValidationError):
        PolicySpec(kind=PolicyKind.H2O, window=4, budget=3)


def test_retention_for_ratio():
    assert retention_for_ratio(48, 0.5) == 24
    assert retention_for_ratio(10, 1.0) == 1
    assert retention_for_ratio(10, 0.0) == 10
    with pytest.raises(PolicyError):
        retention_for_ratio(10, 1.5)


def test_matched_specs_share_budget():
    bench = BenchSpec(sink_count=4, h2o_window=4)
    n, ratio = 48, 0.6
    budget = retention_for_ratio(n, ratio)
    streaming = matched_policy_spec(PolicyKind.STREAMING_LLM, n, ratio, bench)
    assert streaming.sink_count + streaming.window == budget
    assert len(apply_streaming_llm(n, streaming.sink_count, streaming.window)) == budget
    assert matched_policy_spec(PolicyKind.LOCAL, n, ratio, bench).window == budget
    assert matched_policy_spec(PolicyKind.H2O, n, ratio, bench).budget == budget
    assert matched_policy_spec(PolicyKind.RANDOM, n, ratio, bench).budget == budget


def test_matched_streaming_with_tiny_budget_uses_sinks_only():
    spec = matched_policy_spec(PolicyKind.STREAMING_LLM, 10, 0.8, BenchSpec(sink_count=4))
    assert (spec.sink_count, spec.window) == (2, 0)


# ----------------------------------------------------------------------
# KV-Cache 剪枝
# ----------------------------------------------------------------------
def test_prune_retain_all_is_identical():
    cache = make_cache()
    pruned = prune_cache(cache, NoEvictionPolicy().plan(6, 2, 2).retained)
    for layer_a, layer_b in zip(cache.layers, pruned.layers):
        for a, b in zip(layer_a, layer_b):
            assert a.positions == b.positions
            np.testing.assert_array_equal(a.keys, b.keys)
            np.testing.assert_array_equal(a.values, b.values)
    assert pruned.n_prefill == cache.n_prefill


def test_prune_selects_rows_in_order():
    cache = make_cache()
    retained = [[{4, 1}, set(range(6))], [set(), {5}]]
    pruned = prune_cache(cache, retained)
    head = pruned.head(0, 0)
    assert head.positions == [1, 4]
    np.testing.assert_array_equal(head.keys, cache.head(0, 0).keys[[1, 4]])
    np.testing.assert_array_equal(head.values, cache.head(0, 0).values[[1, 4]])
    assert len(pruned.head(1, 0)) == 0
    assert pruned.n_prefill == 6


def test_prune_memory_estimate():
    cache = make_cache(d_k=3, d_v=2)
    pruned = prune_cache(cache, [[{0, 1}, {2}], [{3}, set()]])
    assert pruned.entry_count() == 4
    assert pruned.memory_bytes() == 4 * (3 + 2) * 8


def test_prune_missing_position_is_contract_error():
    cache = make_cache(n=4)
    with pytest.raises(ContractError):
        prune_cache(cache, [[{0, 7}, set()], [set(), set()]])
    with pytest.raises(ContractError):
        prune_cache(cache, [[set(), set()]])


def test_window_entries_expire_after_leaving_window():
    cache = make_cache(n_layers=1, n_heads=1, n=6, recent_window=2)
    pruned = prune_cache(cache, [[{1, 4, 5}]], pinned=[[{1}]])
    pruned.drop_expired(0, 0, query_position=6)
    assert pruned.head(0, 0).positions == [1, 4, 5]
    pruned.head(0, 0).append(6, np.zeros(3), np.zeros(2), pinned=True)
    pruned.drop_expired(0, 0, query_position=7)
    assert pruned.head(0, 0).positions == [1, 5, 6]
    assert pruned.get_stats()["window_evictions"] == 1


def test_append_requires_increasing_positions():
    cache = make_cache(n_layers=1, n_heads=1, n=3)
    with pytest.raises(ContractError):
        cache.head(0, 0).append(2, np.zeros(3), np.zeros(2))


def test_snapshot_rows_list_retained_entries():
    pruned = prune_cache(make_cache(n=3), [[{0}, {1, 2}], [set(), {2}]])
    assert pruned.snapshot_rows() == [(0, 0, 0), (0, 1, 1), (0, 1, 2), (1, 1, 2)]
