"""AG 门控、掩码构造与 STE 测试"""
import numpy as np
import pytest

from conftest import tiny_config
from gatedkv import tensor as T
from gatedkv.attention_gate import (
    EvictionFlags,
    GateWeights,
    ag_forward,
    ag_forward_linear,
    ag_forward_prev_layer,
    build_mask,
    flag_rows,
    gate_stats,
    ste_backward,
)
from gatedkv.errors import ContractError
from gatedkv.models import GateVariant, LossConfig
from gatedkv.tensor import Tensor, numerical_gradient, relative_error
from gatedkv.training import build_model, eviction_loss
from gatedkv.transformer import forward


def zero_mha_gate(config) -> GateWeights:
    d = config.d_model
    return GateWeights(
        norm=T.parameter(np.ones(d)),
        w_q=[T.parameter(np.zeros((d, config.ag_d_k))) for _ in range(config.ag_heads)],
        w_k=[T.parameter(np.zeros((d, config.ag_d_k))) for _ in range(config.ag_heads)],
        w_v=[T.parameter(np.zeros((d, config.ag_d_k))) for _ in range(config.ag_heads)],
        w_o=T.parameter(np.zeros((config.ag_heads * config.ag_d_k, config.n_heads))),
    )


def all_masks(result):
    return [m for layer in result.masks for m in layer]


# ----------------------------------------------------------------------
# ag_forward
# ----------------------------------------------------------------------
def test_zero_scores_with_offset_retain_everything(rng):
    config = tiny_config(gamma=2.0, tau=0.5)
    scores, flags = ag_forward(Tensor(rng.normal(size=(6, 8))), zero_mha_gate(config), config)
    np.testing.assert_array_equal(scores.data, 0.0)
    np.testing.assert_allclose(flags.soft.data, 1.0 / (1.0 + np.exp(-2.0)))
    assert flags.soft.data[0, 0] == pytest.approx(0.8808, abs=1e-4)
    np.testing.assert_array_equal(flags.hard, 1.0)


def test_boundary_value_evicts():
    config = tiny_config(gamma=0.0, tau=0.5)
    _, flags = ag_forward(Tensor(np.ones((4, 8))), zero_mha_gate(config), config)
    np.testing.assert_array_equal(flags.soft.data, 0.5)
    np.testing.assert_array_equal(flags.hard, 0.0)


def test_single_token_depends_only_on_itself(make_model, rng):
    m = make_model(seed=3)
    gate = m.layers[0].gate
    x = rng.normal(size=(5, 8))
    _, alone = ag_forward(Tensor(x[:1]), gate, m.config)
    _, within = ag_forward(Tensor(x), gate, m.config)
    np.testing.assert_allclose(alone.soft.data[0], within.soft.data[0], atol=1e-12)


def test_ag_forward_rejects_other_variants(rng):
    config = tiny_config(gate_variant=GateVariant.LINEAR_GATE)
    with pytest.raises(ContractError):
        ag_forward(Tensor(rng.normal(size=(3, 8))), zero_mha_gate(config), config)


def test_hard_flags_strictly_above_tau(make_model, rng):
    m = make_model(seed=5)
    _, flags = ag_forward(Tensor(rng.normal(size=(10, 8))), m.layers[0].gate, m.config)
    np.testing.assert_array_equal(flags.hard, (flags.soft.data > m.config.tau).astype(float))


def test_raising_tau_never_retains_more(make_model, rng):
    m = make_model(seed=2, gamma=0.0)
    x = Tensor(rng.normal(size=(12, 8)))
    counts = [ag_forward(x, m.layers[0].gate, m.config, tau=tau)[1].hard.sum()
              for tau in (0.05, 0.2, 0.4, 0.5, 0.6, 0.8, 0.95)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_head_flag_depends_only_on_its_output_column(make_model, rng):
    m = make_model(seed=4)
    gate = m.layers[0].gate
    x = Tensor(rng.normal(size=(6, 8)))
    _, before = ag_forward(x, gate, m.config)
    gate.w_o.data[:, 1] += 0.7
    _, after = ag_forward(x, gate, m.config)
    np.testing.assert_array_equal(before.soft.data[:, 0], after.soft.data[:, 0])
    assert not np.allclose(before.soft.data[:, 1], after.soft.data[:, 1])


# ----------------------------------------------------------------------
# ag_forward_linear
# ----------------------------------------------------------------------
def test_linear_gate_zero_weights_retain_all(rng):
    config = tiny_config(gate_variant=GateVariant.LINEAR_GATE, gamma=0.0, tau=0.3)
    gate = GateWeights(norm=T.parameter(np.ones(8)), w_lin=T.parameter(np.zeros((8, 2))))
    _, flags = ag_forward_linear(Tensor(rng.normal(size=(5, 8))), gate, config)
    np.testing.assert_array_equal(flags.soft.data, 0.5)
    np.testing.assert_array_equal(flags.hard, 1.0)


def test_linear_gate_is_local(make_model, rng):
    m = make_model(seed=1, gate_variant=GateVariant.LINEAR_GATE)
    gate = m.layers[0].gate
    x = rng.normal(size=(6, 8))
    _, base = ag_forward_linear(Tensor(x), gate, m.config)
    permuted = x.copy()
    permuted[[0, 1, 3, 4, 5]] = x[[5, 4, 1, 0, 3]]
    _, moved = ag_forward_linear(Tensor(permuted), gate, m.config)
    np.testing.assert_allclose(moved.soft.data[2], base.soft.data[2], atol=1e-12)


def test_linear_and_mha_gates_differ(rng):
    x = Tensor(rng.normal(size=(8, 8)))
    mha = build_model(tiny_config(), seed=9)
    lin = build_model(tiny_config(gate_variant=GateVariant.LINEAR_GATE), seed=9)
    s_mha, _ = ag_forward(x, mha.layers[0].gate, mha.config)
    s_lin, _ = ag_forward_linear(x, lin.layers[0].gate, lin.config)
    assert not np.allclose(s_mha.data, s_lin.data)


# ----------------------------------------------------------------------
# ag_forward_prev_layer
# ----------------------------------------------------------------------
def test_prev_layer_gate_start_two_keeps_first_layers_dense(rng):
    m = build_model(tiny_config(n_layers=3, gate_variant=GateVariant.PREV_LAYER_GATE, gate_start_layer=2), seed=0)
    res = forward(m, list(rng.integers(0, 16, size=7)))
    assert res.flags[0] is None and res.flags[1] is None
    assert res.flags[2] is not None
    causal = np.tril(np.ones((7, 7)))
    for layer in (0, 1):
        for mask in res.masks[layer]:
            np.testing.assert_array_equal(mask, causal)


def test_prev_layer_gate_start_one_gates_only_last_layer(rng):
    m = build_model(tiny_config(gate_variant=GateVariant.PREV_LAYER_GATE, gate_start_layer=1), seed=0)
    res = forward(m, list(rng.integers(0, 16, size=6)))
    assert res.flags[0] is None
    assert res.flags[1] is not None and res.stats.layers == [1]


def test_prev_layer_flags_ignore_own_layer_weights(rng):
    m = build_model(tiny_config(gate_variant=GateVariant.PREV_LAYER_GATE, gate_start_layer=1, gamma=0.0), seed=0)
    tokens = list(rng.integers(0, 16, size=6))
    before = forward(m, tokens).flags[1].soft.data.copy()
    for w in m.layers[1].w_q + m.layers[1].w_k + m.layers[1].w_v:
        w.data += rng.normal(size=w.shape)
    m.layers[1].w_o.data += 1.0
    after = forward(m, tokens).flags[1].soft.data
    np.testing.assert_array_equal(before, after)


def test_prev_layer_below_start_is_contract_error(rng):
    m = build_model(tiny_config(n_layers=3, gate_variant=GateVariant.PREV_LAYER_GATE, gate_start_layer=2), seed=0)
    with pytest.raises(ContractError):
        ag_forward_prev_layer(Tensor(rng.normal(size=(4, 8))), m.layers[1].gate, m.config, layer=1)


# ----------------------------------------------------------------------
# build_mask
# ----------------------------------------------------------------------
def test_mask_three_tokens():
    mask = build_mask(np.array([[1.0], [0.0], [1.0]]), 3, r=0)
    np.testing.assert_array_equal(mask[0], [[1, 0, 0], [1, 1, 0], [1, 0, 1]])


def test_mask_all_ones_is_causal():
    mask = build_mask(np.ones((5, 2)), 5)
    for head in mask:
        np.testing.assert_array_equal(head, np.tril(np.ones((5, 5))))


def test_mask_window_of_one_keeps_predecessor():
    mask = build_mask(np.zeros((5, 1)), 5, r=1)[0]
    expected = np.eye(5) + np.eye(5, k=-1)
    np.testing.assert_array_equal(mask, expected)


def test_mask_diagonal_always_preserved(rng):
    violations = 0
    for _ in range(200):
        n, h, r = int(rng.integers(1, 12)), int(rng.integers(1, 4)), int(rng.integers(0, 4))
        mask = build_mask(rng.integers(0, 2, size=(n, h)).astype(float), n, r)
        violations += int(np.sum(np.diagonal(mask, axis1=1, axis2=2) != 1.0))
    assert violations == 0


def test_model_masks_keep_diagonal_for_random_models(rng):
    for seed in range(10):
        m = build_model(tiny_config(gamma=0.0, tau=0.6, recent_window=int(seed % 3)), seed=seed)
        res = forward(m, list(rng.integers(0, 16, size=9)))
        for mask in all_masks(res):
            np.testing.assert_array_equal(np.diagonal(mask), 1.0)


# ----------------------------------------------------------------------
# STE
# ----------------------------------------------------------------------
def test_ste_derivative_at_zero():
    soft = T.sigmoid(Tensor(np.zeros((2, 2))))
    flags = EvictionFlags(layer=0, soft=soft, hard=np.zeros((2, 2)), tau=0.5)
    np.testing.assert_allclose(ste_backward(flags), 0.25)


def test_eviction_loss_gradient_matches_soft_surrogate(rng):
    gamma, tau = 2.0, 0.5
    cfg = LossConfig(alpha=5.0, beta=0.4)
    scores = T.parameter(rng.uniform(0.0, 2.0, size=(6, 3)))

    soft = T.sigmoid(scores + gamma)
    flags = EvictionFlags(layer=0, soft=soft, hard=(soft.data > tau).astype(float), tau=tau)
    eviction_loss(gate_stats([flags]), cfg).backward()

    def soft_loss():
        mean = (1.0 / (1.0 + np.exp(-(scores.data + gamma)))).mean()
        return cfg.alpha * abs(mean - cfg.beta)

    numeric = numerical_gradient(soft_loss, scores, 1e-4)
    assert relative_error(scores.grad, numeric) <= 1e-5


def test_no_gate_gradient_without_controlled_entries(rng):
    m = build_model(tiny_config(recent_window=16), seed=0)
    res = forward(m, list(rng.integers(0, 16, size=6)))
    loss = T.cross_entropy(res.logits, list(rng.integers(0, 16, size=6)))
    loss = loss + eviction_loss(res.stats, LossConfig(alpha=0.0, beta=0.4))
    loss.backward()
    for name, p in m.named_parameters():
        if ".gate." in name:
            assert p.grad is None or not np.any(p.grad), name


def test_gate_stats_eviction_is_one_minus_retention(make_model, rng):
    m = make_model(seed=6, gamma=0.0)
    res = forward(m, list(rng.integers(0, 16, size=8)))
    stats = res.stats
    assert stats.eviction_ratio == pytest.approx(1.0 - stats.retention)
    for flags, ratio in zip(res.flags, stats.per_layer_eviction):
        assert ratio == pytest.approx(1.0 - flags.hard.mean())
    np.testing.assert_allclose(stats.per_head_eviction, [1.0 - f.hard.mean(axis=0) for f in res.flags])


def test_flag_rows_cover_every_entry(make_model, rng):
    m = make_model(seed=0)
    res = forward(m, list(rng.integers(0, 16, size=5)))
    rows = flag_rows(res.flags)
    assert len(rows) == 2 * 2 * 5
    layer, head, token, soft, hard = rows[0]
    assert (layer, head, token) == (0, 0, 0)
    assert hard == int(soft > m.config.tau)
