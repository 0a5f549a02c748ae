import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from tomebind.adapters import MeanStubAdapter
from tomebind.attention import AttentionMap
from tomebind.embedding import EmbeddingMatrix, apply_surgery, encode, identity_surgery
from tomebind.errors import MissingMap, NonFiniteLoss, WindowClosed
from tomebind.optimizer import (
    BindingState,
    OptimizerConfig,
    build_supervision,
    calibrate_lambda,
    compute_losses,
    entropy_loss,
    in_window,
    init_state,
    optimized_step_count,
    semantic_binding_loss,
    total_loss,
    update_step,
)


def amap(values, pos, layer):
    return AttentionMap(torch.as_tensor(values, dtype=torch.float64), layer, pos, normalized=False)


class C:
    def __init__(self, k, pos):
        self.entity_index, self.position = k, pos


def test_entropy_loss_one_hot():
    v = torch.zeros(4, 4)
    v[0, 0] = 1
    assert float(entropy_loss({(1, "l"): amap(v, 2, "l")})) == pytest.approx(0, abs=1e-9)


def test_entropy_loss_uniform_pair():
    maps = {(k, "l"): amap(torch.ones(32, 32), k, "l") for k in (1, 2)}
    assert float(entropy_loss(maps)) == pytest.approx(2 * math.log(1024), abs=1e-8)


def test_entropy_loss_six_maps():
    rng = np.random.default_rng(0)
    maps, oracle = {}, 0.0
    for k in (1, 2):
        for layer in ("a", "b", "c"):
            v = rng.random((8, 8)) + 1e-3
            p = v / v.sum()
            oracle += float(-(p * np.log(p + 1e-12)).sum())
            maps[(k, layer)] = amap(v, k, layer)
    assert float(entropy_loss(maps, [C(1, 1), C(2, 2)], ["a", "b", "c"])) == pytest.approx(oracle, rel=1e-12)


def test_entropy_loss_missing():
    maps = {(1, "a"): amap(torch.ones(2, 2), 1, "a")}
    with pytest.raises(MissingMap):
        entropy_loss(maps, [C(1, 1), C(2, 2)], ["a"])
    with pytest.raises(MissingMap):
        entropy_loss({})


@pytest.mark.parametrize("l_ent, l_sem, lam, expected", [(3.0, 2.0, 0.0, 3.0), (0.0, 5.0, 1.0, 5.0),
                                                           (2.5, 4.0, 0.5, 4.5)])
def test_total_loss(l_ent, l_sem, lam, expected):
    assert total_loss(l_ent, l_sem, OptimizerConfig(lambda_sem=lam)) == pytest.approx(expected)


def test_total_loss_non_finite():
    with pytest.raises(NonFiniteLoss):
        total_loss(float("nan"), 1.0, OptimizerConfig())
    with pytest.raises(NonFiniteLoss):
        total_loss(torch.tensor(1.0), torch.tensor(float("inf")), OptimizerConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(t_opt_fraction=0)
    with pytest.raises(ValueError):
        OptimizerConfig(lambda_sem=-1)
    with pytest.raises(ValueError):
        OptimizerConfig(supervision_mode="whatever")


@pytest.mark.parametrize("T, n", [(1, 1), (5, 1), (20, 4), (50, 10), (30, 6)])
def test_window(T, n):
    assert optimized_step_count(T, 0.2) == n
    assert [i for i in range(T) if in_window(i, T, 0.2)] == list(range(n))


@given(st.integers(1, 2000), st.sampled_from([0.05, 0.1, 0.2, 0.3, 0.5, 1.0]))
def test_window_ceiling(T, frac):
    from fractions import Fraction

    exact = math.ceil(Fraction(T) * Fraction(str(frac)))
    assert optimized_step_count(T, frac) == exact


def _surgery(encoder, parsed):
    return apply_surgery(encode(parsed.prompt, encoder), parsed, ets=True, encoder=encoder)


def test_sem_loss_zero_for_identical_supervision(adapter, encoder, parsed):
    s = _surgery(encoder, parsed)
    sup = {c.entity_index: EmbeddingMatrix(c.embedding[None].clone(), 1, s.matrix.pooled, reduced=True)
           for c in s.composites}
    z = adapter.init_latents(0)
    assert float(semantic_binding_loss(z, 500, s, sup, adapter)) == 0.0


def test_sem_loss_mean_stub_closed_form(encoder, parsed):
    s = _surgery(encoder, parsed)
    sup = build_supervision(parsed, encoder)
    z = torch.zeros(1, 4, 5, 5, dtype=torch.float64)
    loss = float(semantic_binding_loss(z, 10, s, sup, MeanStubAdapter()))
    oracle = sum(float((c.embedding.mean() - sup[c.entity_index].rows.mean()) ** 2) * z.numel()
                 for c in s.composites)
    assert loss == pytest.approx(oracle, rel=1e-10)
    per_k = [float(semantic_binding_loss(z, 10, s, sup, MeanStubAdapter(), entities=[k])) for k in (1, 2)]
    assert loss == pytest.approx(sum(per_k), rel=1e-12)


def test_supervision_modes(encoder, parsed):
    np_sup = build_supervision(parsed, encoder)
    assert np_sup[2].source_prompt == "a dog wearing hat"
    full = build_supervision(parsed, encoder, "full-prompt")
    assert all(m.source_prompt == parsed.prompt for m in full.values())


def test_entropy_decreases_with_lambda_zero(adapter, encoder, parsed):
    cfg = OptimizerConfig(lambda_sem=0.0, t_opt_fraction=1.0)
    state = init_state(_surgery(encoder, parsed), parsed, encoder, cfg)
    z, t = adapter.init_latents(0), adapter.timesteps(10)[0]
    for i in range(10):
        state = update_step(state, z, t, adapter, cfg, i, 10)
    trace = [r.l_ent for r in state.loss_trace]
    assert len(trace) == 10
    assert all(b < a for a, b in zip(trace, trace[1:]))


def test_zero_step_size_is_noop(adapter, encoder, parsed):
    cfg = OptimizerConfig(step_size=0.0)
    s = _surgery(encoder, parsed)
    state = init_state(s, parsed, encoder, cfg)
    out = update_step(state, adapter.init_latents(0), 999, adapter, cfg, 0, 10)
    assert torch.equal(out.surgery.matrix.rows, s.matrix.rows)
    assert len(out.loss_trace) == 1


def test_window_closed(adapter, encoder, parsed):
    cfg = OptimizerConfig()
    state = init_state(_surgery(encoder, parsed), parsed, encoder, cfg)
    with pytest.raises(WindowClosed):
        update_step(state, adapter.init_latents(0), 100, adapter, cfg, 2, 10)


@pytest.mark.parametrize("update_ets", [False, True])
def test_parameter_isolation(adapter, encoder, parsed, update_ets):
    cfg = OptimizerConfig(t_opt_fraction=1.0, update_ets=update_ets, lambda_sem=1e-3)
    s = _surgery(encoder, parsed)
    sup_before = {k: m.rows.clone() for k, m in build_supervision(parsed, encoder).items()}
    state = init_state(s, parsed, encoder, cfg)
    z = adapter.init_latents(0)
    for i, t in enumerate(adapter.timesteps(3)):
        state = update_step(state, z, t, adapter, cfg, i, 3)
    new = state.surgery.matrix.rows
    trainable = set(s.composite_positions) | (set(s.eot_positions) if update_ets else set())
    frozen = [p for p in range(77) if p not in trainable]
    assert torch.equal(new[frozen], s.matrix.rows[frozen])
    assert not torch.equal(new[s.composite_positions], s.matrix.rows[s.composite_positions])
    if update_ets:
        assert not torch.equal(new[s.matrix.eot_start:], s.matrix.rows[s.matrix.eot_start:])
    for k, rows in sup_before.items():
        assert torch.equal(state.supervision[k].rows, rows)
    z_again = adapter.init_latents(0)
    assert torch.equal(z, z_again)


def test_total_loss_gradient_matches_finite_differences(small_adapter, encoder, parsed):
    cfg = OptimizerConfig(lambda_sem=1e-3)
    s = _surgery(encoder, parsed)
    state = init_state(s, parsed, encoder, cfg)
    z, t = small_adapter.init_latents(3), 700
    pos = s.composite_positions
    params = s.matrix.rows[pos].detach().clone().requires_grad_(True)
    _, _, total = compute_losses(state, z, t, small_adapter, cfg, params, pos)
    (grad,) = torch.autograd.grad(total, params)

    def f(x):
        with torch.no_grad():
            return float(compute_losses(state, z, t, small_adapter, cfg, x, pos)[2])

    h = 1e-5
    fd = torch.zeros_like(grad)
    base = params.detach().clone()
    for idx in np.ndindex(*base.shape):
        up, down = base.clone(), base.clone()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (f(up) - f(down)) / (2 * h)
    assert float((grad - fd).norm() / fd.norm()) < 1e-3


def test_ablation_d_updates_noun_rows(adapter, encoder, parsed):
    cfg = OptimizerConfig(lambda_sem=1e-3)
    m = encode(parsed.prompt, encoder)
    s = identity_surgery(m, parsed)
    state = init_state(s, parsed, encoder, cfg)
    out = update_step(state, adapter.init_latents(0), 999, adapter, cfg, 0, 10)
    changed = [p for p in range(77) if not torch.equal(out.surgery.matrix.rows[p], m.rows[p])]
    assert changed == [2, 7]


def test_entropy_weight_zero_skips_capture(adapter, encoder, parsed):
    cfg = OptimizerConfig(entropy_weight=0.0)
    state = init_state(_surgery(encoder, parsed), parsed, encoder, cfg)
    out = update_step(state, adapter.init_latents(0), 999, adapter, cfg, 0, 10)
    assert out.loss_trace[0].l_ent == 0.0 and out.loss_trace[0].l_sem > 0


def test_entity_subsample(adapter, encoder, parsed):
    import random

    cfg = OptimizerConfig(entropy_weight=0.0, entity_subsample=1)
    s = _surgery(encoder, parsed)
    state = init_state(s, parsed, encoder, cfg)
    out = update_step(state, adapter.init_latents(0), 999, adapter, cfg, 0, 10, rng=random.Random(0))
    moved = [c.entity_index for c, c0 in zip(out.composites, s.composites)
             if not torch.equal(c.embedding, c0.embedding)]
    assert len(moved) == 1


def test_non_finite_leaves_state(adapter, encoder, parsed):
    cfg = OptimizerConfig()
    s = _surgery(encoder, parsed)
    state = init_state(s, parsed, encoder, cfg)
    huge = {k: replace(m, rows=m.rows * 1e200) for k, m in state.supervision.items()}
    with pytest.raises(NonFiniteLoss):
        update_step(BindingState(s, huge), adapter.init_latents(0), 999, adapter, cfg, 0, 10)
    assert torch.equal(state.surgery.matrix.rows, s.matrix.rows)


def test_calibrate_lambda(adapter, encoder, parsed):
    cfg = OptimizerConfig()
    state = init_state(_surgery(encoder, parsed), parsed, encoder, cfg)
    z = adapter.init_latents(0)
    lam = calibrate_lambda(state, z, 999, adapter, cfg)
    assert math.log10(lam) == round(math.log10(lam))
    l_ent, l_sem, _ = compute_losses(state, z, 999, adapter, replace(cfg, lambda_sem=1.0),
                                     state.surgery.matrix.rows[state.surgery.composite_positions].clone(),
                                     state.surgery.composite_positions)
    ratio = float(l_ent) / (lam * float(l_sem))
    assert 0.1 <= ratio <= 10
