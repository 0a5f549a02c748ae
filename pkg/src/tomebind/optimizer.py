"""Entropy and semantic-binding losses and the composite-token update."""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import torch

from .attention import AttentionMap, normalize, token_entropy
from .embedding import EmbeddingMatrix, SurgeryResult, encode, write_rows
from .encoders import TextEncoder
from .errors import MissingMap, NonFiniteLoss, ShapeMismatch, WindowClosed
from .parsing import noun_phrase
from .parsing.types import ParsedPrompt

SUPERVISION_MODES = ("noun-phrase", "full-prompt")


@dataclass
class OptimizerConfig:
    lambda_sem: float = 1.0
    t_opt_fraction: float = 0.2
    step_size: float = 0.01
    steps_per_timestep: int = 1
    probed_layers: list[str] | None = None
    supervision_mode: str = "noun-phrase"
    update_ets: bool = False
    entropy_weight: float = 1.0
    entity_subsample: int | None = None
    enabled: bool = True

    def __post_init__(self):
        if not 0 < self.t_opt_fraction <= 1:
            raise ValueError("t_opt_fraction must be in (0, 1]")
        if self.lambda_sem < 0 or self.entropy_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.step_size < 0:
            raise ValueError("step_size must be nonnegative")
        if self.steps_per_timestep < 1:
            raise ValueError("steps_per_timestep must be >= 1")
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ValueError(f"supervision_mode must be one of {SUPERVISION_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossRecord:
    step_index: int
    timestep: float
    l_ent: float
    l_sem: float
    total: float


@dataclass(frozen=True, eq=False)
class BindingState:
    surgery: SurgeryResult
    supervision: Mapping[int, EmbeddingMatrix]
    loss_trace: tuple[LossRecord, ...] = ()
    active: bool = True

    @property
    def composites(self):
        return self.surgery.composites


def optimized_step_count(num_steps: int, fraction: float) -> int:
    """``ceil(fraction * num_steps)``, robust to float noise such as 0.1 * 30."""
    return math.ceil(round(fraction * num_steps, 9))


def in_window(step_index: int, num_steps: int, fraction: float) -> bool:
    return 0 <= step_index < optimized_step_count(num_steps, fraction)


def build_supervision(parsed: ParsedPrompt, encoder: TextEncoder, mode: str = "noun-phrase") -> dict[int, EmbeddingMatrix]:
    """Frozen per-entity supervision encodings."""
    if mode == "full-prompt":
        full = encode(parsed.prompt, encoder)
        return {g.index: full for g in parsed.groups}
    return {g.index: encode(noun_phrase(parsed, g), encoder) for g in parsed.groups}


def init_state(surgery: SurgeryResult, parsed: ParsedPrompt, encoder: TextEncoder,
               config: OptimizerConfig) -> BindingState:
    sup = {}
    if config.lambda_sem > 0:
        sup = build_supervision(parsed, encoder, config.supervision_mode)
    return BindingState(surgery, sup)


def entropy_loss(maps: Mapping[tuple[int, str], AttentionMap] | Sequence[AttentionMap],
                 composites=None, layers: Sequence[str] | None = None) -> torch.Tensor:
    """Sum of map entropies over every (composite, probed layer) pair.

    ``maps`` may be a mapping keyed by (entity index, layer id) or a flat list;
    with ``composites`` and ``layers`` given, every pair must be present.
    """
    if not isinstance(maps, Mapping):
        if composites is None:
            if not maps:
                raise MissingMap("no attention maps supplied")
            return sum(token_entropy(m if m.normalized else normalize(m)) for m in maps)
        by_pos = {c.position: c.entity_index for c in composites}
        maps = {(by_pos[m.token_position], m.layer_id): m for m in maps if m.token_position in by_pos}
    if composites is not None and layers is not None:
        for c in composites:
            for layer in layers:
                if (c.entity_index, layer) not in maps:
                    raise MissingMap(f"no map for composite {c.entity_index} at layer {layer}")
    if not maps:
        raise MissingMap("no attention maps supplied")
    total = None
    for m in maps.values():
        e = token_entropy(m if m.normalized else normalize(m))
        total = e if total is None else total + e
    return total


def semantic_binding_loss(z_t, t, surgery: SurgeryResult, supervision: Mapping[int, EmbeddingMatrix],
                          adapter, embeddings: Mapping[int, torch.Tensor] | None = None,
                          entities: Sequence[int] | None = None) -> torch.Tensor:
    """Sum over entities of ||eps(z, [c_k], t) - eps(z, S_k, t)||^2.

    The composite pass conditions on the single row ``c_k``; the supervision
    pass is gradient-free. ``embeddings`` overrides composite rows (used to
    thread trainable tensors through).
    """
    total = None
    pooled = surgery.matrix.pooled
    pooled = None if pooled is None else pooled.detach()
    for c in surgery.composites:
        if entities is not None and c.entity_index not in entities:
            continue
        row = embeddings[c.entity_index] if embeddings is not None else c.embedding
        pred = adapter.predict(z_t, t, row.reshape(1, -1), pooled)
        sup = supervision[c.entity_index]
        with torch.no_grad():
            target = adapter.predict(z_t, t, sup.rows, sup.pooled)
        if pred.shape != target.shape:
            raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs supervision {tuple(target.shape)}")
        term = ((pred - target.detach()) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=z_t.dtype)
    return total


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(l_ent, l_sem, config: OptimizerConfig):
    out = config.entropy_weight * l_ent + config.lambda_sem * l_sem
    if not math.isfinite(float(out.detach() if torch.is_tensor(out) else out)):
        raise NonFiniteLoss(f"loss is not finite (l_ent={_f(l_ent)}, l_sem={_f(l_sem)})")
    return out


def _probe_layers(adapter, config: OptimizerConfig) -> list[str]:
    return list(config.probed_layers) if config.probed_layers else list(adapter.default_probe_layers)


def compute_losses(state: BindingState, z_t, t, adapter, config: OptimizerConfig,
                   params: torch.Tensor, positions: Sequence[int], rng: random.Random | None = None):
    """Evaluate (l_ent, l_sem, total) with ``params`` written at ``positions``."""
    surgery = state.surgery
    base = surgery.matrix.rows.detach()
    idx = torch.as_tensor(list(positions), dtype=torch.long)
    rows = base.index_put((idx,), params)
    row_of = {p: i for i, p in enumerate(positions)}
    zero = torch.zeros((), dtype=rows.dtype)

    l_ent = zero
    if config.entropy_weight > 0:
        layers = _probe_layers(adapter, config)
        with adapter.probe.armed(layers, retain_grad=True, timestep=t):
            adapter.predict(z_t, t, rows, surgery.matrix.pooled)
        maps = adapter.probe.capture(layers, surgery.composite_positions)
        keyed = {}
        for m in maps:
            k = next(c.entity_index for c in surgery.composites if c.position == m.token_position)
            keyed[(k, m.layer_id)] = m
        l_ent = entropy_loss(keyed, surgery.composites, layers)

    l_sem = zero
    if config.lambda_sem > 0:
        entities = None
        ks = [c.entity_index for c in surgery.composites]
        if config.entity_subsample and config.entity_subsample < len(ks):
            entities = sorted((rng or random.Random(0)).sample(ks, config.entity_subsample))
        emb = {c.entity_index: params[row_of[c.position]] for c in surgery.composites}
        l_sem = semantic_binding_loss(z_t, t, surgery, state.supervision, adapter, emb, entities)
    return l_ent, l_sem, total_loss(l_ent, l_sem, config)


def trainable_positions(surgery: SurgeryResult, config: OptimizerConfig) -> list[int]:
    positions = list(surgery.composite_positions)
    if config.update_ets:
        positions += list(surgery.eot_positions)
    return positions


def update_step(state: BindingState, z_t, t, adapter, config: OptimizerConfig,
                step_index: int = 0, num_steps: int = 1, rng: random.Random | None = None) -> BindingState:
    """Gradient-descent update of the composite rows at one sampling step.

    Raises ``WindowClosed`` outside the first ``t_opt_fraction`` of steps and
    ``NonFiniteLoss`` (leaving ``state`` untouched) if a loss blows up.
    """
    if not in_window(step_index, num_steps, config.t_opt_fraction):
        raise WindowClosed(f"step {step_index} is outside the first "
                           f"{optimized_step_count(num_steps, config.t_opt_fraction)} of {num_steps}")
    z_t = z_t.detach()
    positions = trainable_positions(state.surgery, config)
    current = state
    record = None
    for _ in range(config.steps_per_timestep):
        params = current.surgery.matrix.rows[positions].detach().clone().requires_grad_(True)
        l_ent, l_sem, total = compute_losses(current, z_t, t, adapter, config, params, positions, rng)
        if record is None:
            record = LossRecord(step_index, float(t), _f(l_ent), _f(l_sem), _f(total))
        if config.step_size == 0:
            continue
        if total.requires_grad:
            (grad,) = torch.autograd.grad(total, params)
        else:
            grad = torch.zeros_like(params)
        if not torch.isfinite(grad).all():
            raise NonFiniteLoss("gradient is not finite")
        new = params.detach() - config.step_size * grad
        current = replace(current, surgery=write_rows(current.surgery, positions, new))
    return replace(current, loss_trace=state.loss_trace + (record,))


def calibrate_lambda(state: BindingState, z_t, t, adapter, config: OptimizerConfig) -> float:
    """Power of ten that puts lambda * L_sem within one order of magnitude of L_ent."""
    probe_cfg = replace(config, lambda_sem=1.0, entropy_weight=1.0)
    positions = trainable_positions(state.surgery, probe_cfg)
    params = state.surgery.matrix.rows[positions].detach().clone()
    with torch.no_grad():
        l_ent, l_sem, _ = compute_losses(state, z_t.detach(), t, adapter, probe_cfg, params, positions)
    l_ent, l_sem = float(l_ent), float(l_sem)
    if l_sem <= 0 or l_ent <= 0:
        return config.lambda_sem
    return 10.0 ** round(math.log10(l_ent / l_sem))
