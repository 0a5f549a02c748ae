"""Cross-attention capture and entropy statistics."""

from __future__ import annotations

import math
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import torch

from .errors import CaptureNotArmed, DegenerateMap, EmptyAggregate, NotNormalized, UnknownLayer

EPS = 1e-12


@dataclass(frozen=True, eq=False)
class AttentionMap:
    values: torch.Tensor  # (H, W)
    layer_id: str
    token_position: int
    timestep: float | int | None = None
    head_averaged: bool = True
    normalized: bool = False
    head: int | None = None

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.values.shape)


@dataclass
class EntropyReport:
    by_position: dict[int, float]
    by_layer: dict[str, dict[int, float]]
    counts: dict[int, int]
    timesteps: list = field(default_factory=list)
    max_entropy: float = 0.0

    def to_dict(self) -> dict:
        return {
            "by_position": {str(k): v for k, v in self.by_position.items()},
            "by_layer": {l: {str(k): v for k, v in d.items()} for l, d in self.by_layer.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "timesteps": [float(t) for t in self.timesteps],
            "max_entropy": self.max_entropy,
        }


class AttentionProbe:
    """Collects post-softmax cross-attention weights from named layers.

    Denoiser adapters call :meth:`record` from their attention hooks; nothing
    recorded is ever written back into the forward pass. One armed capture per
    denoiser at a time.
    """

    def __init__(self, layers: Mapping[str, tuple[int, int]]):
        self.layers = dict(layers)
        self._armed: set[str] | None = None
        self._retain_grad = False
        self._records: dict[str, torch.Tensor] = {}
        self._timestep = None

    @property
    def is_armed(self) -> bool:
        return self._armed is not None

    def wants(self, layer_id: str) -> bool:
        return self._armed is not None and layer_id in self._armed

    def _check(self, layer_ids: Iterable[str]):
        unknown = [l for l in layer_ids if l not in self.layers]
        if unknown:
            raise UnknownLayer(f"unknown cross-attention layers: {unknown}")

    def arm(self, layer_ids: Sequence[str], retain_grad: bool = False, timestep=None):
        self._check(layer_ids)
        self._armed = set(layer_ids)
        self._retain_grad = retain_grad
        self._records = {}
        self._timestep = timestep

    def disarm(self):
        self._armed = None

    @contextmanager
    def armed(self, layer_ids: Sequence[str], retain_grad: bool = False, timestep=None):
        self.arm(layer_ids, retain_grad, timestep)
        try:
            yield self
        finally:
            self.disarm()

    def record(self, layer_id: str, probs: torch.Tensor):
        """``probs``: (batch, heads, H*W, L) post-softmax weights."""
        if not self.wants(layer_id):
            return
        self._records[layer_id] = probs if self._retain_grad else probs.detach()

    def capture(
        self,
        layer_ids: Sequence[str],
        token_positions: Sequence[int],
        batch_index: int = -1,
        per_head: bool = False,
    ) -> list[AttentionMap]:
        """Head-averaged maps for every requested (layer, token) pair."""
        self._check(layer_ids)
        if not token_positions:
            return []
        if not self._records:
            raise CaptureNotArmed("no forward pass was captured; arm the probe first")
        out = []
        for layer in layer_ids:
            if layer not in self._records:
                raise CaptureNotArmed(f"layer {layer!r} was not armed during the last pass")
            h, w = self.layers[layer]
            probs = self._records[layer][batch_index]  # (heads, HW, L)
            if per_head:
                for head in range(probs.shape[0]):
                    for pos in token_positions:
                        out.append(AttentionMap(probs[head, :, pos].reshape(h, w), layer, pos,
                                                self._timestep, head_averaged=False, head=head))
                continue
            mean = probs.mean(dim=0)
            for pos in token_positions:
                out.append(AttentionMap(mean[:, pos].reshape(h, w), layer, pos, self._timestep))
        return out


def capture(probe: AttentionProbe, layer_ids: Sequence[str], token_positions: Sequence[int]) -> list[AttentionMap]:
    return probe.capture(layer_ids, token_positions)


def normalize(amap: AttentionMap) -> AttentionMap:
    v = amap.values
    if (v < 0).any():
        raise DegenerateMap("attention map has negative entries")
    total = v.sum()
    if float(total.detach()) <= EPS:
        raise DegenerateMap(f"attention map sums to {float(total.detach()):.3g}")
    return replace(amap, values=v / total, normalized=True)


def token_entropy(amap: AttentionMap) -> torch.Tensor:
    """Shannon entropy in nats, ``-sum p log(p + eps)``."""
    if not amap.normalized:
        raise NotNormalized("normalize the map before taking its entropy")
    p = amap.values
    return -(p * torch.log(p + EPS)).sum()


def entropy_gradient(values: torch.Tensor) -> torch.Tensor:
    """Closed-form d entropy(normalize(a)) / d a for a nonnegative map ``a``."""
    s = values.sum()
    p = values / s
    dp = -(torch.log(p + EPS) + p / (p + EPS))
    return (dp - (p * dp).sum()) / s


def entropy_logit_gradient(logits: torch.Tensor, token: int) -> torch.Tensor:
    """Closed-form gradient of a token's map entropy w.r.t. pre-softmax logits.

    ``logits`` has shape (H*W, L); the softmax runs over the token axis and the
    map for ``token`` is column ``token`` of the result.
    """
    s = torch.softmax(logits, dim=-1)
    a = s[:, token]
    g = entropy_gradient(a)
    onehot = torch.zeros_like(s)
    onehot[:, token] = 1.0
    return (g * a)[:, None] * (onehot - s)


def entropy_by_position(maps: Sequence[AttentionMap], average: str = "maps") -> EntropyReport:
    """Entropy per token position over maps gathered across timesteps/heads/layers.

    ``average="maps"`` averages the raw maps per position and takes one entropy
    of the normalized mean; ``average="entropy"`` averages per-map entropies.
    """
    if not maps:
        raise EmptyAggregate("no maps to aggregate")
    groups: dict[int, list[AttentionMap]] = defaultdict(list)
    layer_groups: dict[tuple[str, int], list[AttentionMap]] = defaultdict(list)
    timesteps = []
    for m in maps:
        groups[m.token_position].append(m)
        layer_groups[(m.layer_id, m.token_position)].append(m)
        if m.timestep is not None and m.timestep not in timesteps:
            timesteps.append(m.timestep)

    def reduce(ms: list[AttentionMap]) -> float:
        if average == "entropy":
            return float(sum(token_entropy(normalize(m)) for m in ms) / len(ms))
        with torch.no_grad():
            mean = torch.stack([m.values.detach().double() for m in ms]).mean(0)
        return float(token_entropy(normalize(replace(ms[0], values=mean))))

    by_position = {pos: reduce(ms) for pos, ms in sorted(groups.items())}
    by_layer: dict[str, dict[int, float]] = defaultdict(dict)
    for (layer, pos), ms in sorted(layer_groups.items()):
        by_layer[layer][pos] = reduce(ms)
    h, w = maps[0].resolution
    return EntropyReport(by_position, dict(by_layer), {p: len(ms) for p, ms in groups.items()},
                         timesteps, math.log(h * w))
