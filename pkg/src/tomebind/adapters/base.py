from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np
import torch

from ..attention import AttentionProbe
from ..embedding import EmbeddingMatrix
from ..encoders import TextEncoder


class DenoiserAdapter(Protocol):
    """What the pipeline needs from a latent-diffusion backend.

    ``predict`` runs one conditional noise prediction for a single sample;
    the pipeline combines conditional and unconditional predictions itself.
    Cross-attention layers report post-softmax weights to ``probe``.
    """

    probe: AttentionProbe
    default_probe_layers: Sequence[str]
    name: str

    def cross_attention_layers(self) -> dict[str, tuple[int, int]]: ...

    def predict(self, latents: torch.Tensor, t, rows: torch.Tensor, pooled: torch.Tensor | None) -> torch.Tensor: ...

    def timesteps(self, num_steps: int) -> list: ...

    def init_latents(self, seed: int) -> torch.Tensor: ...

    def step(self, noise_pred: torch.Tensor, t, latents: torch.Tensor) -> torch.Tensor: ...

    def decode(self, latents: torch.Tensor) -> np.ndarray: ...

    def unconditional(self, encoder: TextEncoder) -> EmbeddingMatrix: ...
