"""A small deterministic denoiser for tests and CPU runs.

``StubDenoiser`` keeps the structure that matters to the binding losses:
several cross-attention layers at fixed spatial resolutions whose logits are
linear in the conditioning rows, a timestep input and a pooled-embedding
bias. Weights come from a seeded generator, so two instances built with the
same arguments are identical.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..attention import AttentionProbe
from ..embedding import EmbeddingMatrix
from ..encoders import TextEncoder


def default_layout(latent_size: int) -> list[tuple[str, int]]:
    half, quarter = max(latent_size // 2, 1), max(latent_size // 4, 1)
    return [
        ("down.0", half),
        ("mid", quarter),
        ("up.0", half),
        ("up.1", half),
        ("up.2", half),
        ("up.3", latent_size),
    ]


class StubDenoiser(nn.Module):
    def __init__(self, cond_dim: int = 32, pooled_dim: int | None = 16, channels: int = 4,
                 latent_size: int = 64, layout: list[tuple[str, int]] | None = None,
                 heads: int = 2, head_dim: int = 8, seed: int = 0, dtype: torch.dtype = torch.float32,
                 attention_scale: float = 0.2):
        super().__init__()
        self.channels = channels
        self.latent_size = latent_size
        self.layout = layout or default_layout(latent_size)
        self.heads = heads
        self.head_dim = head_dim
        self.attention_scale = attention_scale
        g = torch.Generator().manual_seed(seed)
        inner = heads * head_dim

        def param(*shape, scale=1.0):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=torch.float64).to(dtype) * scale,
                                requires_grad=False)

        self.to_q = nn.ParameterList([param(channels, inner, scale=1 / math.sqrt(channels)) for _ in self.layout])
        self.to_k = nn.ParameterList([param(cond_dim, inner, scale=1 / math.sqrt(cond_dim)) for _ in self.layout])
        self.to_v = nn.ParameterList([param(cond_dim, channels, scale=0.5 / math.sqrt(cond_dim)) for _ in self.layout])
        self.pos = nn.ParameterList([param(r * r, channels, scale=1.0) for _, r in self.layout])
        self.time_w = param(channels, scale=0.1)
        self.pooled_w = None if pooled_dim is None else param(pooled_dim, channels, scale=0.1 / math.sqrt(pooled_dim))
        self.out_w = param(channels, channels, scale=1 / math.sqrt(channels))
        self.probe: AttentionProbe | None = None

    def forward(self, latents, t, rows, pooled=None):
        x = latents
        if rows.ndim == 2:
            rows = rows[None]
        b = x.shape[0]
        t_val = float(t) / 1000.0
        x = x + (self.time_w * math.sin(math.pi * t_val))[None, :, None, None]
        if pooled is not None and self.pooled_w is not None:
            pooled = pooled.reshape(b, -1) if pooled.ndim > 1 else pooled[None].expand(b, -1)
            x = x + (pooled.to(x.dtype) @ self.pooled_w)[:, :, None, None]
        rows = rows.to(x.dtype)
        if rows.shape[0] != b:
            rows = rows.expand(b, -1, -1)
        for i, (name, r) in enumerate(self.layout):
            feat = F.adaptive_avg_pool2d(x, r).flatten(2).transpose(1, 2)  # (b, r*r, C)
            feat = feat + self.pos[i]
            q = (feat @ self.to_q[i]).view(b, r * r, self.heads, self.head_dim).transpose(1, 2)
            k = (rows @ self.to_k[i]).view(b, -1, self.heads, self.head_dim).transpose(1, 2)
            logits = self.attention_scale * (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
            probs = torch.softmax(logits, dim=-1)  # (b, heads, r*r, L)
            if self.probe is not None:
                self.probe.record(name, probs)
            v = rows @ self.to_v[i]  # (b, L, C)
            out = (probs.mean(1) @ v).transpose(1, 2).reshape(b, self.channels, r, r)
            x = x + F.interpolate(out, size=x.shape[-2:], mode="nearest")
        return torch.einsum("bchw,cd->bdhw", torch.tanh(x), self.out_w)


class DDIMScheduler:
    """Deterministic DDIM (eta = 0) over a linear beta schedule."""

    def __init__(self, train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.train_steps = train_steps
        betas = torch.linspace(beta_start, beta_end, train_steps, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1 - betas, dim=0)
        self._prev: dict[int, int] = {}

    def timesteps(self, num_steps: int) -> list[int]:
        stride = self.train_steps // num_steps
        ts = [self.train_steps - 1 - i * stride for i in range(num_steps)]
        self._prev = {t: (ts[i + 1] if i + 1 < len(ts) else -1) for i, t in enumerate(ts)}
        return ts

    def step(self, noise, t, latents):
        t = int(t)
        prev = self._prev.get(t, t - self.train_steps // max(len(self._prev), 1))
        a_t = self.alphas_cumprod[t].to(latents.dtype)
        a_prev = self.alphas_cumprod[prev].to(latents.dtype) if prev >= 0 else torch.tensor(1.0, dtype=latents.dtype)
        x0 = (latents - (1 - a_t).sqrt() * noise) / a_t.sqrt()
        return a_prev.sqrt() * x0 + (1 - a_prev).sqrt() * noise


class StubAdapter:
    """Denoiser adapter around :class:`StubDenoiser`."""

    name = "stub"

    def __init__(self, cond_dim: int = 32, pooled_dim: int | None = 16, latent_size: int = 64,
                 layout=None, seed: int = 0, dtype: torch.dtype = torch.float32, **kw):
        self.unet = StubDenoiser(cond_dim, pooled_dim, latent_size=latent_size, layout=layout,
                                 seed=seed, dtype=dtype, **kw)
        self.dtype = dtype
        self.scheduler = DDIMScheduler()
        self.probe = AttentionProbe(self.cross_attention_layers())
        self.unet.probe = self.probe
        names = [n for n, _ in self.unet.layout]
        ups = [n for n in names if n.startswith("up.")]
        self.default_probe_layers = ups[:3] if len(ups) >= 3 else names[:3]

    def cross_attention_layers(self):
        return {name: (r, r) for name, r in self.unet.layout}

    def predict(self, latents, t, rows, pooled=None):
        return self.unet(latents, t, rows, pooled)

    def timesteps(self, num_steps):
        return self.scheduler.timesteps(num_steps)

    def init_latents(self, seed):
        g = torch.Generator().manual_seed(seed)
        s = self.unet.latent_size
        return torch.randn(1, self.unet.channels, s, s, generator=g, dtype=torch.float64).to(self.dtype)

    def step(self, noise_pred, t, latents):
        return self.scheduler.step(noise_pred, t, latents)

    def decode(self, latents):
        x = latents[0, :3].detach().double()
        img = ((torch.tanh(x) + 1) * 127.5).round().clamp(0, 255).to(torch.uint8)
        img = img.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
        return img.permute(1, 2, 0).numpy()

    def unconditional(self, encoder: TextEncoder) -> EmbeddingMatrix:
        tok = encoder.tokenizer
        ids = [tok.sot_id, tok.eot_id] + [tok.pad_id] * (tok.max_length - 2)
        rows, pooled = encoder.encode_ids(ids, 1)
        return EmbeddingMatrix(rows, 1, pooled, "")

    @torch.no_grad()
    def native_generate(self, encoder: TextEncoder, prompt: str, seed: int, steps: int,
                        guidance_scale: float) -> np.ndarray:
        """The plain classifier-free-guidance sampler, with no binding machinery."""
        ids, eot = encoder.tokenizer.encode_padded(prompt)
        cond_rows, cond_pooled = encoder.encode_ids(ids, eot)
        uncond = self.unconditional(encoder)
        timesteps = self.timesteps(steps)
        latents = self.init_latents(seed)
        for t in timesteps:
            eps_u = self.unet(latents, t, uncond.rows, uncond.pooled)
            eps_c = self.unet(latents, t, cond_rows, cond_pooled)
            eps = eps_u + guidance_scale * (eps_c - eps_u)
            latents = self.scheduler.step(eps, t, latents)
        return self.decode(latents)


class MeanStubAdapter:
    """Noise prediction = mean of all conditioning entries, broadcast over the latent.

    Used as a closed-form oracle for the semantic binding loss.
    """

    name = "mean-stub"
    default_probe_layers: list[str] = []

    def __init__(self):
        self.probe = AttentionProbe({})

    def cross_attention_layers(self):
        return {}

    def predict(self, latents, t, rows, pooled=None):
        return torch.zeros_like(latents) + rows.mean()
