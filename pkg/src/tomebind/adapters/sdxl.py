"""Adapter binding a diffusers Stable Diffusion XL pipeline."""

from __future__ import annotations

import os

import numpy as np
import torch

from ..attention import AttentionProbe
from ..embedding import EmbeddingMatrix
from ..encoders import CACHE_ENV, ClipTextEncoder, DualTextEncoder
from ..errors import AdapterFailure, ModelLoadFailure
from ..tokenizer import ClipTokenizer


class ProbeAttnProcessor:
    """Cross-attention processor that materializes softmax weights for the probe.

    Numerically this is diffusers' classic ``AttnProcessor``; the weights are
    only read, never altered.
    """

    def __init__(self, name: str, probe: AttentionProbe):
        self.name = name
        self.probe = probe

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kw):
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        batch, seq, _ = hidden_states.shape if encoder_hidden_states is None else encoder_hidden_states.shape
        attention_mask = attn.prepare_attention_mask(attention_mask, seq, batch)
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        query = attn.to_q(hidden_states)
        if encoder_hidden_states is None:
            encoder_hidden_states = hidden_states
        elif attn.norm_cross:
            encoder_hidden_states = attn.norm_encoder_hidden_states(encoder_hidden_states)
        key = attn.head_to_batch_dim(attn.to_k(encoder_hidden_states))
        value = attn.head_to_batch_dim(attn.to_v(encoder_hidden_states))
        query = attn.head_to_batch_dim(query)
        probs = attn.get_attention_scores(query, key, attention_mask)
        if self.probe.wants(self.name):
            heads = attn.heads
            self.probe.record(self.name, probs.view(-1, heads, *probs.shape[1:]))
        hidden_states = attn.batch_to_head_dim(torch.bmm(probs, value))
        hidden_states = attn.to_out[1](attn.to_out[0](hidden_states))
        if input_ndim == 4:
            hidden_states = hidden_states.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states / attn.rescale_output_factor


def _block_factor(name: str, n_blocks: int) -> int:
    parts = name.split(".")
    if parts[0] == "mid_block":
        return 2 ** (n_blocks - 1)
    idx = int(parts[1])
    if parts[0] == "down_blocks":
        return 2 ** idx
    return 2 ** (n_blocks - 1 - idx)


def _max_length(tokenizer) -> int:
    n = getattr(tokenizer, "model_max_length", 77)
    return n if n <= 1024 else 77


class SDXLAdapter:
    """Wraps ``StableDiffusionXLPipeline`` components behind the adapter contract.

    Every ``attn2`` module gets a :class:`ProbeAttnProcessor`. The default probe
    layers are the first three cross-attention layers of the decoder.
    """

    name = "sdxl"

    def __init__(self, pipe, height: int = 1024, width: int = 1024, device: str | None = None):
        self.pipe = pipe
        self.unet = pipe.unet
        self.vae = pipe.vae
        self.scheduler = pipe.scheduler
        self.height, self.width = height, width
        self.device = torch.device(device) if device else self.unet.device
        self.dtype = self.unet.dtype
        scale = getattr(pipe, "vae_scale_factor", 8)
        self.latent_hw = (height // scale, width // scale)
        n_blocks = len(self.unet.config.block_out_channels)

        layers = {}
        procs = {}
        for key in self.unet.attn_processors:
            layer = key[: -len(".processor")]
            if layer.endswith("attn2"):
                f = _block_factor(layer, n_blocks)
                layers[layer] = (self.latent_hw[0] // f, self.latent_hw[1] // f)
        self.probe = AttentionProbe(layers)
        for key, proc in self.unet.attn_processors.items():
            layer = key[: -len(".processor")]
            procs[key] = ProbeAttnProcessor(layer, self.probe) if layer in layers else proc
        self.unet.set_attn_processor(procs)
        self.default_probe_layers = [l for l in layers if l.startswith("up_blocks")][:3]

        proj_dim = pipe.text_encoder_2.config.projection_dim if pipe.text_encoder_2 is not None else 1280
        self.add_time_ids = torch.tensor(
            [[height, width, 0, 0, height, width]], dtype=self.dtype, device=self.device
        )
        self._proj_dim = proj_dim

    @classmethod
    def from_pretrained(cls, model_ref: str, device: str | None = None, torch_dtype=None,
                        height: int = 1024, width: int = 1024, cache_dir: str | None = None):
        try:
            from diffusers import StableDiffusionXLPipeline
        except ImportError as exc:
            raise ModelLoadFailure("install tomebind[sdxl] for the SDXL adapter") from exc
        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        torch_dtype = torch_dtype or (torch.float16 if device.startswith("cuda") else torch.float32)
        try:
            pipe = StableDiffusionXLPipeline.from_pretrained(
                model_ref, torch_dtype=torch_dtype, cache_dir=cache_dir or os.environ.get(CACHE_ENV)
            ).to(device)
        except Exception as exc:
            raise ModelLoadFailure(f"could not load {model_ref!r}: {exc}") from exc
        return cls(pipe, height, width, device)

    def text_encoder(self) -> DualTextEncoder:
        p = self.pipe
        tok1 = ClipTokenizer(_max_length(p.tokenizer), pad_id=p.tokenizer.pad_token_id)
        tok2 = ClipTokenizer(_max_length(p.tokenizer_2), pad_id=p.tokenizer_2.pad_token_id)
        first = ClipTextEncoder(p.text_encoder, tok1, hidden_layer=-2, name="text_encoder")
        second = ClipTextEncoder(p.text_encoder_2, tok2, hidden_layer=-2, name="text_encoder_2")
        return DualTextEncoder(first, second)

    def cross_attention_layers(self):
        return dict(self.probe.layers)

    def predict(self, latents, t, rows, pooled=None):
        try:
            x = self.scheduler.scale_model_input(latents.to(self.device, self.dtype), t)
            cond = rows[None] if rows.ndim == 2 else rows
            if pooled is None:
                pooled = torch.zeros(self._proj_dim)
            pooled = pooled.reshape(1, -1)
            out = self.unet(
                x,
                t,
                encoder_hidden_states=cond.to(self.device, self.dtype),
                added_cond_kwargs={"text_embeds": pooled.to(self.device, self.dtype), "time_ids": self.add_time_ids},
                return_dict=False,
            )[0]
        except Exception as exc:
            raise AdapterFailure(f"UNet forward failed: {exc}") from exc
        return out.float()

    def timesteps(self, num_steps):
        self.scheduler.set_timesteps(num_steps, device=self.device)
        if hasattr(self.scheduler, "set_begin_index"):
            self.scheduler.set_begin_index(0)
        return list(self.scheduler.timesteps)

    def init_latents(self, seed):
        g = torch.Generator(device="cpu").manual_seed(seed)
        shape = (1, self.unet.config.in_channels, *self.latent_hw)
        z = torch.randn(shape, generator=g, dtype=torch.float32)
        return z.to(self.device) * self.scheduler.init_noise_sigma

    def step(self, noise_pred, t, latents):
        return self.scheduler.step(noise_pred, t, latents, return_dict=False)[0]

    @torch.no_grad()
    def decode(self, latents):
        vae = self.vae
        z = latents.to(self.device, vae.dtype) / vae.config.scaling_factor
        img = vae.decode(z, return_dict=False)[0]
        img = ((img[0].float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
        return img.permute(1, 2, 0).cpu().numpy()

    def unconditional(self, encoder) -> EmbeddingMatrix:
        tok = encoder.tokenizer
        if getattr(self.pipe.config, "force_zeros_for_empty_prompt", False):
            ids = [tok.sot_id, tok.eot_id] + [tok.pad_id] * (tok.max_length - 2)
            rows, pooled = encoder.encode_ids(ids, 1)
            return EmbeddingMatrix(torch.zeros_like(rows), 1, torch.zeros_like(pooled), "")
        ids = [tok.sot_id, tok.eot_id] + [tok.pad_id] * (tok.max_length - 2)
        rows, pooled = encoder.encode_ids(ids, 1)
        return EmbeddingMatrix(rows, 1, pooled, "")

    @torch.no_grad()
    def native_generate(self, encoder, prompt: str, seed: int, steps: int, guidance_scale: float) -> np.ndarray:
        """Run the stock diffusers sampler on identically encoded inputs."""
        ids, eot = encoder.tokenizer.encode_padded(prompt)
        rows, pooled = encoder.encode_ids(ids, eot)
        uncond = self.unconditional(encoder)
        self.timesteps(steps)
        # the pipeline applies init_noise_sigma itself
        latents = self.init_latents(seed) / self.scheduler.init_noise_sigma
        out = self.pipe(
            prompt_embeds=rows[None].to(self.device, self.dtype),
            pooled_prompt_embeds=pooled[None].to(self.device, self.dtype),
            negative_prompt_embeds=uncond.rows[None].to(self.device, self.dtype),
            negative_pooled_prompt_embeds=uncond.pooled[None].to(self.device, self.dtype),
            latents=latents.to(self.dtype),
            num_inference_steps=steps,
            guidance_scale=guidance_scale,
            height=self.height,
            width=self.width,
            output_type="np",
        )
        return (out.images[0] * 255).round().astype(np.uint8)
