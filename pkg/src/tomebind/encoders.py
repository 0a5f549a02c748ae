"""Text-encoder adapters.

An encoder turns a padded id sequence into an ``(M, D)`` conditioning matrix
and an optional pooled vector. ``StubTextEncoder`` is a deterministic causal
toy used for tests and CPU smoke runs; ``ClipTextEncoder`` wraps a pretrained
CLIP text transformer through ``transformers``.
"""

from __future__ import annotations

import os
from typing import Protocol

import numpy as np
import torch

from .errors import ModelLoadFailure
from .tokenizer import ClipTokenizer

CACHE_ENV = "TOMEBIND_CACHE_DIR"


class TextEncoder(Protocol):
    tokenizer: ClipTokenizer
    name: str

    def encode_ids(self, ids: list[int], eot_start: int) -> tuple[torch.Tensor, torch.Tensor | None]: ...


class StubTextEncoder:
    """Deterministic causal text encoder with CLIP-like structure.

    Each output row mixes its own token/position embedding with the running mean
    of all earlier rows, so end-token rows summarize the whole prompt while
    content rows only see their prefix.
    """

    name = "stub"

    def __init__(self, dim: int = 32, pooled_dim: int | None = 16, seed: int = 0,
                 dtype: torch.dtype = torch.float32, max_length: int = 77):
        self.dim = dim
        self.seed = seed
        self.dtype = dtype
        self.tokenizer = ClipTokenizer(max_length)
        rng = np.random.default_rng(seed)
        self._pos = rng.standard_normal((max_length, dim)) * 0.1
        self._mix = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self._proj = None if pooled_dim is None else rng.standard_normal((dim, pooled_dim)) / np.sqrt(dim)
        self._cache: dict[int, np.ndarray] = {}

    def _token(self, token_id: int) -> np.ndarray:
        vec = self._cache.get(token_id)
        if vec is None:
            vec = np.random.default_rng([self.seed, token_id]).standard_normal(self.dim)
            self._cache[token_id] = vec
        return vec

    def encode_ids(self, ids, eot_start):
        h = np.stack([self._token(i) for i in ids]) + self._pos[: len(ids)]
        prefix = np.cumsum(h, axis=0) / np.arange(1, len(ids) + 1)[:, None]
        out = h + np.tanh(prefix @ self._mix)
        rows = torch.as_tensor(out, dtype=self.dtype)
        pooled = None
        if self._proj is not None:
            pooled = torch.as_tensor(out[eot_start] @ self._proj, dtype=self.dtype)
        return rows, pooled


class ClipTextEncoder:
    """A pretrained CLIP text transformer.

    ``hidden_layer=-1`` returns the final hidden states (SD 1.x convention);
    ``-2`` returns the penultimate layer as SDXL does.
    """

    def __init__(self, model, tokenizer: ClipTokenizer, hidden_layer: int = -1, name: str = "clip"):
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.hidden_layer = hidden_layer
        self.name = name

    @classmethod
    def from_pretrained(cls, ref: str, subfolder: str | None = None, hidden_layer: int = -1,
                        with_projection: bool = False, cache_dir: str | None = None,
                        torch_dtype=torch.float32):
        try:
            from transformers import CLIPTextModel, CLIPTextModelWithProjection, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover
            raise ModelLoadFailure("transformers is required for pretrained encoders") from exc
        cache_dir = cache_dir or os.environ.get(CACHE_ENV)
        kw = {"cache_dir": cache_dir}
        if subfolder:
            kw["subfolder"] = subfolder
        try:
            model_cls = CLIPTextModelWithProjection if with_projection else CLIPTextModel
            model = model_cls.from_pretrained(ref, torch_dtype=torch_dtype, **kw)
            tok_kw = dict(kw)
            if subfolder:
                tok_kw["subfolder"] = subfolder.replace("text_encoder", "tokenizer")
            hf_tok = CLIPTokenizer.from_pretrained(ref, **tok_kw)
        except Exception as exc:
            raise ModelLoadFailure(f"could not load text encoder {ref!r}: {exc}") from exc
        tok = ClipTokenizer(hf_tok.model_max_length, pad_id=hf_tok.pad_token_id)
        return cls(model, tok, hidden_layer, name=f"{ref}:{subfolder or ''}")

    @torch.no_grad()
    def encode_ids(self, ids, eot_start):
        device = next(self.model.parameters()).device
        out = self.model(torch.tensor([ids], device=device), output_hidden_states=True)
        rows = out.hidden_states[self.hidden_layer][0] if self.hidden_layer != -1 else out.last_hidden_state[0]
        pooled = getattr(out, "text_embeds", None)
        if pooled is None:
            pooled = out.pooler_output
        return rows.float().cpu(), pooled[0].float().cpu()


class DualTextEncoder:
    """Two encoders whose outputs are concatenated along the feature axis.

    Token positions align across the streams, so row-wise surgery on the
    concatenated matrix equals per-stream surgery followed by concatenation.
    The pooled vector comes from the second encoder.
    """

    def __init__(self, first: TextEncoder, second: TextEncoder):
        self.first = first
        self.second = second
        self.tokenizer = first.tokenizer
        self.name = f"{first.name}+{second.name}"

    def encode_ids(self, ids, eot_start):
        rows1, _ = self.first.encode_ids(ids, eot_start)
        pad2 = self.second.tokenizer.pad_id
        ids2 = list(ids[: eot_start + 1]) + [pad2] * (len(ids) - eot_start - 1)
        rows2, pooled = self.second.encode_ids(ids2, eot_start)
        return torch.cat([rows1, rows2], dim=-1), pooled
