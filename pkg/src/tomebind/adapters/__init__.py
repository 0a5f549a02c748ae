from __future__ import annotations

from .base import DenoiserAdapter
from .stub import DDIMScheduler, MeanStubAdapter, StubAdapter, StubDenoiser


def load_backend(model_ref: str, device: str | None = None, **kw):
    """Resolve ``model_ref`` to an (adapter, text encoder) pair.

    ``"stub"`` (optionally ``"stub:<seed>"``) gives the deterministic CPU stub;
    anything else is treated as a diffusers SDXL checkpoint id or path.
    """
    from ..encoders import StubTextEncoder

    if model_ref == "stub" or model_ref.startswith("stub:"):
        seed = int(model_ref.split(":", 1)[1]) if ":" in model_ref else 0
        encoder = StubTextEncoder(seed=seed)
        return StubAdapter(cond_dim=encoder.dim, seed=seed, **kw), encoder
    from .sdxl import SDXLAdapter

    adapter = SDXLAdapter.from_pretrained(model_ref, device=device, **kw)
    return adapter, adapter.text_encoder()


__all__ = ["DDIMScheduler", "DenoiserAdapter", "MeanStubAdapter", "StubAdapter", "StubDenoiser", "load_backend"]
