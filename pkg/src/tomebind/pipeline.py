"""End-to-end generation: parse, encode, surgery, sampling with the update window, decode."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import uuid
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import yaml

from .adapters import load_backend
from .attention import AttentionMap
from .embedding import EmbeddingMatrix, SurgeryResult, apply_surgery, encode, identity_surgery, substitute_end_tokens
from .errors import DegenerateMap, DiskWriteFailure, EmptyInput, NonFiniteLoss
from .optimizer import (
    BindingState,
    OptimizerConfig,
    calibrate_lambda,
    in_window,
    init_state,
    optimized_step_count,
    update_step,
)
from .parsing import parse_prompt
from .parsing.types import ParsedPrompt

log = logging.getLogger(__name__)

PHASES = ("load", "parse", "encode", "optimize", "sample", "decode", "total")


@dataclass
class GenerationConfig:
    prompt: str = ""
    seed: int = 0
    sampling_steps: int = 50
    guidance_scale: float = 7.5
    enable_tome: bool = True
    enable_ets: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output_dir: str | None = "runs"
    dump_attention: bool = False
    dump_every: int = 1
    model_ref: str = "stub"
    device: str | None = None
    calibrate_lambda: bool = False
    label: str = "custom"

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.sampling_steps < 1:
            raise ValueError("sampling_steps must be >= 1")
        if self.dump_every < 1:
            raise ValueError("dump_every must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "GenerationConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def save(self, path: str | Path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @property
    def optimizing(self) -> bool:
        return self.optimizer.enabled


# Ablation presets; "ours" is the full method.
ABLATIONS: dict[str, dict[str, Any]] = {
    "A": dict(enable_tome=False, enable_ets=False, optimizer=dict(enabled=False)),
    "B": dict(enable_tome=True, enable_ets=True, optimizer=dict(enabled=False)),
    "C": dict(enable_tome=True, enable_ets=True, optimizer=dict(lambda_sem=0.0)),
    "D": dict(enable_tome=False, enable_ets=False, optimizer=dict()),
    "E": dict(enable_tome=False, enable_ets=False, optimizer=dict(lambda_sem=0.0)),
    "F": dict(enable_tome=True, enable_ets=True, optimizer=dict(entropy_weight=0.0)),
    "ours": dict(enable_tome=True, enable_ets=True, optimizer=dict()),
}


def ablation(name: str, **overrides) -> GenerationConfig:
    """Config for an ablation row ("A".."F" or "ours"), with extra fields layered on top."""
    key = name if name in ABLATIONS else name.upper()
    if key not in ABLATIONS:
        raise KeyError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    preset = dict(ABLATIONS[key])
    opt = dict(preset.pop("optimizer"))
    base_opt = overrides.pop("optimizer", None) or {}
    if isinstance(base_opt, OptimizerConfig):
        base_opt = base_opt.to_dict()
    opt = {**base_opt, **opt}
    return GenerationConfig(**{**overrides, **preset, "optimizer": OptimizerConfig(**opt), "label": key})


@dataclass
class RunRecord:
    run_id: str
    config: dict
    image_paths: list[str]
    image_sha256: str
    loss_trace: list[dict]
    attention_manifest: str | None
    timings: dict[str, float]
    parsed: dict | None = None
    optimized_steps: int = 0
    optimization_aborted: bool = False
    created_at: str = ""
    image: np.ndarray | None = field(default=None, repr=False, compare=False)
    attention: list[dict] = field(default_factory=list, repr=False, compare=False)
    maps: list[AttentionMap] = field(default_factory=list, repr=False, compare=False)

    _transient = ("image", "attention", "maps")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in self._transient}
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(**data)

    def save(self, path: str | Path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def resolved_config(self) -> GenerationConfig:
        return GenerationConfig.from_dict(self.config)

    def content_hash(self) -> str:
        """Digest of everything determined by the inputs: config, trace, pixels.

        Run id, timestamps, timings and output paths are left out.
        """
        cfg = dict(self.config)
        cfg.pop("output_dir", None)
        payload = {
            "config": cfg,
            "image": self.image_sha256,
            "loss_trace": self.loss_trace,
            "parsed": self.parsed,
            "optimized_steps": self.optimized_steps,
            "aborted": self.optimization_aborted,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _image_digest(image: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(image.shape).encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()


def _run_dir(config: GenerationConfig) -> Path | None:
    if config.output_dir is None:
        return None
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    path = Path(config.output_dir) / f"{stamp}-s{config.seed}-{uuid.uuid4().hex[:8]}"
    try:
        path.mkdir(parents=True, exist_ok=False)
    except OSError as exc:
        raise DiskWriteFailure(f"cannot create run directory {path}: {exc}") from exc
    return path


def _position_labels(matrix: EmbeddingMatrix, parsed: ParsedPrompt | None, surgery: SurgeryResult | None,
                     tokenizer) -> dict[int, str]:
    labels = {0: "<sot>"}
    for p in range(matrix.eot_start, matrix.M):
        labels[p] = "<eot>"
    if parsed is None:
        ids, _ = tokenizer.encode_padded(matrix.source_prompt)
        for p in matrix.content_range:
            labels[p] = tokenizer.decode_token(ids[p]) if p < len(ids) else f"#{p}"
        return labels
    toks = tokenizer.tokenize(tokenizer.normalize(parsed.prompt))
    index_map = surgery.index_map if surgery is not None else {p: p for p in range(matrix.M)}
    for orig, new in index_map.items():
        if new is not None and 1 <= orig <= len(toks) and new < matrix.eot_start:
            labels[new] = tokenizer.decode_token(toks[orig - 1].id)
    if surgery is not None and surgery.merged:
        for c in surgery.composites:
            labels[c.position] = "+".join(s.text for s in c.source_spans)
    return labels


def _save_map(path: Path, amap: AttentionMap) -> float:
    from PIL import Image

    v = amap.values.detach().double().cpu().numpy()
    peak = float(v.max()) if v.size else 0.0
    scaled = np.zeros_like(v) if peak <= 0 else v / peak
    Image.fromarray((scaled * 65535).round().astype(np.uint16)).save(path)
    return peak


class _Dumper:
    """Writes captured maps as 16-bit grayscale PNGs plus a manifest."""

    def __init__(self, run_dir: Path | None, labels: dict[int, str]):
        self.dir = None if run_dir is None else run_dir / "attention"
        if self.dir is not None:
            self.dir.mkdir(exist_ok=True)
        self.labels = labels
        self.entries: list[dict] = []
        self.maps: list[AttentionMap] = []

    def add(self, step: int, maps: Sequence[AttentionMap]):
        for m in maps:
            self.maps.append(m)
            entry = {
                "step": step,
                "timestep": float(m.timestep) if m.timestep is not None else None,
                "layer": m.layer_id,
                "position": m.token_position,
                "token": self.labels.get(m.token_position, f"#{m.token_position}"),
                "resolution": list(m.resolution),
            }
            if self.dir is not None:
                name = f"s{step:03d}_{m.layer_id.replace('/', '_')}_p{m.token_position:02d}.png"
                entry["peak"] = _save_map(self.dir / name, m)
                entry["file"] = f"attention/{name}"
            self.entries.append(entry)

    def write_manifest(self) -> str | None:
        if self.dir is None:
            return None
        path = self.dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.entries, fh, indent=2, sort_keys=True)
        return str(path)


def _sample(adapter, config: GenerationConfig, cond: EmbeddingMatrix, uncond: EmbeddingMatrix,
            state: BindingState | None, dumper: _Dumper | None, timings: dict):
    """Sampling loop shared by ``generate`` and ``generate_from_conditioning``."""
    T = config.sampling_steps
    ocfg = config.optimizer
    timesteps = adapter.timesteps(T)
    latents = adapter.init_latents(config.seed)
    aborted = False
    dump_layers = None
    if dumper is not None:
        dump_layers = list(ocfg.probed_layers or adapter.default_probe_layers)
    for i, t in enumerate(timesteps):
        if state is not None and state.active and in_window(i, T, ocfg.t_opt_fraction):
            t0 = time.perf_counter()
            try:
                state = update_step(state, latents, t, adapter, ocfg, i, T)
            except (NonFiniteLoss, DegenerateMap) as exc:
                warnings.warn(f"binding optimisation stopped at step {i}: {exc}", RuntimeWarning, stacklevel=3)
                state = replace(state, active=False)
                aborted = True
            timings["optimize"] += time.perf_counter() - t0
            cond = state.surgery.matrix
        t0 = time.perf_counter()
        with torch.no_grad():
            eps_u = adapter.predict(latents, t, uncond.rows, uncond.pooled)
            if dumper is not None and i % config.dump_every == 0:
                with adapter.probe.armed(dump_layers, timestep=t):
                    eps_c = adapter.predict(latents, t, cond.rows, cond.pooled)
                dumper.add(i, adapter.probe.capture(dump_layers, list(range(cond.eot_start + 1))))
            else:
                eps_c = adapter.predict(latents, t, cond.rows, cond.pooled)
            eps = eps_u + config.guidance_scale * (eps_c - eps_u)
            latents = adapter.step(eps, t, latents)
        timings["sample"] += time.perf_counter() - t0
    return latents, state, aborted


def _finish(config, adapter, latents, state, aborted, parsed, dumper, run_dir, timings, t_start) -> RunRecord:
    t0 = time.perf_counter()
    image = adapter.decode(latents)
    timings["decode"] = time.perf_counter() - t0
    paths = []
    manifest = None
    run_id = run_dir.name if run_dir is not None else uuid.uuid4().hex[:8]
    if run_dir is not None:
        from PIL import Image

        try:
            img_path = run_dir / "image.png"
            Image.fromarray(image).save(img_path)
            paths.append(str(img_path))
            manifest = dumper.write_manifest() if dumper is not None else None
        except OSError as exc:
            raise DiskWriteFailure(f"cannot write run artifacts to {run_dir}: {exc}") from exc
    timings["total"] = time.perf_counter() - t_start
    trace = [dataclasses.asdict(r) for r in state.loss_trace] if state is not None else []
    record = RunRecord(
        run_id=run_id,
        config=config.to_dict(),
        image_paths=paths,
        image_sha256=_image_digest(image),
        loss_trace=trace,
        attention_manifest=manifest,
        timings={k: timings[k] for k in PHASES},
        parsed=parsed.to_dict() if parsed is not None else None,
        optimized_steps=len(trace),
        optimization_aborted=aborted,
        created_at=datetime.now(timezone.utc).isoformat(),
        image=image,
        attention=dumper.entries if dumper is not None else [],
        maps=dumper.maps if dumper is not None else [],
    )
    if run_dir is not None:
        try:
            record.save(run_dir / "record.json")
        except OSError as exc:
            raise DiskWriteFailure(f"cannot write run record: {exc}") from exc
    return record


def _timings() -> dict[str, float]:
    return {k: 0.0 for k in PHASES}


def prepare_conditioning(config: GenerationConfig, encoder, parsed: ParsedPrompt | None):
    """Encode the prompt and apply whatever surgery the config asks for."""
    matrix = encode(config.prompt, encoder)
    if parsed is None:
        return matrix, None
    if config.enable_tome:
        surgery = apply_surgery(matrix, parsed, ets=config.enable_ets, encoder=encoder)
    else:
        surgery = identity_surgery(matrix, parsed)
        if config.enable_ets:
            surgery = substitute_end_tokens(surgery, parsed, encoder)
    return surgery.matrix, surgery


def generate(config: GenerationConfig, backend=None, parse_provider=None) -> RunRecord:
    """Run one generation. ``backend`` is an (adapter, encoder) pair; loaded from
    ``config.model_ref`` when omitted."""
    t_start = time.perf_counter()
    timings = _timings()
    t0 = time.perf_counter()
    adapter, encoder = backend if backend is not None else load_backend(config.model_ref, config.device)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    needs_parse = config.enable_tome or config.enable_ets or config.optimizing
    parsed = parse_prompt(config.prompt, parse_provider, encoder.tokenizer) if needs_parse else None
    timings["parse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cond, surgery = prepare_conditioning(config, encoder, parsed)
    uncond = adapter.unconditional(encoder)
    state = None
    if config.optimizing:
        state = init_state(surgery, parsed, encoder, config.optimizer)
    timings["encode"] = time.perf_counter() - t0

    if state is not None and config.calibrate_lambda and config.optimizer.lambda_sem > 0:
        t0 = time.perf_counter()
        t_first = adapter.timesteps(config.sampling_steps)[0]
        z = adapter.init_latents(config.seed)
        lam = calibrate_lambda(state, z, t_first, adapter, config.optimizer)
        log.info("calibrated lambda_sem = %g", lam)
        config = replace(config, optimizer=replace(config.optimizer, lambda_sem=lam))
        timings["optimize"] += time.perf_counter() - t0

    run_dir = _run_dir(config)
    dumper = None
    if config.dump_attention:
        dumper = _Dumper(run_dir, _position_labels(cond, parsed, surgery, encoder.tokenizer))
    latents, state, aborted = _sample(adapter, config, cond, uncond, state, dumper, timings)
    return _finish(config, adapter, latents, state, aborted, parsed, dumper, run_dir, timings, t_start)


def generate_from_conditioning(config: GenerationConfig, conditioning: EmbeddingMatrix, backend=None) -> RunRecord:
    """Sample directly from a prepared conditioning matrix; no parsing, surgery or optimisation."""
    t_start = time.perf_counter()
    timings = _timings()
    t0 = time.perf_counter()
    adapter, encoder = backend if backend is not None else load_backend(config.model_ref, config.device)
    timings["load"] = time.perf_counter() - t0
    config = replace(config, enable_tome=False, enable_ets=False,
                     optimizer=replace(config.optimizer, enabled=False))
    uncond = adapter.unconditional(encoder)
    run_dir = _run_dir(config)
    dumper = None
    if config.dump_attention:
        labels = {p: f"#{p}" for p in range(conditioning.M)}
        dumper = _Dumper(run_dir, labels)
    latents, state, aborted = _sample(adapter, config, conditioning, uncond, None, dumper, timings)
    return _finish(config, adapter, latents, state, aborted, None, dumper, run_dir, timings, t_start)


def timing_report(records: Sequence[RunRecord]) -> dict:
    """Mean wall-clock seconds per phase, grouped by the config label.

    Adds the total-time ratio of every group against group "A" when present.
    """
    if not records:
        raise EmptyInput("no run records")
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.config.get("label", "custom"), []).append(r)
    rows = {}
    for label, rs in groups.items():
        rows[label] = {p: float(np.mean([r.timings.get(p, 0.0) for r in rs])) for p in PHASES}
        rows[label]["runs"] = len(rs)
        rows[label]["steps"] = rs[0].config.get("sampling_steps")
    if "A" in rows and rows["A"]["total"] > 0:
        for label, row in rows.items():
            row["ratio_vs_A"] = row["total"] / rows["A"]["total"]
    return rows


def format_timing_table(report: dict) -> str:
    cols = ["runs", "steps", *PHASES] + (["ratio_vs_A"] if any("ratio_vs_A" in r for r in report.values()) else [])
    lines = ["config  " + "  ".join(f"{c:>10}" for c in cols)]
    for label, row in report.items():
        cells = []
        for c in cols:
            v = row.get(c)
            cells.append(f"{v:>10}" if isinstance(v, int) or v is None else f"{v:>10.3f}")
        lines.append(f"{label:<8}" + "  ".join(cells))
    return "\n".join(lines)


__all__ = [
    "ABLATIONS",
    "GenerationConfig",
    "RunRecord",
    "ablation",
    "format_timing_table",
    "generate",
    "generate_from_conditioning",
    "optimized_step_count",
    "prepare_conditioning",
    "timing_report",
]
