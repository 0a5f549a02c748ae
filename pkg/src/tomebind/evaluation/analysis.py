"""Embedding and attention analyses: additivity, entropy by position, coupling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..attention import AttentionMap, entropy_by_position
from ..embedding import encode, slice_conditioning
from ..errors import EncoderFailure, ToMeError

ADDITIVITY_TEMPLATE = "a photo of a {word}"
DEFAULT_QUADRUPLES = (("queen", "king", "woman", "man"), ("puppy", "dog", "kitten", "cat"))


@dataclass
class AnalysisReport:
    kind: str
    inputs: dict
    statistics: dict
    plots: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def word_vector(encoder, word: str, template: str = ADDITIVITY_TEMPLATE, row: str = "word") -> np.ndarray:
    """Embedding row of ``word`` inside ``template``.

    ``row="word"`` takes the word's last subword row, ``row="eot"`` the first end-token row.
    """
    prompt = template.format(word=word)
    try:
        m = encode(prompt, encoder)
    except ToMeError:
        raise
    except Exception as exc:
        raise EncoderFailure(f"could not encode {prompt!r}: {exc}") from exc
    if row == "eot":
        idx = m.eot_start
    else:
        tok = encoder.tokenizer
        idx = len(tok.tokenize(tok.normalize(template.split("{word}")[0] + word)))
    return m.rows[idx].detach().double().cpu().numpy()


def cosine(u: np.ndarray, v: np.ndarray) -> float | None:
    """Cosine similarity; ``None`` when either vector is zero (undefined)."""
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return None
    return float(np.dot(u, v) / (nu * nv))


def pca_2d(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto their top two principal axes. Returns (coords, explained ratio)."""
    x = vectors - vectors.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    k = min(2, vt.shape[0])
    coords = x @ vt[:k].T
    if k < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - k)))
    var = s ** 2
    ratio = var[:2] / var.sum() if var.sum() > 0 else np.zeros(2)
    return coords, ratio


def additivity_report(encoder, quadruples: Sequence[Sequence[str]] = DEFAULT_QUADRUPLES,
                      template: str = ADDITIVITY_TEMPLATE, row: str = "word",
                      out_dir: str | Path | None = None) -> AnalysisReport:
    """cos(a - b, c - d) for each (a, b, c, d), plus a 2-D principal projection of all words."""
    words: list[str] = []
    for q in quadruples:
        if len(q) != 4:
            raise ValueError(f"quadruple needs four words: {q!r}")
        words += [w for w in q if w not in words]
    vecs = {w: word_vector(encoder, w, template, row) for w in words}
    results = []
    for a, b, c, d in quadruples:
        cs = cosine(vecs[a] - vecs[b], vecs[c] - vecs[d])
        results.append({"quadruple": [a, b, c, d], "cosine": cs, "defined": cs is not None})
    coords, ratio = pca_2d(np.stack([vecs[w] for w in words]))
    stats = {
        "cosines": results,
        "pca": {w: coords[i].tolist() for i, w in enumerate(words)},
        "explained_variance_ratio": ratio.tolist(),
    }
    inputs = {"template": template, "row": row, "encoder": getattr(encoder, "name", "encoder"),
              "quadruples": [list(q) for q in quadruples], "vectors": {w: v.tolist() for w, v in vecs.items()}}
    report = AnalysisReport("additivity", inputs, stats)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.plots.append(str(_plot_additivity(words, coords, quadruples, out / "additivity_pca.png")))
        report.save(out / "additivity.json")
    return report


def _plot_additivity(words, coords, quadruples, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pos = {w: coords[i] for i, w in enumerate(words)}
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(coords[:, 0], coords[:, 1], s=12)
    for w in words:
        ax.annotate(w, pos[w], fontsize=8)
    for a, b, c, d in quadruples:
        for src, dst in ((b, a), (d, c)):
            ax.annotate("", xy=pos[dst], xytext=pos[src], arrowprops=dict(arrowstyle="->", lw=0.8))
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def entropy_report(maps: Sequence[AttentionMap], labels: dict[int, str] | None = None, average: str = "maps",
                   out_dir: str | Path | None = None) -> AnalysisReport:
    """Per-position entropy of token attention maps (averaged over steps, heads and layers)."""
    rep = entropy_by_position(maps, average=average)
    stats = rep.to_dict()
    positions = sorted(rep.by_position)
    if len(positions) >= 2:
        xs = np.asarray(positions, dtype=float)
        ys = np.asarray([rep.by_position[p] for p in positions])
        stats["slope_per_position"] = float(np.polyfit(xs, ys, 1)[0])
    inputs = {"average": average, "maps": len(maps), "labels": {str(k): v for k, v in (labels or {}).items()}}
    report = AnalysisReport("entropy-position", inputs, stats)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.plots.append(str(_plot_entropy(rep.by_position, labels or {}, rep.max_entropy, out / "entropy.png")))
        report.save(out / "entropy.json")
    return report


def _plot_entropy(by_position: dict, labels: dict, max_entropy: float, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pos = sorted(by_position)
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(pos)), 3))
    ax.bar(range(len(pos)), [by_position[p] for p in pos])
    ax.axhline(max_entropy, ls="--", lw=0.8, color="gray")
    ax.set_xticks(range(len(pos)))
    ax.set_xticklabels([labels.get(p, str(p)) for p in pos], rotation=60, fontsize=7)
    ax.set_ylabel("entropy (nats)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def coupling_conditionings(prompt: str, token_span: tuple[int, int], encoder) -> dict:
    """The three inputs of the coupling experiment: full prompt, one token's rows, the end-token block."""
    m = encode(prompt, encoder)
    return {
        "full": m,
        "token": slice_conditioning(m, token_span),
        "eot": slice_conditioning(m, (m.eot_start, m.M)),
    }


def coupling_report(prompt: str, token_span: tuple[int, int], object_name: str, seeds: Sequence[int],
                    backend, detector, base_config=None, threshold: float = 0.5,
                    out_dir: str | Path | None = None) -> AnalysisReport:
    """DetScore of ``object_name`` for images generated from each coupling conditioning."""
    from ..pipeline import GenerationConfig, generate_from_conditioning
    from .scoring import detscore

    adapter, encoder = backend
    cfg = base_config or GenerationConfig(prompt=prompt, output_dir=None)
    conds = coupling_conditionings(prompt, token_span, encoder)
    scores = {}
    for name, cond in conds.items():
        images = []
        for s in seeds:
            rec = generate_from_conditioning(_with(cfg, seed=s, prompt=prompt), cond, backend)
            images.append(rec.image)
        scores[name] = detscore(images, object_name, detector, threshold)
    inputs = {"prompt": prompt, "token_span": list(token_span), "object": object_name,
              "seeds": list(seeds), "threshold": threshold}
    report = AnalysisReport("coupling-detscore", inputs, {"detscore": scores, "images_per_case": len(seeds)})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        report.save(Path(out_dir) / "coupling.json")
    return report


def _with(cfg, **kw):
    from dataclasses import replace

    return replace(cfg, **kw)
