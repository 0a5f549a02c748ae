"""Object-binding benchmark prompts and the multimodal scoring rubric."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from ..errors import BadRubric, EmptyField

TEMPLATE = "a {object_a} with a {item_a} and a {object_b} with a {item_b}"
SLOTS = ("object_a", "item_a", "object_b", "item_b")
RUBRIC_LEVELS = 9


@dataclass(frozen=True)
class BenchmarkPrompt:
    id: str
    object_a: str
    item_a: str
    object_b: str
    item_b: str

    @property
    def rendered(self) -> str:
        return TEMPLATE.format(**{k: getattr(self, k) for k in SLOTS})

    def to_dict(self) -> dict:
        return {**asdict(self), "rendered": self.rendered}


def default_pairs() -> list[dict]:
    text = resources.files("tomebind.data").joinpath("benchmark_pairs.json").read_text()
    return json.loads(text)["pairs"]


def _as_slots(pair) -> dict:
    if isinstance(pair, dict):
        return {k: pair.get(k) for k in SLOTS}
    vals = list(pair)
    if len(vals) != 4:
        raise EmptyField(f"expected four slots, got {vals!r}")
    return dict(zip(SLOTS, vals))


def build_benchmark(pairs: Iterable | None = None) -> list[BenchmarkPrompt]:
    """Render the template for every (object_a, item_a, object_b, item_b) entry.

    ``pairs`` may hold dicts or 4-tuples; ``None`` loads the shipped 50-pair set.
    """
    pairs = default_pairs() if pairs is None else list(pairs)
    if not pairs:
        raise EmptyField("no benchmark pairs given")
    out = []
    for i, pair in enumerate(pairs):
        slots = _as_slots(pair)
        for k, v in slots.items():
            if not isinstance(v, str) or not v.strip():
                raise EmptyField(f"pair {i}: slot {k!r} is empty")
        out.append(BenchmarkPrompt(f"obj-{i:03d}", **{k: v.strip() for k, v in slots.items()}))
    return out


@dataclass(frozen=True)
class Rubric:
    name: str
    instruction: str
    levels: tuple[tuple[float, str], ...]


def validate_rubric(data: dict) -> Rubric:
    levels = data.get("levels") if isinstance(data, dict) else None
    if not isinstance(levels, list) or len(levels) != RUBRIC_LEVELS:
        n = len(levels) if isinstance(levels, list) else 0
        raise BadRubric(f"rubric needs exactly {RUBRIC_LEVELS} levels, got {n}")
    parsed = []
    for i, lvl in enumerate(levels):
        try:
            score = float(lvl["score"])
            desc = str(lvl["description"]).strip()
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRubric(f"level {i} needs a numeric score and a description") from exc
        if not desc:
            raise BadRubric(f"level {i} has an empty description")
        if not 0 <= score <= 100:
            raise BadRubric(f"level {i} score {score} outside [0, 100]")
        parsed.append((score, desc))
    scores = [s for s, _ in parsed]
    if any(b <= a for a, b in zip(scores, scores[1:])):
        raise BadRubric(f"rubric scores must increase strictly: {scores}")
    return Rubric(str(data.get("name", "rubric")), str(data.get("instruction", "")).strip(), tuple(parsed))


def load_rubric(path: str | Path | None = None) -> Rubric:
    if path is None:
        text = resources.files("tomebind.data").joinpath("rubric.yaml").read_text()
    else:
        text = Path(path).read_text()
    return validate_rubric(yaml.safe_load(text))


def build_rubric_prompt(prompt: BenchmarkPrompt | str, rubric: Rubric | dict | None = None) -> str:
    if rubric is None:
        rubric = load_rubric()
    elif isinstance(rubric, dict):
        rubric = validate_rubric(rubric)
    text = prompt.rendered if isinstance(prompt, BenchmarkPrompt) else prompt
    lines = [rubric.instruction, "", f'Prompt: "{text}"', "", "Scoring levels:"]
    for score, desc in rubric.levels:
        lines.append(f"- {score:g}: {desc}")
    lines += ["", "Answer with a single number from the levels above and nothing else."]
    return "\n".join(lines)


def write_benchmark(prompts: Sequence[BenchmarkPrompt], path: str | Path):
    with open(path, "w") as fh:
        json.dump([p.to_dict() for p in prompts], fh, indent=2)
