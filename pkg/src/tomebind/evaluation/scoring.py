"""Clients for external scorers and detectors, and the batch scoring loop.

Every network call goes through a client object so tests can swap in mocks.
"""

from __future__ import annotations

import base64
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from ..errors import DetectorUnavailable, EmptyInput, MalformedScore, ScorerUnavailable

log = logging.getLogger(__name__)

SCORE_RANGES = {"gpt4o-rubric": (0.0, 100.0), "vqa": (0.0, 1.0), "detector": (0.0, 1.0)}
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")


@dataclass
class ScoreRecord:
    prompt_id: str
    image_ref: str
    scorer: str
    score: float | None
    raw: str | None
    attempts: int = 1
    error: str | None = None

    def __post_init__(self):
        lo, hi = SCORE_RANGES.get(self.scorer, (-np.inf, np.inf))
        if self.score is not None and not lo <= self.score <= hi:
            raise ValueError(f"{self.scorer} score {self.score} outside [{lo}, {hi}]")

    @property
    def ok(self) -> bool:
        return self.score is not None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScoringItem:
    prompt_id: str
    image_ref: str
    prompt_text: str


class ScorerClient(Protocol):
    """Returns the scorer's raw text reply for one (image, instruction) pair."""

    name: str

    def score(self, image_ref: str, instruction: str) -> str: ...


@dataclass(frozen=True)
class Detection:
    label: str
    confidence: float
    box: tuple[float, float, float, float] | None = None


class DetectorClient(Protocol):
    def detect(self, image) -> list[Detection]: ...


class VQAClient(Protocol):
    def yes_probability(self, image, question: str) -> float: ...


def _encode_image(image_ref: str) -> str:
    data = Path(image_ref).read_bytes()
    return base64.b64encode(data).decode()


class HttpRubricScorer:
    """Chat-completions style multimodal endpoint.

    The credential is read from the environment variable named by ``key_env``
    at call time; it is never stored on disk or logged.
    """

    name = "gpt4o-rubric"

    def __init__(self, endpoint: str = "https://api.openai.com/v1/chat/completions", model: str = "gpt-4o",
                 key_env: str = "OPENAI_API_KEY", timeout: float = 60.0, client=None):
        self.endpoint = endpoint
        self.model = model
        self.key_env = key_env
        self.timeout = timeout
        self._client = client

    def _http(self):
        if self._client is None:
            import httpx

            self._client = httpx.Client(timeout=self.timeout)
        return self._client

    def score(self, image_ref: str, instruction: str) -> str:
        key = os.environ.get(self.key_env)
        if not key:
            raise ScorerUnavailable(f"set {self.key_env} to use {self.endpoint}")
        body = {
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": instruction},
                    {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{_encode_image(image_ref)}"}},
                ],
            }],
            "temperature": 0,
        }
        log.debug("scorer request %s image=%s instruction=%r", self.endpoint, image_ref, instruction)
        try:
            resp = self._http().post(self.endpoint, json=body, headers={"Authorization": f"Bearer {key}"})
        except Exception as exc:
            raise ScorerUnavailable(f"request failed: {exc}") from exc
        log.debug("scorer response %s %s", resp.status_code, resp.text)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ScorerUnavailable(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ScorerUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()["choices"][0]["message"]["content"]


class HttpDetectorClient:
    """POSTs a PNG to ``endpoint`` and expects ``[{"label", "confidence", "box"}]`` back."""

    def __init__(self, endpoint: str, timeout: float = 60.0, client=None):
        self.endpoint = endpoint
        self.timeout = timeout
        self._client = client

    def detect(self, image) -> list[Detection]:
        import io

        import httpx
        from PIL import Image

        buf = io.BytesIO()
        img = Image.open(image) if isinstance(image, (str, Path)) else Image.fromarray(np.asarray(image))
        img.save(buf, format="PNG")
        client = self._client or httpx.Client(timeout=self.timeout)
        try:
            resp = client.post(self.endpoint, files={"image": ("image.png", buf.getvalue(), "image/png")})
            resp.raise_for_status()
            return [Detection(d["label"], float(d["confidence"]), tuple(d["box"]) if d.get("box") else None)
                    for d in resp.json()]
        except Exception as exc:
            raise DetectorUnavailable(f"detector at {self.endpoint} failed: {exc}") from exc


def parse_score(raw: str, lo: float = 0.0, hi: float = 100.0) -> float:
    """First number in the reply, checked against [lo, hi]."""
    m = _NUMBER.search(raw or "")
    if m is None:
        raise MalformedScore(f"no number in scorer reply: {raw!r}")
    value = float(m.group())
    if not lo <= value <= hi:
        raise MalformedScore(f"score {value} outside [{lo}, {hi}]")
    return value


def _score_one(item: ScoringItem, client: ScorerClient, build: Callable[[str], str], retries: int,
               backoff: float, sleep: Callable[[float], None]) -> ScoreRecord:
    name = getattr(client, "name", "gpt4o-rubric")
    lo, hi = SCORE_RANGES.get(name, (0.0, 100.0))
    instruction = build(item.prompt_text)
    last = None
    for attempt in range(1, retries + 2):
        try:
            raw = client.score(item.image_ref, instruction)
        except ScorerUnavailable as exc:
            last = exc
            if attempt <= retries:
                sleep(backoff * 2 ** (attempt - 1))
            continue
        try:
            return ScoreRecord(item.prompt_id, item.image_ref, name, parse_score(raw, lo, hi), raw, attempt)
        except MalformedScore as exc:
            return ScoreRecord(item.prompt_id, item.image_ref, name, None, raw, attempt, f"malformed: {exc}")
    return ScoreRecord(item.prompt_id, item.image_ref, name, None, None, retries + 1, f"unavailable: {last}")


def score_images(items: Sequence[ScoringItem], client: ScorerClient | None, concurrency: int = 4,
                 retries: int = 3, backoff: float = 1.0, rubric=None,
                 sleep: Callable[[float], None] = time.sleep) -> list[ScoreRecord]:
    """One ScoreRecord per item, in input order; failures are kept as records with no score."""
    from .benchmark import build_rubric_prompt, load_rubric

    if client is None:
        raise ScorerUnavailable("no scorer client configured")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    rubric = rubric if rubric is not None else load_rubric()

    def build(text: str) -> str:
        return build_rubric_prompt(text, rubric)

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = [pool.submit(_score_one, it, client, build, retries, backoff, sleep) for it in items]
        return [f.result() for f in futures]


def detscore(images: Sequence, object_name: str, detector: DetectorClient | None, threshold: float = 0.5) -> float:
    """Fraction of images where ``object_name`` is detected with confidence >= ``threshold``."""
    if not images:
        raise EmptyInput("no images to score")
    if detector is None:
        raise DetectorUnavailable("no detector client configured")
    target = object_name.strip().lower()
    hits = 0
    for img in images:
        try:
            dets = detector.detect(img)
        except DetectorUnavailable:
            raise
        except Exception as exc:
            raise DetectorUnavailable(f"detector failed: {exc}") from exc
        if any(d.label.strip().lower() == target and d.confidence >= threshold for d in dets):
            hits += 1
    return hits / len(images)


def vqa_questions(prompt: str, parse_provider=None) -> list[str]:
    """One yes/no question per entity noun phrase, e.g. "a red ball?"."""
    from ..parsing import noun_phrase, parse_prompt

    parsed = parse_prompt(prompt, parse_provider)
    return [f"{noun_phrase(parsed, g)}?" for g in parsed.groups]


def vqa_score(image, prompt: str, client: VQAClient, parse_provider=None) -> float:
    """Product of per-phrase yes-probabilities."""
    score = 1.0
    for q in vqa_questions(prompt, parse_provider):
        p = float(client.yes_probability(image, q))
        if not 0.0 <= p <= 1.0:
            raise MalformedScore(f"VQA probability {p} outside [0, 1]")
        score *= p
    return score
