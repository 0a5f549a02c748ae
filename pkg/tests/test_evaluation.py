import threading

import numpy as np
import pytest
import torch
import yaml

from tomebind.attention import AttentionMap
from tomebind.errors import BadRubric, DetectorUnavailable, EmptyField, EmptyInput, MalformedScore, ScorerUnavailable
from tomebind.evaluation import (
    TEMPLATE,
    Detection,
    HttpRubricScorer,
    ScoreRecord,
    ScoringItem,
    additivity_report,
    build_benchmark,
    build_rubric_prompt,
    cosine,
    coupling_conditionings,
    coupling_report,
    detscore,
    entropy_report,
    load_rubric,
    parse_score,
    pca_2d,
    score_images,
    validate_rubric,
    vqa_questions,
    vqa_score,
)
from tomebind.pipeline import GenerationConfig


def test_benchmark_has_fifty_distinct_prompts():
    prompts = build_benchmark()
    assert len(prompts) == 50
    assert len({p.rendered for p in prompts}) == 50
    assert len({p.id for p in prompts}) == 50


def test_benchmark_template_exact():
    (p,) = build_benchmark([("cat", "hat", "dog", "sunglasses")])
    assert p.rendered == "a cat with a hat and a dog with a sunglasses"
    assert TEMPLATE.format(object_a="x", item_a="y", object_b="z", item_b="w") == "a x with a y and a z with a w"


@pytest.mark.parametrize("pair", [("cat", "", "dog", "hat"), {"object_a": "cat", "item_a": "hat", "object_b": "dog"},
                                  ("cat", "hat", "dog")])
def test_benchmark_empty_field(pair):
    with pytest.raises(EmptyField):
        build_benchmark([pair])


def _levels(scores):
    return {"name": "r", "instruction": "Rate it.", "levels": [{"score": s, "description": f"d{s}"} for s in scores]}


def test_shipped_rubric():
    r = load_rubric()
    assert len(r.levels) == 9
    text = build_rubric_prompt(build_benchmark()[0], r)
    assert build_benchmark()[0].rendered in text
    for score, desc in r.levels:
        assert desc in text and f"{score:g}" in text


@pytest.mark.parametrize("scores", [range(8), [0, 10, 20, 30, 40, 50, 60, 70, 70],
                                    [0, 10, 20, 30, 40, 50, 60, 70, 110], [80, 10, 20, 30, 40, 50, 60, 70, 90]])
def test_bad_rubric(scores):
    with pytest.raises(BadRubric):
        validate_rubric(_levels(list(scores)))


def test_custom_rubric_file(tmp_path):
    path = tmp_path / "r.yaml"
    path.write_text(yaml.safe_dump(_levels([0, 5, 10, 20, 30, 40, 60, 80, 100])))
    assert load_rubric(path).levels[-1] == (100.0, "d100")


class ScriptedScorer:
    name = "gpt4o-rubric"

    def __init__(self, replies):
        self.replies = dict(replies)
        self.calls: dict[str, int] = {}
        self.lock = threading.Lock()

    def score(self, image_ref, instruction):
        with self.lock:
            n = self.calls.get(image_ref, 0)
            self.calls[image_ref] = n + 1
        reply = self.replies[image_ref]
        if isinstance(reply, list):
            reply = reply[min(n, len(reply) - 1)]
        if isinstance(reply, Exception):
            raise reply
        return reply


def test_score_images_mock():
    items = [ScoringItem(f"p{i}", f"img{i}.png", "a cat with a hat and a dog with a bow") for i in range(4)]
    client = ScriptedScorer({
        "img0.png": "100",
        "img1.png": "I think it looks good",
        "img2.png": [ScorerUnavailable("429"), "75"],
        "img3.png": ScorerUnavailable("down"),
    })
    sleeps = []
    recs = score_images(items, client, concurrency=3, retries=2, backoff=0.5, sleep=sleeps.append)
    assert [r.prompt_id for r in recs] == ["p0", "p1", "p2", "p3"]
    assert recs[0].score == 100 and recs[0].attempts == 1
    assert recs[1].score is None and "malformed" in recs[1].error and recs[1].raw == "I think it looks good"
    assert recs[2].score == 75 and recs[2].attempts == 2
    assert recs[3].score is None and recs[3].attempts == 3 and "unavailable" in recs[3].error
    assert sorted(sleeps) == [0.5, 0.5, 1.0]
    for r in recs:
        assert set(r.to_dict()) == {"prompt_id", "image_ref", "scorer", "score", "raw", "attempts", "error"}


def test_score_images_no_client():
    with pytest.raises(ScorerUnavailable):
        score_images([], None)


def test_parse_score():
    assert parse_score("Score: 60") == 60
    with pytest.raises(MalformedScore):
        parse_score("excellent")
    with pytest.raises(MalformedScore):
        parse_score("250")


def test_score_record_range():
    with pytest.raises(ValueError):
        ScoreRecord("p", "i", "vqa", 1.5, "1.5")


def test_http_scorer_needs_key(monkeypatch, tmp_path):
    monkeypatch.delenv("TOMEBIND_TEST_KEY", raising=False)
    img = tmp_path / "x.png"
    img.write_bytes(b"\x89PNG")
    with pytest.raises(ScorerUnavailable, match="TOMEBIND_TEST_KEY"):
        HttpRubricScorer(key_env="TOMEBIND_TEST_KEY").score(str(img), "rate")


def test_http_scorer_request(monkeypatch, tmp_path):
    httpx = pytest.importorskip("httpx")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = request.read()
        if "fail" in seen:
            return httpx.Response(503)
        return httpx.Response(200, json={"choices": [{"message": {"content": "90"}}]})

    monkeypatch.setenv("TOMEBIND_TEST_KEY", "k-123")
    img = tmp_path / "x.png"
    img.write_bytes(b"\x89PNG")
    scorer = HttpRubricScorer(endpoint="http://scorer.test/v1", key_env="TOMEBIND_TEST_KEY",
                              client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert scorer.score(str(img), "rate") == "90"
    assert seen["auth"] == "Bearer k-123"
    seen["fail"] = True
    with pytest.raises(ScorerUnavailable):
        scorer.score(str(img), "rate")


class Detector:
    def __init__(self, hits):
        self.hits = iter(hits)

    def detect(self, image):
        return [Detection("Dog", next(self.hits)), Detection("cat", 0.99)]


def test_detscore():
    imgs = [np.zeros((4, 4, 3), np.uint8)] * 4
    assert detscore(imgs, "dog", Detector([0.9, 0.2, 0.5, 0.49])) == 0.5
    with pytest.raises(EmptyInput):
        detscore([], "dog", Detector([]))
    with pytest.raises(DetectorUnavailable):
        detscore(imgs, "dog", None)


def test_vqa():
    assert vqa_questions("a red ball and a blue cube") == ["a red ball?", "a blue cube?"]

    class V:
        def yes_probability(self, image, q):
            return {"a red ball?": 0.5, "a blue cube?": 0.4}[q]

    assert vqa_score(None, "a red ball and a blue cube", V()) == pytest.approx(0.2)


def test_cosine_undefined_for_zero():
    assert cosine(np.zeros(3), np.ones(3)) is None
    assert cosine(np.array([1.0, 0]), np.array([0, 2.0])) == 0.0


def test_additivity_degenerate_quadruple(encoder):
    rep = additivity_report(encoder, [("cat", "cat", "dog", "dog")])
    assert rep.statistics["cosines"][0]["cosine"] is None
    assert rep.statistics["cosines"][0]["defined"] is False


def test_additivity_report(encoder, tmp_path):
    rep = additivity_report(encoder, out_dir=tmp_path)
    for r in rep.statistics["cosines"]:
        assert -1 <= r["cosine"] <= 1
    assert (tmp_path / "additivity_pca.png").exists() and (tmp_path / "additivity.json").exists()
    assert len(rep.statistics["pca"]) == 8


def test_pca_2d_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 5))
    coords, ratio = pca_2d(x)
    xc = x - x.mean(0)
    w, v = np.linalg.eigh(np.cov(xc.T))
    top = v[:, np.argsort(w)[::-1][:2]]
    assert np.allclose(np.abs(coords), np.abs(xc @ top))
    assert ratio.sum() <= 1 + 1e-12


def test_entropy_report(tmp_path):
    maps = []
    for pos in range(4):
        v = torch.ones(8, 8)
        v[: 1 + 2 * pos] *= 50  # later positions get broader
        maps.append(AttentionMap(v, "up.0", pos, normalized=False))
    rep = entropy_report(maps, {0: "<sot>", 1: "a"}, out_dir=tmp_path)
    assert len(rep.statistics["by_position"]) == 4
    assert rep.statistics["slope_per_position"] > 0
    assert (tmp_path / "entropy.png").exists()


def test_coupling(small_adapter, encoder):
    conds = coupling_conditionings("a cat wearing sunglasses and a dog wearing hat", (7, 8), encoder)
    assert conds["token"].M == 1 and conds["eot"].M == 77 - conds["full"].eot_start
    assert torch.equal(conds["token"].rows[0], conds["full"].rows[7])
    base = GenerationConfig(prompt="x", sampling_steps=2, output_dir=None)

    class Always:
        def detect(self, image):
            return [Detection("dog", 1.0)]

    rep = coupling_report("a cat wearing sunglasses and a dog wearing hat", (7, 8), "dog", [0, 1],
                          (small_adapter, encoder), Always(), base_config=base)
    assert rep.statistics["detscore"] == {"full": 1.0, "token": 1.0, "eot": 1.0}
