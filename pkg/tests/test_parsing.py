import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tomebind.errors import EmptyPrompt, NoEntityFound, PromptTooLong
from tomebind.parsing import clean_prompt, noun_phrase, parse_prompt
from tomebind.parsing.types import DependencyTree, EntityGroup, ParsedPrompt, ParsedWord, TokenSpan
from tomebind.tokenizer import ClipTokenizer


def groups(parsed):
    return [(g.noun.text, [a.text for a in g.attributes]) for g in parsed.groups]


def test_tokenizer_matches_clip_ids():
    tok = ClipTokenizer()
    ids, eot = tok.encode_padded("a photo of a dog")
    assert len(ids) == 77 and eot == 6
    assert ids[0] == tok.sot_id and ids[eot] == tok.eot_id


def test_tokenizer_subword_offsets():
    tok = ClipTokenizer()
    toks = tok.tokenize(tok.normalize("a zebracorn"))
    assert len(toks) > 2
    assert {(t.start, t.end) for t in toks[1:]} == {(2, 11)}


def test_prompt_too_long():
    with pytest.raises(PromptTooLong):
        parse_prompt(" ".join(["cat"] * 80))


@pytest.mark.parametrize("text", ["", "   "])
def test_empty_prompt(text):
    with pytest.raises(EmptyPrompt):
        parse_prompt(text)


def test_no_entity():
    with pytest.raises(NoEntityFound):
        parse_prompt("very quickly")


def test_worked_example():
    p = parse_prompt("a cat wearing glasses and a dog with a hat")
    assert groups(p) == [("cat", ["wearing", "glasses"]), ("dog", ["with", "a", "hat"])]
    assert [r.text for r in p.residual] == ["a", "and", "a"]
    assert [g.index for g in p.groups] == [1, 2]


def test_single_noun():
    p = parse_prompt("a dog")
    assert groups(p) == [("dog", [])]
    assert [r.text for r in p.residual] == ["a"]


def test_adjectives():
    p = parse_prompt("a red ball and a blue cube")
    assert groups(p) == [("ball", ["red"]), ("cube", ["blue"])]


@pytest.mark.parametrize("prompt, clean", [
    ("a cat wearing hat and a dog wearing sunglasses", "a cat and a dog"),
    ("a dog", "a dog"),
    ("a red ball and a blue cube", "a ball and a cube"),
    ("the cat with a bow and the dog", "the cat and the dog"),
    ("the cat with a bow and one dog", "the cat and a dog"),
])
def test_clean_prompt(prompt, clean):
    assert clean_prompt(parse_prompt(prompt)) == clean


def test_noun_phrase():
    p = parse_prompt("a cat wearing sunglasses and a dog wearing hat")
    assert [noun_phrase(p, g) for g in p.groups] == ["a cat wearing sunglasses", "a dog wearing hat"]


def test_multi_subword_noun_is_one_span():
    p = parse_prompt("a zebracorn with a hat")
    noun = p.groups[0].noun
    assert noun.end - noun.start > 1
    assert noun.text == "zebracorn"


def test_shared_attribute_attached_once():
    p = parse_prompt("a red cat and dog")
    seen = [pos for g in p.groups for s in g.spans for pos in s.positions]
    assert len(seen) == len(set(seen))


def test_to_dict_roundtrip():
    p = parse_prompt("a cat wearing glasses and a dog with a hat")
    d = p.to_dict()
    assert d["groups"][1]["noun"]["text"] == "dog"
    assert TokenSpan.from_dict(d["groups"][0]["noun"]) == p.groups[0].noun


def test_injected_provider():
    class Fixed:
        name, version = "fixed", "1"

        def parse(self, text):
            words = [ParsedWord(0, "big", 0, 3, "ADJ", "amod", 1), ParsedWord(1, "dog", 4, 7, "NOUN", "ROOT", 1)]
            return words

    p = parse_prompt("big dog", parse_provider=Fixed())
    assert groups(p) == [("dog", ["big"])]


def test_span_validation():
    with pytest.raises(ValueError):
        TokenSpan(-1, 1, "x")
    with pytest.raises(ValueError):
        TokenSpan(3, 3, "x")


ADJ = ["red", "blue", "green", "small", "big", "wooden", "shiny"]
NOUN = ["cat", "dog", "ball", "cube", "bird", "car", "apple", "zebracorn"]
ITEM = ["hat", "scarf", "glasses", "bow", "crown"]


@st.composite
def prompts(draw):
    parts = []
    for _ in range(draw(st.integers(1, 3))):
        words = ["a"]
        if draw(st.booleans()):
            words.append(draw(st.sampled_from(ADJ)))
        words.append(draw(st.sampled_from(NOUN)))
        if draw(st.booleans()):
            words += [draw(st.sampled_from(["with", "wearing"])), "a", draw(st.sampled_from(ITEM))]
        parts.append(" ".join(words))
    return " and ".join(parts)


@settings(max_examples=80, deadline=None)
@given(prompts())
def test_token_accounting(prompt):
    p = parse_prompt(prompt)
    covered = [pos for g in p.groups for s in g.spans for pos in s.positions]
    covered += [pos for r in p.residual for pos in r.positions]
    assert sorted(covered) == list(range(1, p.token_count + 1))
    assert parse_prompt(prompt).to_dict() == p.to_dict()
