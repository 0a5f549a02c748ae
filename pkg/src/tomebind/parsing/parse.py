"""Entity grouping over an arbitrary dependency parse."""

from __future__ import annotations

from ..errors import EmptyPrompt, NoEntityFound, PromptTooLong
from ..tokenizer import ClipTokenizer, Token
from .rules import DETERMINERS, RuleParseProvider
from .types import DependencyTree, EntityGroup, ParsedPrompt, ParseProvider, ParsedWord, TokenSpan

NOUN_TAGS = frozenset({"NOUN", "PROPN"})
# arcs that make a noun a modifier of something else rather than an entity
MODIFIER_DEPS = frozenset(
    {"compound", "pobj", "dobj", "obj", "iobj", "dative", "amod", "nmod", "poss",
     "npadvmod", "attr", "oprd", "acomp", "nummod", "dep"}
)
RESIDUAL_DEPS = frozenset({"cc", "punct"})

_default_provider = None
_default_tokenizer = None


def default_provider() -> ParseProvider:
    global _default_provider
    if _default_provider is None:
        _default_provider = RuleParseProvider()
    return _default_provider


def default_tokenizer() -> ClipTokenizer:
    global _default_tokenizer
    if _default_tokenizer is None:
        _default_tokenizer = ClipTokenizer()
    return _default_tokenizer


def _entity_heads(tree: DependencyTree) -> list[int]:
    words = tree.words
    heads = []
    for w in words:
        if w.pos not in NOUN_TAGS:
            continue
        if w.dep == "ROOT" or w.dep in {"nsubj", "nsubjpass", "appos"}:
            heads.append(w.index)
        elif w.dep == "conj":
            # coordinated with an entity, or opening its own determiner phrase
            anchor = words[w.head]
            has_det = any(words[c].dep in ("det", "nummod") and c < w.index for c in tree.kids(w.index))
            if anchor.index in heads or has_det:
                heads.append(w.index)
        elif w.dep not in MODIFIER_DEPS and words[w.head].pos not in NOUN_TAGS | {"ADP", "VERB", "AUX"}:
            heads.append(w.index)
    return heads


def _collect_attributes(tree: DependencyTree, head: int, entity_heads: set[int]) -> list[int]:
    words = tree.words
    out = []
    stack = list(tree.kids(head))
    while stack:
        c = stack.pop()
        w = words[c]
        if c in entity_heads or w.dep in RESIDUAL_DEPS or w.dep == "conj" and words[w.head].index == head:
            continue
        if w.head == head and w.dep in {"det", "predet"} and c < head:
            continue  # the entity's own determiner stays residual
        out.append(c)
        stack.extend(tree.kids(c))
    return sorted(out)


def _align(words: list[ParsedWord], tokens: list[Token]) -> tuple[dict[int, list[int]], list[int]]:
    """Map parser word index -> content-token positions by character overlap.

    Positions are 1-based (position 0 is the start token). Tokens that overlap
    no parser word are returned separately.
    """
    owner: dict[int, list[int]] = {w.index: [] for w in words}
    orphans = []
    for pos, tok in enumerate(tokens, start=1):
        hit = next((w for w in words if w.start < tok.end and tok.start < w.end), None)
        if hit is None:
            orphans.append(pos)
        else:
            owner[hit.index].append(pos)
    return owner, orphans


def _span(positions: list[int], tokens: list[Token], text: str) -> TokenSpan:
    a, b = positions[0], positions[-1] + 1
    return TokenSpan(a, b, text[tokens[a - 1].start:tokens[b - 2].end])


def parse_prompt(
    prompt: str,
    parse_provider: ParseProvider | None = None,
    tokenizer: ClipTokenizer | None = None,
) -> ParsedPrompt:
    """Split ``prompt`` into entity groups with spans into the padded token sequence."""
    provider = parse_provider or default_provider()
    tok = tokenizer or default_tokenizer()
    text = tok.normalize(prompt or "")
    if not text:
        raise EmptyPrompt("prompt is empty")
    tokens = tok.tokenize(text)
    if len(tokens) > tok.max_content:
        raise PromptTooLong(f"{len(tokens)} content tokens; at most {tok.max_content} fit")

    words = list(provider.parse(text))
    tree = DependencyTree(words)
    heads = _entity_heads(tree)
    owner, orphans = _align(words, tokens)
    heads = [h for h in heads if owner.get(h)]
    if not heads:
        raise NoEntityFound(f"no noun head found in {prompt!r}")

    head_set = set(heads)
    claimed: set[int] = set()
    groups = []
    for k, h in enumerate(sorted(heads), start=1):
        noun = _span(owner[h], tokens, text)
        attrs = []
        for a in _collect_attributes(tree, h, head_set):
            if a in claimed or not owner[a]:
                continue
            claimed.add(a)
            attrs.append(_span(owner[a], tokens, text))
        claimed.add(h)
        groups.append(EntityGroup(noun, tuple(attrs), k))

    residual = [
        _span(owner[w.index], tokens, text)
        for w in words
        if w.index not in claimed and owner[w.index]
    ]
    residual += [_span([p], tokens, text) for p in orphans]
    residual.sort(key=lambda s: s.start)
    return ParsedPrompt(text, tuple(groups), tuple(residual), len(tokens))


def _determiner(parsed: ParsedPrompt, group: EntityGroup) -> TokenSpan | None:
    first = group.first_position
    for r in parsed.residual:
        if r.end == first and r.text in DETERMINERS:
            return r
    return None


def clean_prompt(parsed: ParsedPrompt) -> str:
    """Attribute-stripped prompt: "<det> <noun>" per entity, joined by "and"."""
    parts = []
    for g in parsed.groups:
        det = _determiner(parsed, g)
        parts.append(f"{det.text if det else 'a'} {g.noun.text}")
    return " and ".join(parts)


def noun_phrase(parsed: ParsedPrompt, group: EntityGroup) -> str:
    """The entity's own phrase, e.g. "a dog wearing hat", used as supervision text."""
    det = _determiner(parsed, group)
    pieces = ([det.text] if det else []) + [s.text for s in group.spans]
    return " ".join(pieces)
