"""A small deterministic dependency parser for image-prompt English.

Prompts are overwhelmingly coordinated noun phrases with adjectival
modifiers, participial clauses ("wearing a hat") and prepositional chains
("with a red scarf"). This provider tags words from a closed lexicon plus
suffix rules and attaches them with spaCy-style labels (det, amod, compound,
prep, pobj, acl, dobj, cc, conj). It exists so the package works without a
downloaded statistical model; ``SpacyParseProvider`` is the drop-in
alternative when one is installed.
"""

from __future__ import annotations

import regex as re

from .types import ParsedWord

DETERMINERS = frozenset(
    "a an the this that these those some any each every my your his her its our "
    "their another no".split()
)
NUMERALS = frozenset(
    "one two three four five six seven eight nine ten eleven twelve several many few".split()
)
CONJUNCTIONS = frozenset({"and", "or", "but", "&"})
PREPOSITIONS = frozenset(
    "with in on at of under over near beside behind above below by from inside into "
    "onto to through across against along among around between beneath for like "
    "outside within without atop upon underneath next".split()
)
LY_WORDS = frozenset("family lily belly jelly bully ally butterfly dragonfly firefly holly".split())
LY_ADJECTIVES = frozenset("curly fluffy friendly lovely ugly silly woolly oily hilly sparkly wrinkly".split())
ADVERBS = frozenset("very extremely slightly really quite too so brightly".split())
AUXILIARIES = frozenset("is are was were be being been has have".split())
VERBS = frozenset(
    "wearing holding carrying sitting standing eating riding playing lying "
    "reading drinking walking running jumping flying swimming sleeping looking "
    "chasing watching hugging wears holds has having carries rides eats plays "
    "covered dressed made filled decorated painted topped wrapped surrounded "
    "sporting donning".split()
)
ADJECTIVES = frozenset(
    # colours
    "red orange yellow green blue purple pink brown black white gray grey "
    "golden silver beige violet cyan magenta turquoise maroon navy teal crimson "
    "dark light bright pale colorful colourful "
    # shape / size
    "round square rectangular triangular oval circular spherical cubic cylindrical "
    "big small large tiny huge giant little tall short long wide narrow thin thick "
    "fat slim flat tall "
    # texture / material
    "wooden metallic fluffy furry fuzzy smooth rough soft hard shiny glossy matte "
    "woolen woollen silky ceramic "
    # other
    "old new young cute happy sad angry beautiful ugly modern ancient vintage "
    "striped spotted checkered plaid wet dry hot cold warm cool clean dirty empty "
    "full broken open closed wild tame fancy elegant funny".split()
)
ADJ_SUFFIXES = ("ous", "ful", "less", "ish", "ive", "ic", "ical")
NOUN_ING = frozenset(
    "ring rings king kings wing wings string strings swing swings ceiling building "
    "buildings painting paintings clothing pudding earring earrings stocking "
    "stockings sling evening morning thing things duckling ducklings sibling "
    "dumpling dumplings seedling icing frosting railing bedding".split()
)

_WORD = re.compile(r"[\p{L}\p{N}]+(?:'[\p{L}]+)?|[^\s\p{L}\p{N}]")
_CHUNK_POS = {"DET", "NUM", "ADV", "ADJ", "NOUN", "PROPN"}


def tag(word: str) -> str:
    w = word.lower()
    if not re.match(r"[\p{L}\p{N}]", w):
        return "PUNCT"
    if w in DETERMINERS:
        return "DET"
    if w in NUMERALS or w.isdigit():
        return "NUM"
    if w in CONJUNCTIONS:
        return "CCONJ"
    if w in PREPOSITIONS:
        return "ADP"
    if w in ADVERBS:
        return "ADV"
    if w in AUXILIARIES:
        return "AUX"
    if w in VERBS:
        return "VERB"
    if w in ADJECTIVES:
        return "ADJ"
    if w.endswith("ing") and w not in NOUN_ING and len(w) > 5:
        return "VERB"
    if w.endswith(ADJ_SUFFIXES) and len(w) > 5:
        return "ADJ"
    if w.endswith("ly") and w not in LY_WORDS and len(w) > 4:
        return "ADJ" if w in LY_ADJECTIVES else "ADV"
    return "NOUN"


class RuleParseProvider:
    name = "tomebind-rules"
    version = "1"

    def parse(self, text: str) -> list[ParsedWord]:
        matches = list(_WORD.finditer(text))
        words = [m.group() for m in matches]
        pos = [tag(w) for w in words]
        n = len(words)
        head = list(range(n))
        dep = [""] * n

        chunks = _noun_chunks(pos, head, dep)
        chunk_start = {h: s for s, h in chunks}

        def prev_head(k):
            best = None
            for _, h in chunks:
                if h < k:
                    best = h
            return best

        def prev_word(k):
            g = k - 1
            while g >= 0 and pos[g] == "PUNCT":
                g -= 1
            return g

        # pass 1: prepositions and verbs attach leftwards
        for k in range(n):
            if dep[k] or pos[k] not in {"ADP", "VERB", "AUX"}:
                continue
            g = prev_word(k)
            if pos[k] == "ADP" and g >= 0 and pos[g] in {"VERB", "AUX", "ADP"}:
                dep[k], head[k] = "prep", g
                continue
            ph = prev_head(k)
            if ph is None:
                dep[k], head[k] = "ROOT", k
            else:
                dep[k], head[k] = ("prep" if pos[k] == "ADP" else "acl"), ph

        # pass 2: link chunk heads
        root = None
        for s, h in chunks:
            g = prev_word(s)
            if g < 0 or (root is None and pos[g] not in {"ADP", "VERB", "AUX"}):
                dep[h], head[h] = "ROOT", h
                root = h if root is None else root
            elif pos[g] == "ADP":
                dep[h], head[h] = "pobj", g
            elif pos[g] in {"VERB", "AUX"}:
                dep[h], head[h] = "dobj", g
            elif pos[g] == "CCONJ":
                prev = prev_head(g)
                if prev is None:
                    dep[h], head[h] = "ROOT", h
                elif pos[chunk_start[h]] == "DET" or dep[prev] in {"ROOT", "conj"}:
                    # a determiner opens a new entity: coordinate with the entity-level noun
                    dep[h], head[h] = "conj", _entity_anchor(prev, dep, head)
                else:
                    dep[h], head[h] = "conj", prev
            else:
                ph = prev_head(s)
                dep[h], head[h] = ("appos", ph) if ph is not None else ("ROOT", h)
        if root is None:
            root = next((k for k in range(n) if dep[k] == "ROOT"), 0)

        # pass 3: conjunctions, punctuation and leftovers
        for k in range(n):
            if dep[k]:
                continue
            ph = prev_head(k)
            if pos[k] == "CCONJ":
                nxt = next((h for s, h in chunks if s > k), None)
                if nxt is not None and dep[nxt] == "conj":
                    dep[k], head[k] = "cc", head[nxt]
                elif ph is not None:
                    dep[k], head[k] = "cc", ph
                else:
                    dep[k], head[k] = "cc", root
            elif pos[k] == "PUNCT":
                dep[k], head[k] = "punct", ph if ph is not None else root
            else:
                dep[k], head[k] = "dep", ph if ph is not None else root
            if head[k] == k and k != root:
                dep[k] = "ROOT"

        return [
            ParsedWord(k, words[k], matches[k].start(), matches[k].end(), pos[k], dep[k], head[k])
            for k in range(n)
        ]


def _noun_chunks(pos, head, dep) -> list[tuple[int, int]]:
    """Find (DET|NUM|ADV|ADJ|NOUN)* NOUN runs and label their internal arcs."""
    n = len(pos)
    coord_adj = {
        i for i in range(1, n - 1)
        if pos[i] == "CCONJ" and pos[i - 1] == "ADJ" and pos[i + 1] in {"ADJ", "ADV"}
    }
    chunks = []
    i = 0
    while i < n:
        if pos[i] not in _CHUNK_POS:
            i += 1
            continue
        j, h = i, -1
        while j < n and (pos[j] in _CHUNK_POS or j in coord_adj):
            if pos[j] in {"NOUN", "PROPN"} and (j + 1 >= n or pos[j + 1] not in {"NOUN", "PROPN"}):
                h = j
                break
            j += 1
        if h < 0:
            i += 1
            continue
        for k in range(i, h):
            if k in coord_adj:
                dep[k], head[k] = "cc", _prev(pos, k, "ADJ")
            elif pos[k] == "DET":
                dep[k], head[k] = "det", h
            elif pos[k] == "NUM":
                dep[k], head[k] = "nummod", h
            elif pos[k] == "ADV":
                dep[k], head[k] = "advmod", _next_of(pos, k, {"ADJ"}, h)
            elif pos[k] == "ADJ" and k - 1 in coord_adj:
                dep[k], head[k] = "conj", _prev(pos, k - 1, "ADJ")
            elif pos[k] == "ADJ":
                dep[k], head[k] = "amod", h
            else:
                dep[k], head[k] = "compound", h
        chunks.append((i, h))
        i = h + 1
    return chunks


def _prev(pos, k, p):
    for j in range(k - 1, -1, -1):
        if pos[j] == p:
            return j
    return k


def _next_of(pos, k, ps, default):
    for j in range(k + 1, default + 1):
        if pos[j] in ps:
            return j
    return default


def _entity_anchor(h, dep, head):
    # climb modifier links until reaching an entity-level noun
    seen = set()
    while dep[h] not in {"ROOT", "conj"} and h not in seen:
        seen.add(h)
        h = head[h]
    if dep[h] == "conj":
        return head[h]
    return h
