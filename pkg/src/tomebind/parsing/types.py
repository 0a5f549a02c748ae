from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence


@dataclass(frozen=True)
class TokenSpan:
    """Half-open ``[start, end)`` range of positions in the padded token sequence."""

    start: int
    end: int
    text: str = ""

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def positions(self) -> range:
        return range(self.start, self.end)

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenSpan":
        return cls(d["start"], d["end"], d.get("text", ""))


@dataclass(frozen=True)
class EntityGroup:
    noun: TokenSpan
    attributes: tuple[TokenSpan, ...] = ()
    index: int = 1

    @property
    def spans(self) -> list[TokenSpan]:
        """Noun and attribute spans in sequence order."""
        return sorted((self.noun, *self.attributes), key=lambda s: s.start)

    @property
    def first_position(self) -> int:
        return min(s.start for s in self.spans)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "noun": self.noun.to_dict(),
            "attributes": [a.to_dict() for a in self.attributes],
        }


@dataclass(frozen=True)
class ParsedPrompt:
    prompt: str
    groups: tuple[EntityGroup, ...]
    residual: tuple[TokenSpan, ...] = ()
    token_count: int = 0

    @property
    def K(self) -> int:
        return len(self.groups)

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "token_count": self.token_count,
            "groups": [g.to_dict() for g in self.groups],
            "residual": [r.to_dict() for r in self.residual],
        }


@dataclass(frozen=True)
class ParsedWord:
    """One word of a dependency parse; ``head == index`` marks the root."""

    index: int
    text: str
    start: int
    end: int
    pos: str
    dep: str
    head: int


class ParseProvider(Protocol):
    name: str
    version: str

    def parse(self, text: str) -> Sequence[ParsedWord]: ...


@dataclass
class DependencyTree:
    words: list[ParsedWord]
    children: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        for w in self.words:
            if w.head != w.index:
                self.children.setdefault(w.head, []).append(w.index)

    def kids(self, i: int) -> list[int]:
        return self.children.get(i, [])
