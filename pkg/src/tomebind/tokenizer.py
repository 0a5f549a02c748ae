"""CLIP byte-pair tokenizer with character offsets.

The BPE merges and vocabulary come from ``open_clip``'s bundled
``SimpleTokenizer``; this wrapper only adds per-token character offsets so
parser words can be aligned to subword tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from open_clip.tokenizer import SimpleTokenizer, basic_clean, whitespace_clean

from .errors import EmptyPrompt, PromptTooLong

DEFAULT_MAX_LENGTH = 77


@dataclass(frozen=True)
class Token:
    id: int
    text: str
    start: int  # character offsets into the normalized prompt
    end: int


class ClipTokenizer:
    """CLIP BPE tokenizer producing padded id sequences of length ``max_length``.

    Position 0 is always the start token; content tokens follow; every remaining
    position holds ``pad_id`` (the end token unless configured otherwise).
    """

    def __init__(self, max_length: int = DEFAULT_MAX_LENGTH, pad_id: int | None = None):
        self._bpe = _shared_bpe()
        self.max_length = max_length
        self.sot_id = self._bpe.sot_token_id
        self.eot_id = self._bpe.eot_token_id
        self.pad_id = self.eot_id if pad_id is None else pad_id

    @property
    def max_content(self) -> int:
        return self.max_length - 2

    @staticmethod
    def normalize(text: str) -> str:
        return whitespace_clean(basic_clean(text)).lower()

    def tokenize(self, text: str) -> list[Token]:
        """Content tokens of an already normalized string, with offsets."""
        bpe = self._bpe
        out = []
        for match in bpe.pat.finditer(text):
            piece = match.group()
            mapped = "".join(bpe.byte_encoder[b] for b in piece.encode("utf-8"))
            for sub in bpe.bpe(mapped).split(" "):
                out.append(Token(bpe.encoder[sub], sub, match.start(), match.end()))
        return out

    def decode_token(self, token_id: int) -> str:
        return self._bpe.decoder[token_id].replace("</w>", "")

    def encode_padded(self, text: str) -> tuple[list[int], int]:
        """Return (padded ids, eot_start) for ``text``."""
        norm = self.normalize(text)
        if not norm:
            raise EmptyPrompt("prompt is empty")
        content = [t.id for t in self.tokenize(norm)]
        if len(content) > self.max_content:
            raise PromptTooLong(
                f"prompt has {len(content)} tokens; at most {self.max_content} fit"
            )
        eot_start = len(content) + 1
        ids = [self.sot_id, *content, self.eot_id]
        ids += [self.pad_id] * (self.max_length - len(ids))
        return ids, eot_start


@lru_cache(maxsize=1)
def _shared_bpe() -> SimpleTokenizer:
    return SimpleTokenizer()
