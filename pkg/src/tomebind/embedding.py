"""Operations on the text-conditioning matrix.

Everything here returns new tensors; no input matrix is modified in place.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import torch

from .encoders import TextEncoder
from .errors import EmptyPrompt, EncoderFailure, ShapeMismatch, SpanOutOfRange, ToMeError
from .parsing import clean_prompt
from .parsing.types import EntityGroup, ParsedPrompt, TokenSpan


class ExperimentalWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """A conditioning matrix: row 0 is the start token, rows from ``eot_start`` are end tokens.

    ``reduced`` marks sub-sequences cut out for conditioning experiments; they
    skip the full-sequence layout checks.
    """

    rows: torch.Tensor
    eot_start: int
    pooled: torch.Tensor | None = None
    source_prompt: str = ""
    reduced: bool = False

    sot_index = 0

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D matrix, got shape {tuple(self.rows.shape)}")
        if not self.reduced and not 1 <= self.eot_start <= self.M - 1:
            raise SpanOutOfRange(f"eot_start {self.eot_start} outside [1, {self.M - 1}]")
        if not torch.isfinite(self.rows).all():
            raise ValueError("conditioning rows contain NaN or Inf")

    @property
    def M(self) -> int:
        return self.rows.shape[0]

    @property
    def D(self) -> int:
        return self.rows.shape[1]

    @property
    def content_range(self) -> range:
        return range(1, self.eot_start)

    @property
    def eot_block(self) -> torch.Tensor:
        return self.rows[self.eot_start:]

    def with_rows(self, rows: torch.Tensor, **kw) -> "EmbeddingMatrix":
        return replace(self, rows=rows, **kw)


@dataclass(frozen=True, eq=False)
class CompositeToken:
    embedding: torch.Tensor
    entity_index: int
    source_spans: tuple[TokenSpan, ...]
    position: int
    trainable: bool = True


@dataclass(frozen=True, eq=False)
class SurgeryResult:
    matrix: EmbeddingMatrix
    composites: tuple[CompositeToken, ...]
    index_map: dict[int, int | None] = field(default_factory=dict)
    ets_applied: bool = False
    merged: bool = True

    @property
    def composite_positions(self) -> list[int]:
        return [c.position for c in self.composites]

    @property
    def eot_positions(self) -> range:
        return range(self.matrix.eot_start, self.matrix.M)


def encode(prompt: str, encoder: TextEncoder) -> EmbeddingMatrix:
    """Encode ``prompt`` into its full padded conditioning matrix."""
    if not prompt or not prompt.strip():
        raise EmptyPrompt("prompt is empty")
    ids, eot_start = encoder.tokenizer.encode_padded(prompt)
    try:
        rows, pooled = encoder.encode_ids(ids, eot_start)
    except ToMeError:
        raise
    except Exception as exc:
        raise EncoderFailure(f"{getattr(encoder, 'name', 'encoder')} failed: {exc}") from exc
    return EmbeddingMatrix(rows, eot_start, pooled, prompt)


def _check_span(matrix: EmbeddingMatrix, span: TokenSpan, lo: int, hi: int):
    if span.start < lo or span.end > hi:
        raise SpanOutOfRange(f"span [{span.start}, {span.end}) outside [{lo}, {hi})")


def merge_group(matrix: EmbeddingMatrix, group: EntityGroup) -> CompositeToken:
    """Sum the noun and attribute rows of ``group`` into one composite embedding.

    Rows are added left to right in sequence order.
    """
    spans = group.spans
    for s in spans:
        _check_span(matrix, s, 1, matrix.eot_start)
    positions = [p for s in spans for p in s.positions]
    acc = matrix.rows[positions[0]].clone()
    for p in positions[1:]:
        acc = acc + matrix.rows[p]
    return CompositeToken(acc, group.index, tuple(spans), group.noun.start)


def _pad_block(block: torch.Tensor, n: int) -> torch.Tensor:
    if block.shape[0] >= n:
        return block[:n]
    fill = block[-1:].expand(n - block.shape[0], -1)
    return torch.cat([block, fill], dim=0)


def _clean_encoding(matrix: EmbeddingMatrix, parsed: ParsedPrompt, encoder: TextEncoder | None) -> EmbeddingMatrix:
    if encoder is None:
        raise EncoderFailure("end token substitution needs an encoder")
    clean = encode(clean_prompt(parsed), encoder)
    if clean.D != matrix.D:
        raise ShapeMismatch(f"clean encoding width {clean.D} != {matrix.D}")
    return clean


def substitute_end_tokens(result: SurgeryResult, parsed: ParsedPrompt, encoder: TextEncoder,
                          ets_pooled: bool = True) -> SurgeryResult:
    """End token substitution on an existing layout, without merging anything."""
    matrix = result.matrix
    clean = _clean_encoding(matrix, parsed, encoder)
    rows = torch.cat([matrix.rows[: matrix.eot_start], _pad_block(clean.eot_block, matrix.M - matrix.eot_start)])
    pooled = clean.pooled if ets_pooled else matrix.pooled
    return replace(result, matrix=matrix.with_rows(rows, pooled=pooled), ets_applied=True)


def apply_surgery(
    matrix: EmbeddingMatrix,
    parsed: ParsedPrompt,
    ets: bool = True,
    encoder: TextEncoder | None = None,
    ets_pooled: bool = True,
) -> SurgeryResult:
    """Merge each entity group into a composite row and compact the sequence.

    With ``ets`` the end-token rows (and, if ``ets_pooled``, the pooled vector)
    are replaced by those of the attribute-free clean prompt.
    """
    M = matrix.M
    member: dict[int, EntityGroup] = {}
    for g in parsed.groups:
        for s in g.spans:
            _check_span(matrix, s, 1, matrix.eot_start)
            for p in s.positions:
                member[p] = g
    composites = {g.index: merge_group(matrix, g) for g in parsed.groups}

    new_rows = [matrix.rows[0]]
    index_map: dict[int, int | None] = {0: 0}
    placed = []
    for p in matrix.content_range:
        g = member.get(p)
        if g is None:
            index_map[p] = len(new_rows)
            new_rows.append(matrix.rows[p])
        elif p == g.noun.start:
            index_map[p] = len(new_rows)
            placed.append(replace(composites[g.index], position=len(new_rows)))
            new_rows.append(composites[g.index].embedding)
        else:
            index_map[p] = None
    new_eot = len(new_rows)
    for offset, p in enumerate(range(matrix.eot_start, M)):
        index_map[p] = new_eot + offset

    pooled = matrix.pooled
    if ets:
        clean = _clean_encoding(matrix, parsed, encoder)
        eot_block = _pad_block(clean.eot_block, M - new_eot)
        if ets_pooled:
            pooled = clean.pooled
    else:
        eot_block = _pad_block(matrix.eot_block, M - new_eot)

    rows = torch.cat([torch.stack(new_rows), eot_block], dim=0)
    out = EmbeddingMatrix(rows, new_eot, pooled, matrix.source_prompt)
    return SurgeryResult(out, tuple(placed), index_map, ets_applied=ets)


def identity_surgery(matrix: EmbeddingMatrix, parsed: ParsedPrompt) -> SurgeryResult:
    """No merging: each entity's last noun subword becomes its trainable row in place."""
    composites = []
    for g in parsed.groups:
        _check_span(matrix, g.noun, 1, matrix.eot_start)
        pos = g.noun.end - 1
        composites.append(CompositeToken(matrix.rows[pos].clone(), g.index, (g.noun,), pos))
    index_map = {p: p for p in range(matrix.M)}
    return SurgeryResult(matrix, tuple(composites), index_map, ets_applied=False, merged=False)


def write_rows(result: SurgeryResult, positions: Sequence[int], values: torch.Tensor) -> SurgeryResult:
    """Return a copy of ``result`` with ``values[i]`` written at ``positions[i]``."""
    rows = result.matrix.rows.clone()
    idx = torch.as_tensor(list(positions), dtype=torch.long)
    rows[idx] = values.to(rows.dtype)
    by_pos = {p: i for i, p in enumerate(positions)}
    composites = tuple(
        replace(c, embedding=rows[c.position].clone()) if c.position in by_pos else c
        for c in result.composites
    )
    return replace(result, matrix=result.matrix.with_rows(rows), composites=composites)


def slice_conditioning(matrix: EmbeddingMatrix, span: TokenSpan | tuple[int, int]) -> EmbeddingMatrix:
    """Keep only rows ``[start, end)`` with no re-padding."""
    start, end = (span.start, span.end) if isinstance(span, TokenSpan) else span
    if not 0 <= start < end <= matrix.M:
        raise SpanOutOfRange(f"slice [{start}, {end}) outside [0, {matrix.M})")
    if (start, end) == (0, matrix.M):
        return matrix.with_rows(matrix.rows.clone())
    eot = min(max(matrix.eot_start - start, 0), end - start)
    return EmbeddingMatrix(matrix.rows[start:end].clone(), eot, matrix.pooled, matrix.source_prompt, reduced=True)


def combine(
    matrix_a: EmbeddingMatrix,
    matrix_b: EmbeddingMatrix,
    from_index: int,
    sign: float = 1.0,
) -> EmbeddingMatrix:
    """Rows before ``from_index`` from ``a``; rows at/after it are ``a + sign * b``."""
    if matrix_a.rows.shape != matrix_b.rows.shape:
        raise ShapeMismatch(f"{tuple(matrix_a.rows.shape)} vs {tuple(matrix_b.rows.shape)}")
    if not 0 <= from_index < matrix_a.M:
        raise SpanOutOfRange(f"from_index {from_index} outside [0, {matrix_a.M})")
    rows = torch.cat([matrix_a.rows[:from_index], matrix_a.rows[from_index:] + sign * matrix_b.rows[from_index:]])
    pooled = matrix_a.pooled
    if pooled is not None and matrix_b.pooled is not None:
        pooled = pooled + sign * matrix_b.pooled
    return EmbeddingMatrix(rows, matrix_a.eot_start, pooled, matrix_a.source_prompt, matrix_a.reduced)


def zeros_like(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    pooled = None if matrix.pooled is None else torch.zeros_like(matrix.pooled)
    return replace(matrix, rows=torch.zeros_like(matrix.rows), pooled=pooled)


def splice_composite(sources: Sequence[tuple[EmbeddingMatrix, TokenSpan]], entity_index: int = 1) -> CompositeToken:
    """Sum rows taken from *different* prompt encodings into one composite.

    Experimental: rows lacking shared context tend to drop the object entirely.
    """
    warnings.warn("cross-prompt splicing often loses the object", ExperimentalWarning, stacklevel=2)
    if not sources:
        raise ValueError("no sources to splice")
    acc = None
    spans = []
    for matrix, span in sources:
        _check_span(matrix, span, 1, matrix.eot_start)
        for p in span.positions:
            acc = matrix.rows[p].clone() if acc is None else acc + matrix.rows[p]
        spans.append(span)
    return CompositeToken(acc, entity_index, tuple(spans), spans[0].start)
