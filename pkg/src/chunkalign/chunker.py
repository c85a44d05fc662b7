"""Text splitting: sliding word windows and recursive separator splitting.

Both splitters return character spans into the original text; the encoder
later maps them to token ranges.  One ``(strategy, chunk_size, overlap)``
plan is sampled per document.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateInputError

if TYPE_CHECKING:
    from .encoder.tokenizer import TokenSequence

log = logging.getLogger(__name__)

RECURSIVE = "recursive"
WORD = "word"
DEFAULT_SEPARATORS = ("\n\n", "\n", ". ", "? ", "! ", " ", "")
_WORD = re.compile(r"\S+")


@dataclass(frozen=True)
class ChunkSpan:
    char_start: int
    char_end: int
    token_start: int = -1
    token_end: int = -1

    @property
    def mapped(self) -> bool:
        return self.token_start >= 0


@dataclass(frozen=True)
class ChunkerConfig:
    """Sampling ranges for chunk plans.

    ``size_min``/``size_max`` are in words.  The recursive splitter works in
    characters and turns a word count into ``chunk_size * chars_per_word``.
    """

    p_recursive: float = 0.7
    size_min: int = 64
    size_max: int = 500
    overlap_frac_min: float = 0.3
    overlap_frac_max: float = 0.6
    separators: tuple[str, ...] = DEFAULT_SEPARATORS
    chars_per_word: int = 6
    seed: int = 0

    def validate(self) -> "ChunkerConfig":
        if not 0.0 <= self.p_recursive <= 1.0:
            raise ConfigError(f"p_recursive must be in [0, 1], got {self.p_recursive}")
        if not 0 < self.size_min <= self.size_max:
            raise ConfigError(f"need 0 < size_min <= size_max, got {self.size_min}, {self.size_max}")
        if not 0.0 <= self.overlap_frac_min <= self.overlap_frac_max < 1.0:
            raise ConfigError(
                f"need 0 <= overlap_frac_min <= overlap_frac_max < 1, got "
                f"{self.overlap_frac_min}, {self.overlap_frac_max}"
            )
        if self.chars_per_word < 1:
            raise ConfigError(f"chars_per_word must be >= 1, got {self.chars_per_word}")
        if not self.separators or self.separators[-1] != "":
            raise ConfigError("separator list must end with the empty separator")
        return self


# Desk-scale sampling range: the production 64..500 word range divided by 8.
DESK_CHUNKER = ChunkerConfig(size_min=8, size_max=62)


@dataclass(frozen=True)
class ChunkPlan:
    strategy: str
    chunk_size: int
    overlap: int
    overlap_frac: float = field(default=0.0, compare=False)


def sample_chunk_plan(rng: np.random.Generator, config: ChunkerConfig) -> ChunkPlan:
    """Draw a splitting strategy, a chunk size, and an overlap from ``rng``."""
    strategy = RECURSIVE if rng.random() < config.p_recursive else WORD
    size = int(rng.integers(config.size_min, config.size_max + 1))
    frac = float(rng.uniform(config.overlap_frac_min, config.overlap_frac_max))
    overlap = min(int(np.floor(frac * size)), size - 1)
    return ChunkPlan(strategy, size, overlap, frac)


def split_by_word(text: str, chunk_size: int, overlap: int) -> list[ChunkSpan]:
    """Sliding window over whitespace-delimited words with stride ``chunk_size - overlap``."""
    if chunk_size < 1 or not 0 <= overlap < chunk_size:
        raise ConfigError(f"need chunk_size >= 1 and 0 <= overlap < chunk_size, got {chunk_size}, {overlap}")
    words = [m.span() for m in _WORD.finditer(text)]
    if not words:
        raise DegenerateInputError("split_by_word: text has no words")
    stride = chunk_size - overlap
    spans = []
    start = 0
    while True:
        end = min(start + chunk_size, len(words))
        spans.append(ChunkSpan(words[start][0], words[end - 1][1]))
        if end == len(words):
            return spans
        start += stride


def _split_on(text: str, start: int, end: int, sep: str) -> list[tuple[int, int]]:
    """Pieces of ``text[start:end]`` cut after each ``sep``, whitespace-trimmed, empties dropped."""
    if sep == "":
        return [(i, i + 1) for i in range(start, end) if not text[i].isspace()]
    cuts = [start]
    pos = text.find(sep, start, end)
    while pos != -1:
        # keep the separator's visible part (e.g. the period) with the left piece
        cuts.append(pos + len(sep))
        pos = text.find(sep, pos + len(sep), end)
    cuts.append(end)
    pieces = []
    for a, b in zip(cuts, cuts[1:]):
        while a < b and text[a].isspace():
            a += 1
        while b > a and text[b - 1].isspace():
            b -= 1
        if a < b:
            pieces.append((a, b))
    return pieces


def _merge(pieces: list[tuple[int, int]], budget: int, overlap: int) -> list[tuple[int, int]]:
    """Greedily pack consecutive pieces into spans of at most ``budget`` characters.

    After each emitted span the tail pieces totalling at most ``overlap``
    characters are carried into the next one.
    """
    out = []
    cur: list[tuple[int, int]] = []
    for piece in pieces:
        if cur and piece[1] - cur[0][0] > budget:
            out.append((cur[0][0], cur[-1][1]))
            while cur and (cur[-1][1] - cur[0][0] > overlap or piece[1] - cur[0][0] > budget):
                cur.pop(0)
        cur.append(piece)
    if cur:
        out.append((cur[0][0], cur[-1][1]))
    return out


def recursive_split(
    text: str,
    chunk_size: int,
    overlap: int,
    separators: Sequence[str] = DEFAULT_SEPARATORS,
) -> list[ChunkSpan]:
    """Split on the coarsest separator present, recursing into oversized pieces.

    ``chunk_size`` and ``overlap`` are character budgets here.
    """
    if chunk_size < 1:
        raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
    seps = list(separators)
    if not seps or seps[-1] != "":
        seps.append("")

    def walk(start: int, end: int, seps: list[str]) -> list[tuple[int, int]]:
        k = next(i for i, s in enumerate(seps) if s == "" or text.find(s, start, end) != -1)
        rest = seps[k + 1 :]
        out: list[tuple[int, int]] = []
        small: list[tuple[int, int]] = []
        for a, b in _split_on(text, start, end, seps[k]):
            if b - a <= chunk_size:
                small.append((a, b))
                continue
            if small:
                out.extend(_merge(small, chunk_size, overlap))
                small = []
            out.extend(walk(a, b, rest) if rest else [(a, b)])
        if small:
            out.extend(_merge(small, chunk_size, overlap))
        return out

    return [ChunkSpan(a, b) for a, b in walk(0, len(text), seps)]


def chunk_document(text: str, plan: ChunkPlan, config: ChunkerConfig) -> list[ChunkSpan]:
    """Apply ``plan`` to ``text``; recursive budgets are scaled to characters."""
    if plan.strategy == WORD:
        return split_by_word(text, plan.chunk_size, plan.overlap)
    if plan.strategy == RECURSIVE:
        cpw = config.chars_per_word
        return recursive_split(text, plan.chunk_size * cpw, plan.overlap * cpw, config.separators)
    raise ConfigError(f"unknown chunking strategy {plan.strategy!r}")


def map_spans_to_tokens(
    spans: Sequence[ChunkSpan], tokens: "TokenSequence"
) -> tuple[list[ChunkSpan], list[int]]:
    """Attach token ranges to character spans.

    A content token belongs to a span when its character midpoint lies in
    ``[char_start, char_end)``.  Returns the mapped spans and the indices of
    spans that captured no token (those are dropped).
    """
    for a, b in zip(spans, spans[1:]):
        if b.char_start < a.char_start:
            raise ContractError(f"spans not sorted by char_start: {a} before {b}")
    lo, hi = tokens.content_start, tokens.content_end
    mids = np.array([(s + e) / 2.0 for s, e in tokens.char_offsets[lo:hi]])
    kept, dropped = [], []
    for i, span in enumerate(spans):
        first = int(np.searchsorted(mids, span.char_start, side="left"))
        last = int(np.searchsorted(mids, span.char_end, side="left"))
        if first >= last:
            dropped.append(i)
            continue
        kept.append(replace(span, token_start=lo + first, token_end=lo + last))
    if dropped:
        log.debug("dropped %d span(s) without tokens: %s", len(dropped), dropped)
    return kept, dropped
