"""Word/punctuation tokenizer with byte-level fallback and character offsets."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..errors import DegenerateInputError, ParseError

PAD, CLS, SEP = "[PAD]", "[CLS]", "[SEP]"
SPECIALS = (PAD, CLS, SEP)
SENTINEL = (-1, -1)

_PIECE = re.compile(r"\w+|[^\w\s]")


def _byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


@dataclass
class TokenSequence:
    """Token ids with per-token character offsets into the source text.

    Special and prompt positions carry the ``SENTINEL`` offset.  Content
    tokens occupy the contiguous range ``[content_start, content_end)``.
    """

    token_ids: list[int]
    char_offsets: list[tuple[int, int]]
    has_cls: bool = True
    has_sep: bool = True
    prompt_token_count: int = 0
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def content_start(self) -> int:
        return int(self.has_cls) + self.prompt_token_count

    @property
    def content_end(self) -> int:
        return len(self.token_ids) - int(self.has_sep)

    @property
    def content_char_end(self) -> int:
        """Character index just past the last content token."""
        ends = [e for s, e in self.char_offsets[self.content_start : self.content_end]]
        return max(ends) if ends else 0


@dataclass
class Tokenizer:
    """Deterministic tokenizer over a fixed vocabulary.

    The vocabulary always holds the specials and all 256 byte tokens; words
    and punctuation marks seen when building are added after them.  A piece
    missing from the vocabulary is spelled out as its UTF-8 bytes.
    """

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for t in SPECIALS:
            if t not in self.index:
                raise ValueError(f"vocabulary lacks special token {t}")

    @classmethod
    def build(cls, texts: Iterable[str], max_words: int | None = None, min_count: int = 1) -> "Tokenizer":
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(_PIECE.findall(text))
        base = list(SPECIALS) + [_byte_token(b) for b in range(256)]
        ranked = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        if max_words is not None:
            ranked = ranked[:max_words]
        return cls(base + ranked)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    def _pieces(self, text: str) -> tuple[list[int], list[tuple[int, int]]]:
        ids: list[int] = []
        offsets: list[tuple[int, int]] = []
        for m in _PIECE.finditer(text):
            piece = m.group()
            tid = self.index.get(piece)
            if tid is not None and piece not in SPECIALS:
                ids.append(tid)
                offsets.append(m.span())
                continue
            # byte fallback; every byte of a character shares that character's span
            for j, ch in enumerate(piece):
                pos = m.start() + j
                for b in ch.encode("utf-8"):
                    ids.append(self.index[_byte_token(b)])
                    offsets.append((pos, pos + 1))
        return ids, offsets

    def tokenize(self, text: str, prompt: str | None = None, max_len: int | None = None) -> TokenSequence:
        """Tokenize ``text`` as ``[CLS] prompt... content... [SEP]``.

        With ``max_len`` the content is cut from the end so the whole
        sequence fits.
        """
        if not text.strip():
            raise DegenerateInputError("tokenize: text is empty")
        ids, offsets = self._pieces(text)
        prompt_ids = self._pieces(prompt)[0] if prompt else []
        truncated = False
        if max_len is not None:
            room = max_len - 2 - len(prompt_ids)
            if room < 1:
                raise DegenerateInputError(f"tokenize: max_len {max_len} leaves no room for content")
            if len(ids) > room:
                ids, offsets, truncated = ids[:room], offsets[:room], True
        return TokenSequence(
            token_ids=[self.cls_id] + prompt_ids + ids + [self.sep_id],
            char_offsets=[SENTINEL] * (1 + len(prompt_ids)) + offsets + [SENTINEL],
            has_cls=True,
            has_sep=True,
            prompt_token_count=len(prompt_ids),
            truncated=truncated,
        )

    def decode_ids(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        for t in self.tokens:
            if "\n" in t:
                raise ValueError(f"token {t!r} contains a newline")
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(set(lines)) != len(lines):
            raise ParseError("duplicate tokens in vocabulary file", path=str(path))
        return cls(lines)


def truncate_text(text: str, tokenizer: Tokenizer, max_len: int, prompt: str | None = None) -> str:
    """Cut ``text`` so that it tokenizes within ``max_len`` without truncation."""
    seq = tokenizer.tokenize(text, prompt=prompt, max_len=max_len)
    while seq.truncated:
        # a multi-byte character cut mid-way re-expands, so drop whole tokens until it fits
        ends = sorted({e for _, e in seq.char_offsets[seq.content_start : seq.content_end]})
        cut = ends[-1] if ends[-1] < len(text) else ends[-2]
        text = text[:cut]
        seq = tokenizer.tokenize(text, prompt=prompt, max_len=max_len)
    return text
