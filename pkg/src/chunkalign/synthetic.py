"""Synthetic topical text built from a pseudo-word lexicon.

Documents mix two topics; each sentence interleaves shared function words
with topic words, and paragraphs are separated by blank lines so both
splitting strategies have structure to work with.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for

_ONSETS = list("bdfgklmnprstvz") + ["br", "st", "tr", "pl", "kr", "sh", "ch"]
_VOWELS = list("aeiou") + ["ai", "ou", "ea"]
_CODAS = ["", "", "", "n", "r", "s", "l", "m", "k", "th"]


def make_lexicon(n_words: int, seed: int = 0) -> list[str]:
    """Deterministic list of distinct pseudo-words of one to three syllables."""
    rng = rng_for(seed, "lexicon")
    seen: set[str] = set()
    words: list[str] = []
    while len(words) < n_words:
        syl = int(rng.integers(1, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(syl)
        )
        if len(w) >= 2 and w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _zipf(n: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


@dataclass
class CorpusGenerator:
    """Generates topical documents over a fixed lexicon."""

    n_topics: int = 12
    words_per_topic: int = 40
    n_function_words: int = 30
    p_function: float = 0.35
    sentence_words: tuple[int, int] = (6, 13)
    paragraph_sentences: tuple[int, int] = (2, 5)
    lexicon_seed: int = 0
    lexicon: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        total = self.n_function_words + self.n_topics * self.words_per_topic
        self.lexicon = make_lexicon(total, self.lexicon_seed)
        self.function_words = self.lexicon[: self.n_function_words]
        body = self.lexicon[self.n_function_words :]
        self.topics = [body[i * self.words_per_topic : (i + 1) * self.words_per_topic] for i in range(self.n_topics)]
        self._fw_p = _zipf(self.n_function_words)
        self._tw_p = _zipf(self.words_per_topic, 0.8)

    @property
    def content_words(self) -> list[str]:
        return [w for t in self.topics for w in t]

    def sentence(self, rng: np.random.Generator, topics: list[int]) -> str:
        n = int(rng.integers(*self.sentence_words))
        words = []
        for _ in range(n):
            if rng.random() < self.p_function:
                words.append(self.function_words[rng.choice(self.n_function_words, p=self._fw_p)])
            else:
                t = topics[rng.integers(len(topics))]
                words.append(self.topics[t][rng.choice(self.words_per_topic, p=self._tw_p)])
        return " ".join(words) + "."

    def document(self, rng: np.random.Generator, n_words: int, topics: list[int] | None = None) -> str:
        """Roughly ``n_words`` words (the last sentence is completed)."""
        if topics is None:
            topics = [int(t) for t in rng.choice(self.n_topics, size=2, replace=False)]
        paragraphs, count = [], 0
        while count < n_words:
            para = []
            for _ in range(int(rng.integers(*self.paragraph_sentences))):
                s = self.sentence(rng, topics)
                para.append(s)
                count += s.count(" ") + 1
                if count >= n_words:
                    break
            paragraphs.append(" ".join(para))
        return "\n\n".join(paragraphs)

    def corpus(self, num_docs: int, seed: int, words: tuple[int, int] = (70, 100), prefix: str = "doc") -> list[tuple[str, str]]:
        out = []
        for i in range(num_docs):
            doc_id = f"{prefix}{i:05d}"
            rng = rng_for(seed, "corpus", doc_id)
            out.append((doc_id, self.document(rng, int(rng.integers(words[0], words[1] + 1)))))
        return out
