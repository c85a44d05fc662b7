"""Single- and multi-vector retrieval, ndcg@k, and a synthetic needle benchmark.

A single-vector document is its CLS (or mean) embedding.  A multi-vector
document keeps the CLS plus every chunk embedding from the same forward
pass, and a query scores it by the best cosine over those vectors.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .chunker import ChunkSpan, map_spans_to_tokens
from .distill.train import worker_count
from .errors import ConfigError, DimensionError, ParseError
from .seeding import rng_for
from .synthetic import CorpusGenerator

log = logging.getLogger(__name__)

SINGLE = "single"
MULTI = "multi"
MODES = (SINGLE, MULTI)

# The same pattern the tokenizer uses to pre-split text.
_PIECES = re.compile(r"\w+|[^\w\s]")

Planner = Callable[[str, str], Sequence[ChunkSpan]]


@dataclass
class DocEmbedding:
    doc_id: str
    mode: str
    vectors: np.ndarray  # (n, dim), unit rows
    kinds: list[str] = field(default_factory=list)
    truncated: bool = False

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.vectors.shape[0] < 1:
            raise DimensionError(f"{self.doc_id}: a document needs at least one vector")
        if self.mode == SINGLE and self.vectors.shape[0] != 1:
            raise DimensionError(f"{self.doc_id}: single mode holds exactly one vector")
        if not self.kinds:
            self.kinds = ["cls"] + [f"chunk_{i}" for i in range(self.vectors.shape[0] - 1)]

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class ScoredHit:
    doc_id: str
    score: float
    rank: int


@dataclass
class EvalTask:
    queries: list[tuple[str, str]]
    corpus: list[tuple[str, str]]
    qrels: list[tuple[str, str, int]]

    def validate(self) -> "EvalTask":
        qids = {q for q, _ in self.queries}
        dids = {d for d, _ in self.corpus}
        for q, d, _ in self.qrels:
            if q not in qids or d not in dids:
                raise ConfigError(f"qrel ({q}, {d}) references an unknown query or document")
        return self

    def relevance(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for q, d, g in self.qrels:
            out.setdefault(q, {})[d] = g
        return out


# ---------------------------------------------------------------- embedders


@dataclass
class DocVectors:
    cls: np.ndarray
    mean: np.ndarray
    chunks: list[np.ndarray]
    truncated: bool = False


class Embedder(Protocol):
    dim: int

    def embed_document(self, text: str, spans: Sequence[ChunkSpan]) -> DocVectors: ...

    def embed_query(self, text: str) -> np.ndarray: ...


class StudentEmbedder:
    """Wraps a trained encoder and its tokenizer; one forward pass per document."""

    def __init__(self, encoder, tokenizer, max_len: int | None = None, prompt: str = ""):
        self.encoder = encoder
        self.tokenizer = tokenizer
        self.max_len = max_len or encoder.config.target_max_len
        self.prompt = prompt or None
        self.dim = encoder.config.model_dim

    def embed_document(self, text: str, spans: Sequence[ChunkSpan]) -> DocVectors:
        seq = self.tokenizer.tokenize(text, prompt=self.prompt, max_len=self.max_len)
        kept = [s for s in spans if s.char_end <= seq.content_char_end] if seq.truncated else list(spans)
        mapped, _ = map_spans_to_tokens(kept, seq)
        es = self.encoder.encode_document(seq, mapped)
        return DocVectors(es.cls, es.mean, [v for _, v in es.chunks], seq.truncated)

    def embed_query(self, text: str) -> np.ndarray:
        seq = self.tokenizer.tokenize(text, prompt=self.prompt, max_len=self.max_len)
        return self.encoder.encode_document(seq).cls


class TeacherEmbedder:
    """A perfectly aligned student: every vector is the teacher's encoding of the text it covers."""

    def __init__(self, teacher):
        self.teacher = teacher
        self.dim = teacher.dim

    def embed_document(self, text: str, spans: Sequence[ChunkSpan]) -> DocVectors:
        whole = self.teacher.encode(text)
        chunks = [self.teacher.encode(text[s.char_start : s.char_end]) for s in spans]
        return DocVectors(whole, whole, chunks)

    def embed_query(self, text: str) -> np.ndarray:
        return self.teacher.encode(text)


def embed_corpus(
    docs: Iterable[tuple[str, str]],
    embedder: Embedder,
    mode: str,
    planner: Planner | Mapping[str, Sequence[ChunkSpan]] | None = None,
    single_vector: str = "cls",
    workers: int | None = None,
) -> list[DocEmbedding]:
    """Embed every document in ``mode``; chunk spans come from ``planner``.

    ``planner`` is either a callable ``(doc_id, text) -> spans`` or a mapping
    from doc_id to spans.  Single mode ignores chunks.  ``workers`` defaults
    to CHUNKALIGN_THREADS.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if single_vector not in ("cls", "mean"):
        raise ConfigError(f"single_vector must be 'cls' or 'mean', got {single_vector!r}")

    def spans_for(doc_id: str, text: str) -> Sequence[ChunkSpan]:
        if mode == SINGLE or planner is None:
            return ()
        return planner(doc_id, text) if callable(planner) else planner[doc_id]

    def one(item: tuple[str, str]) -> DocEmbedding:
        doc_id, text = item
        vecs = embedder.embed_document(text, spans_for(doc_id, text))
        if vecs.truncated:
            log.warning("document %s truncated to the encoder's maximum length", doc_id)
        if mode == SINGLE:
            v = vecs.cls if single_vector == "cls" else vecs.mean
            return DocEmbedding(doc_id, SINGLE, v[None, :], [single_vector], vecs.truncated)
        rows = np.vstack([vecs.cls[None, :]] + [c[None, :] for c in vecs.chunks])
        return DocEmbedding(doc_id, MULTI, rows, truncated=vecs.truncated)

    with ThreadPoolExecutor(max_workers=max(1, workers or worker_count())) as pool:
        return list(pool.map(one, list(docs)))


# ---------------------------------------------------------------- scoring


def score(query_vec: np.ndarray, doc: DocEmbedding) -> float:
    """Cosine for single-vector docs, best cosine over members for multi-vector docs."""
    q = np.asarray(query_vec, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != doc.dim:
        raise DimensionError(f"query of shape {q.shape} vs document {doc.doc_id} of dim {doc.dim}")
    # row-wise products keep each member's cosine independent of the others
    return float(np.max((doc.vectors * q).sum(axis=1)))


def rank(query_vec: np.ndarray, corpus: Sequence[DocEmbedding], k: int = 10) -> list[ScoredHit]:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    scored = sorted(((-score(query_vec, d), d.doc_id) for d in corpus))
    return [ScoredHit(doc_id, -neg, i + 1) for i, (neg, doc_id) in enumerate(scored[:k])]


def dcg(grades: Sequence[float]) -> float:
    return sum((2.0**g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades))


def ndcg_at_k(ranking: Sequence[str], qrels: Mapping[str, int], k: int = 10) -> float | None:
    """ndcg@k of a ranked doc-id list; ``None`` when the query has no relevant document."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ideal = dcg(sorted((g for g in qrels.values() if g > 0), reverse=True)[:k])
    if ideal == 0:
        return None
    return dcg([qrels.get(d, 0) for d in ranking[:k]]) / ideal


# ---------------------------------------------------------------- needle task


def count_pieces(text: str) -> int:
    """Tokens the tokenizer would produce before any byte fallback."""
    return len(_PIECES.findall(text))


def make_needle_task(
    num_docs: int,
    doc_length: int,
    seed: int = 0,
    generator: CorpusGenerator | None = None,
    needle_sentences: int = 2,
) -> EvalTask:
    """Long filler documents, each hiding one distinctive passage; queries repeat the passage.

    Filler comes from two topics and the needle from a third, so the
    passage is a local signal that a whole-document vector dilutes.
    ``doc_length`` is a lower bound in tokens.
    """
    gen = generator or CorpusGenerator()
    queries, corpus, qrels = [], [], []
    for i in range(num_docs):
        doc_id, qid = f"needle{i:04d}", f"q{i:04d}"
        rng = rng_for(seed, "needle", doc_id)
        picked = [int(t) for t in rng.choice(gen.n_topics, size=3, replace=False)]
        filler_topics, needle_topic = picked[:2], picked[2]
        needle = " ".join(gen.sentence(rng, [needle_topic]) for _ in range(needle_sentences))
        budget = max(doc_length - count_pieces(needle), 1)
        filler = []
        while sum(count_pieces(s) for s in filler) < budget:
            filler.append(gen.sentence(rng, filler_topics))
        depth = int(rng.integers(0, len(filler) + 1))
        parts = filler[:depth] + [needle] + filler[depth:]
        corpus.append((doc_id, " ".join(parts)))
        queries.append((qid, needle))
        qrels.append((qid, doc_id, 1))
    return EvalTask(queries, corpus, qrels)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    """Per-mode, per-query ndcg@10; ``skipped`` lists queries without relevant docs."""

    rows: list[tuple[str, str, float]] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    k: int = 10

    @property
    def empty(self) -> bool:
        return not self.rows

    def mean(self, mode: str) -> float:
        vals = [v for m, _, v in self.rows if m == mode]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def modes(self) -> list[str]:
        return list(dict.fromkeys(m for m, _, _ in self.rows))


def run_eval(
    task: EvalTask,
    embedder: Embedder,
    modes: Sequence[str] = MODES,
    planner: Planner | Mapping[str, Sequence[ChunkSpan]] | None = None,
    k: int = 10,
    single_vector: str = "cls",
) -> EvalReport:
    task.validate()
    rel = task.relevance()
    report = EvalReport(k=k)
    qvecs = {qid: embedder.embed_query(text) for qid, text in task.queries}
    for mode in dict.fromkeys(modes):
        corpus = embed_corpus(task.corpus, embedder, mode, planner, single_vector)
        for qid, _ in task.queries:
            hits = rank(qvecs[qid], corpus, k) if corpus else []
            value = ndcg_at_k([h.doc_id for h in hits], rel.get(qid, {}), k)
            if value is None:
                report.skipped.append((mode, qid))
            else:
                report.rows.append((mode, qid, value))
    return report


# ---------------------------------------------------------------- file formats


def _tsv_lines(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.strip():
                yield lineno, line.split("\t")


def read_id_text_tsv(path: str | Path) -> list[tuple[str, str]]:
    """``id<TAB>text`` lines.  Literal ``\\n`` in the text stands for a newline."""
    out = []
    for lineno, cols in _tsv_lines(path):
        if len(cols) != 2 or not cols[0]:
            raise ParseError(f"expected 'id<TAB>text', got {len(cols)} field(s)", line=lineno, path=str(path))
        out.append((cols[0], cols[1].replace("\\n", "\n")))
    return out


def write_id_text_tsv(path: str | Path, rows: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, text in rows:
            escaped = text.replace("\n", "\\n")
            fh.write(f"{i}\t{escaped}\n")


def read_qrels(path: str | Path) -> list[tuple[str, str, int]]:
    out = []
    for lineno, cols in _tsv_lines(path):
        if len(cols) != 3:
            raise ParseError(f"expected 'query_id<TAB>doc_id<TAB>grade', got {len(cols)} field(s)", line=lineno, path=str(path))
        try:
            grade = int(cols[2])
        except ValueError:
            raise ParseError(f"grade {cols[2]!r} is not an integer", line=lineno, path=str(path)) from None
        out.append((cols[0], cols[1], grade))
    return out


def write_qrels(path: str | Path, qrels: Iterable[tuple[str, str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q, d, g in qrels:
            fh.write(f"{q}\t{d}\t{g}\n")


def write_task(directory: str | Path, task: EvalTask) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_id_text_tsv(out / "corpus.tsv", task.corpus)
    write_id_text_tsv(out / "queries.tsv", task.queries)
    write_qrels(out / "qrels.tsv", task.qrels)


def read_task(corpus: str | Path, queries: str | Path, qrels: str | Path) -> EvalTask:
    return EvalTask(read_id_text_tsv(queries), read_id_text_tsv(corpus), read_qrels(qrels)).validate()


def write_report(path: str | Path, report: EvalReport) -> None:
    """CSV of per-query rows; one ``<mode>,__mean__,<value>`` summary row per mode."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "query_id", "ndcg_at_10"])
        for mode, qid, value in report.rows:
            w.writerow([mode, qid, repr(float(value))])
        for mode in report.modes:
            w.writerow([mode, "__mean__", repr(report.mean(mode))])
