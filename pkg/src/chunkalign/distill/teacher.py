"""Teacher embedders and the teacher-embedding file format."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Protocol

import numpy as np

from ..errors import AlignmentError, DegenerateInputError, DimensionError, ParseError
from ..seeding import rng_for


class Teacher(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if not n > 0 or not np.isfinite(n):
        raise DegenerateInputError(f"{what}: cannot normalize vector of norm {n}")
    return v / n


class OracleTeacher:
    """Frozen stand-in teacher: hashed character trigrams under a seeded random projection."""

    def __init__(self, dim: int = 64, buckets: int = 4096, seed: int = 7):
        self.dim = dim
        self.buckets = buckets
        self.seed = seed
        self._proj = rng_for(seed, "oracle-teacher").standard_normal((buckets, dim))

    def _counts(self, text: str) -> np.ndarray:
        grams = [text[i : i + 3] for i in range(len(text) - 2)] or [text]
        idx = np.fromiter((zlib.crc32(g.encode("utf-8")) % self.buckets for g in grams), dtype=np.int64)
        return np.bincount(idx, minlength=self.buckets).astype(np.float64)

    def encode(self, text: str) -> np.ndarray:
        text = text.strip().lower()
        if not text:
            raise DegenerateInputError("teacher.encode: empty text")
        return _unit(self._counts(text) @ self._proj, "teacher.encode")

    def encode_many(self, texts: Iterable[str]) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])


@dataclass
class TeacherRecord:
    doc_id: str
    whole_embedding: np.ndarray
    chunk_embeddings: np.ndarray  # rows align with the document's chunk spans

    @property
    def teacher_dim(self) -> int:
        return int(self.whole_embedding.shape[0])


def teacher_record(teacher: Teacher, doc_id: str, text: str, chunk_texts: Iterable[str]) -> TeacherRecord:
    chunks = [teacher.encode(t) for t in chunk_texts]
    mat = np.stack(chunks) if chunks else np.zeros((0, teacher.dim))
    return TeacherRecord(doc_id, teacher.encode(text), mat)


def write_teacher_jsonl(path: str | Path, records: Iterable[TeacherRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {
                "doc_id": r.doc_id,
                "whole": [float(x) for x in np.asarray(r.whole_embedding, dtype=np.float32)],
                "chunks": [[float(x) for x in c] for c in np.asarray(r.chunk_embeddings, dtype=np.float32)],
            }
            fh.write(json.dumps(row) + "\n")


def load_teacher_jsonl(path: str | Path, chunk_counts: Mapping[str, int] | None = None) -> Iterator[TeacherRecord]:
    """Stream records from ``path``, L2-normalizing every vector.

    With ``chunk_counts`` (doc_id -> number of spans in the chunk plan) each
    record's chunk list must match its plan.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                doc_id = str(row["doc_id"])
                whole = np.asarray(row["whole"], dtype=np.float64)
                chunks = [np.asarray(c, dtype=np.float64) for c in row["chunks"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed teacher record: {exc}", line=lineno, path=str(path)) from exc
            if whole.ndim != 1 or whole.size == 0:
                raise ParseError("'whole' must be a non-empty flat list", line=lineno, path=str(path))
            if any(c.shape != whole.shape for c in chunks):
                raise DimensionError(f"{path}:{lineno}: chunk vectors differ in length from 'whole'")
            if chunk_counts is not None:
                if doc_id not in chunk_counts:
                    raise AlignmentError("document missing from the chunk plan", doc_id=doc_id)
                if len(chunks) != chunk_counts[doc_id]:
                    raise AlignmentError(
                        f"{len(chunks)} chunk embeddings but {chunk_counts[doc_id]} chunk spans", doc_id=doc_id
                    )
            mat = np.stack([_unit(c, f"{doc_id} chunk") for c in chunks]) if chunks else np.zeros((0, whole.size))
            yield TeacherRecord(doc_id, _unit(whole, doc_id), mat)


class RecordTeacherSource:
    """Looks up precomputed teacher records by document id."""

    def __init__(self, records: Iterable[TeacherRecord]):
        self.records = {r.doc_id: r for r in records}
        dims = {r.teacher_dim for r in self.records.values()}
        if len(dims) > 1:
            raise DimensionError(f"teacher records mix dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def __getitem__(self, doc_id: str) -> TeacherRecord:
        try:
            return self.records[doc_id]
        except KeyError:
            raise AlignmentError("no teacher record for document", doc_id=doc_id) from None
