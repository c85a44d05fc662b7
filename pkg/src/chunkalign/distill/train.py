"""Chunk-alignment training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .. import numkernel as nk
from ..chunker import DESK_CHUNKER, ChunkerConfig, ChunkSpan, chunk_document, map_spans_to_tokens, sample_chunk_plan
from ..encoder import Encoder, EncoderConfig, TokenSequence, Tokenizer, truncate_text
from ..encoder.checkpoint import save_encoder, write_checkpoint
from ..errors import ChunkAlignError, ConfigError, DimensionError, TrainingError
from ..seeding import derive_seed, rng_for
from .losses import total_loss_op
from .optim import OptimizerState, lr_at, stable_adamw_step
from .teacher import RecordTeacherSource, Teacher

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "cosine_loss", "similarity_loss", "total_loss")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.  Defaults are the desk-scale run; see ``PRODUCTION_TRAIN``.

    ``total_steps = 0`` means ``epochs * ceil(num_docs / batch_size)``.
    """

    batch_size: int = 8
    peak_lr: float = 1e-4
    warmup_steps: int = 50
    total_steps: int = 0
    epochs: int = 2
    weight_decay: float = 0.0
    max_len: int = 128
    w_cos: float = 1.0
    w_sim: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    clip_threshold: float = 1.0
    prompt: str = ""

    def resolve(self, num_docs: int) -> "TrainConfig":
        """Fill in ``total_steps`` and check the invariants."""
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not (self.peak_lr >= 0 and math.isfinite(self.peak_lr)):
            raise ConfigError(f"peak_lr must be finite and non-negative, got {self.peak_lr}")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")
        total = self.total_steps or self.epochs * math.ceil(num_docs / self.batch_size)
        if not 0 <= self.warmup_steps < total:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) must be below total_steps ({total})")
        return dataclasses.replace(self, total_steps=total)

    def lr(self, step: int) -> float:
        return lr_at(step, self.peak_lr, self.warmup_steps, self.total_steps)


# Production settings from the original run; unusable at desk scale but kept as a preset.
PRODUCTION_TRAIN = TrainConfig(batch_size=64, peak_lr=1e-4, warmup_steps=2000, epochs=2, max_len=2048)


@dataclass
class PreparedDoc:
    doc_id: str
    text: str
    seq: TokenSequence
    spans: list[ChunkSpan]
    teacher_whole: np.ndarray
    teacher_chunks: np.ndarray  # one row per entry of ``spans``
    strategy: str = ""

    @property
    def teacher_rows(self) -> np.ndarray:
        return np.vstack([self.teacher_whole[None, :], self.teacher_chunks])


def plan_document(doc_id: str, text: str, chunker: ChunkerConfig, seed: int) -> tuple[str, list[ChunkSpan]]:
    plan = sample_chunk_plan(rng_for(seed, "chunk-plan", doc_id), chunker)
    return plan.strategy, chunk_document(text, plan, chunker)


def prepare_document(
    doc_id: str,
    text: str,
    tokenizer: Tokenizer,
    teacher: Teacher | RecordTeacherSource,
    max_len: int,
    spans: Sequence[ChunkSpan] | None = None,
    chunker: ChunkerConfig = DESK_CHUNKER,
    seed: int = 0,
    prompt: str = "",
) -> PreparedDoc:
    """Truncate, chunk, map to tokens and attach teacher targets for one document.

    Precomputed ``spans`` (from a chunk plan file) are filtered to those that
    fit the truncated text; their teacher vectors are selected by index.
    """
    short = truncate_text(text, tokenizer, max_len, prompt or None)
    strategy = ""
    if spans is None:
        strategy, spans = plan_document(doc_id, short, chunker, seed)
    indexed = [(i, s) for i, s in enumerate(spans) if s.char_end <= len(short)]
    seq = tokenizer.tokenize(short, prompt=prompt or None, max_len=max_len)
    mapped, dropped = map_spans_to_tokens([s for _, s in indexed], seq)
    keep = [indexed[i][0] for i in range(len(indexed)) if i not in set(dropped)]
    if isinstance(teacher, RecordTeacherSource):
        rec = teacher[doc_id]
        whole, chunks = rec.whole_embedding, rec.chunk_embeddings[keep]
    else:
        whole = teacher.encode(short)
        chunks = np.stack([teacher.encode(short[s.char_start : s.char_end]) for s in mapped]) if mapped else np.zeros((0, teacher.dim))
    return PreparedDoc(doc_id, short, seq, mapped, whole, chunks, strategy)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CHUNKALIGN_THREADS", "1")))
    except ValueError:
        return 1


def prepare_corpus(
    corpus: Iterable[tuple[str, str]],
    tokenizer: Tokenizer,
    teacher: Teacher | RecordTeacherSource,
    max_len: int,
    plans: Mapping[str, Sequence[ChunkSpan]] | None = None,
    chunker: ChunkerConfig = DESK_CHUNKER,
    seed: int = 0,
    prompt: str = "",
) -> list[PreparedDoc]:
    corpus = list(corpus)

    def one(item: tuple[str, str]) -> PreparedDoc:
        doc_id, text = item
        try:
            spans = None if plans is None else plans[doc_id]
            return prepare_document(doc_id, text, tokenizer, teacher, max_len, spans, chunker, seed, prompt)
        except KeyError:
            raise TrainingError("document missing from chunk plan", doc_id=doc_id) from None
        except ChunkAlignError as exc:
            raise TrainingError(str(exc), doc_id=doc_id) from exc

    # map() keeps input order, so results do not depend on the worker count
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(one, corpus))


def teacher_projection(teacher_dim: int, model_dim: int, seed: int) -> np.ndarray | None:
    """Frozen map from teacher width to student width for the cosine term (None if equal)."""
    if teacher_dim == model_dim:
        return None
    rng = rng_for(seed, "teacher-projection")
    return rng.standard_normal((teacher_dim, model_dim)) / math.sqrt(model_dim)


def _normalize(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@dataclass
class AlignmentBatch:
    doc_ids: list[str]
    student_rows: nk.Tensor2D
    teacher_rows: np.ndarray
    row_map: list[tuple[str, str]] = field(default_factory=list)


def assemble_batch(encoder: Encoder, docs: Sequence[PreparedDoc]) -> AlignmentBatch:
    """Forward every document and stack its normalized CLS and chunk rows."""
    parts, teach, row_map = [], [], []
    for doc in docs:
        pooled = encoder.pool(encoder.forward(doc.seq.token_ids), doc.seq, doc.spans)
        parts.append(pooled.cls)
        row_map.append((doc.doc_id, "cls"))
        if pooled.chunks is not None:
            parts.append(pooled.chunks)
            row_map.extend((doc.doc_id, f"chunk_{i}") for i in range(pooled.chunks.rows))
        teach.append(doc.teacher_rows)
    student = parts[0] if len(parts) == 1 else nk.concat_rows(parts)
    return AlignmentBatch([d.doc_id for d in docs], student, np.vstack(teach), row_map)


@dataclass
class TrainResult:
    encoder: Encoder
    optimizer: OptimizerState
    metrics: list[dict[str, float]]
    config: TrainConfig


def fit(
    encoder: Encoder,
    docs: Sequence[PreparedDoc],
    cfg: TrainConfig,
    on_step: Callable[[dict[str, float]], None] | None = None,
) -> TrainResult:
    """Run the optimization loop in place on ``encoder``."""
    if not docs:
        raise ConfigError("no training documents")
    cfg = cfg.resolve(len(docs))
    dims = {d.teacher_whole.shape[0] for d in docs}
    if len(dims) != 1:
        raise DimensionError(f"teacher vectors of mixed widths {sorted(dims)}")
    proj = teacher_projection(dims.pop(), encoder.config.model_dim, cfg.seed)
    state = OptimizerState(betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, clip_threshold=cfg.clip_threshold)
    metrics: list[dict[str, float]] = []
    per_epoch = math.ceil(len(docs) / cfg.batch_size)
    step = 0
    epoch = 0
    while step < cfg.total_steps:
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(docs))
        for b in range(per_epoch):
            if step >= cfg.total_steps:
                break
            step += 1
            batch_docs = [docs[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            lr = cfg.lr(step)
            current = batch_docs[0].doc_id
            try:
                encoder.zero_grad()
                with nk.Tape() as tape:
                    batch = assemble_batch(encoder, batch_docs)
                    t_sim = batch.teacher_rows
                    t_cos = t_sim if proj is None else _normalize(t_sim @ proj)
                    loss, cos_v, sim_v = total_loss_op(batch.student_rows, t_cos, t_sim, (cfg.w_cos, cfg.w_sim))
                tape.backward(loss)
                names = list(encoder.params)
                new = stable_adamw_step(
                    {n: encoder.params[n].data for n in names},
                    {n: encoder.params[n].grad for n in names},
                    state,
                    lr,
                    cfg.weight_decay,
                )
            except ChunkAlignError as exc:
                raise TrainingError(str(exc), step=step, doc_id=current) from exc
            for n in names:
                encoder.params[n].data = new[n]
            row = {"step": step, "lr": lr, "cosine_loss": cos_v, "similarity_loss": sim_v, "total_loss": loss.item()}
            if not all(math.isfinite(v) for v in row.values()):
                raise TrainingError(f"non-finite loss {row}", step=step, doc_id=current)
            metrics.append(row)
            if on_step is not None:
                on_step(row)
        epoch += 1
    return TrainResult(encoder, state, metrics, cfg)


def train(
    corpus: Iterable[tuple[str, str]],
    teacher: Teacher | RecordTeacherSource,
    train_cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    tokenizer: Tokenizer,
    plans: Mapping[str, Sequence[ChunkSpan]] | None = None,
    chunker: ChunkerConfig = DESK_CHUNKER,
    out_dir: str | Path | None = None,
    on_step: Callable[[dict[str, float]], None] | None = None,
) -> TrainResult:
    """Prepare the corpus, initialize an encoder from the seed, and fit it.

    With ``out_dir`` the checkpoint, optimizer sidecar, vocabulary and
    metrics CSV are written there.
    """
    if enc_cfg.vocab_size != tokenizer.vocab_size:
        enc_cfg = dataclasses.replace(enc_cfg, vocab_size=tokenizer.vocab_size)
    docs = prepare_corpus(corpus, tokenizer, teacher, train_cfg.max_len, plans, chunker, train_cfg.seed, train_cfg.prompt)
    encoder = Encoder.init(enc_cfg, seed=derive_seed(train_cfg.seed, "init"))
    result = fit(encoder, docs, train_cfg, on_step)
    if out_dir is not None:
        save_run(out_dir, result, tokenizer)
    return result


def save_run(out_dir: str | Path, result: TrainResult, tokenizer: Tokenizer) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_encoder(out / "model.ckpt", result.encoder)
    save_optimizer(out / "optimizer.ckpt", result.encoder.config, result.optimizer)
    tokenizer.save(out / "vocab.txt")
    write_metrics_csv(out / "metrics.csv", result.metrics)


def save_optimizer(path: str | Path, config: EncoderConfig, state: OptimizerState) -> None:
    blocks = {}
    for name in state.m:
        blocks[f"m.{name}"] = state.m[name]
        blocks[f"v.{name}"] = state.v[name]
    extra = {
        "step": state.step,
        "beta1": float(state.betas[0]),
        "beta2": float(state.betas[1]),
        "eps": float(state.eps),
        "clip_threshold": float(state.clip_threshold),
    }
    write_checkpoint(path, config, blocks, kind="optimizer", extra=extra)


def write_metrics_csv(path: str | Path, metrics: Iterable[Mapping[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in metrics:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])


def evaluate_alignment(encoder: Encoder, docs: Sequence[PreparedDoc], seed: int = 0) -> tuple[float, float]:
    """Mean cosine of student CLS vs teacher whole-text and student chunk vs teacher chunk."""
    proj = teacher_projection(docs[0].teacher_whole.shape[0], encoder.config.model_dim, seed)
    cls_cos, chunk_cos = [], []
    for doc in docs:
        es = encoder.encode_document(doc.seq, doc.spans)
        t = doc.teacher_rows if proj is None else _normalize(doc.teacher_rows @ proj)
        cls_cos.append(float(es.cls @ t[0]))
        if es.chunks:
            chunk_cos.extend((es.chunk_matrix * t[1:]).sum(axis=1).tolist())
    return float(np.mean(cls_cos)), float(np.mean(chunk_cos)) if chunk_cos else float("nan")
