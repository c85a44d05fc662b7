"""Command-line entry point: ``chunkalign <command> --config run.ini``.

Commands: synth (write synthetic corpora), chunk, train, encode, eval,
gradcheck.  The config is ``key = value`` text under ``[section]`` headers
(run, paths, encoder, chunker, train, teacher, tokenizer, synth).
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import retrieval
from .chunker import ChunkerConfig, ChunkSpan
from .distill.teacher import OracleTeacher, RecordTeacherSource, load_teacher_jsonl
from .distill.train import TrainConfig, evaluate_alignment, plan_document, prepare_corpus, train
from .encoder.checkpoint import load_encoder
from .encoder.config import EncoderConfig
from .encoder.tokenizer import Tokenizer
from .errors import ChunkAlignError, ConfigError, ParseError
from .seeding import derive_seed
from .synthetic import CorpusGenerator

log = logging.getLogger("chunkalign")

SPAN_FIELDS = ("doc_id", "strategy", "chunk_index", "char_start", "char_end")


@dataclass
class PathsConfig:
    corpus: str = "corpus.tsv"
    held_corpus: str = ""
    teacher: str = "oracle"  # or a teacher-embedding JSONL file
    plans: str = ""  # span file to train or encode with; empty = sample plans per document
    spans: str = "spans.tsv"  # where ``chunk`` writes its span records
    checkpoint_dir: str = "run"
    report_dir: str = "reports"
    eval_corpus: str = "needle/corpus.tsv"
    queries: str = "needle/queries.tsv"
    qrels: str = "needle/qrels.tsv"


@dataclass
class TeacherConfig:
    dim: int = 64
    buckets: int = 4096
    seed: int = 7


@dataclass
class TokenizerConfig:
    max_words: int = 0  # 0 = keep every word seen in the corpus
    min_count: int = 1


@dataclass
class SynthConfig:
    num_docs: int = 512
    held_docs: int = 64
    needle_docs: int = 64
    needle_length: int = 256  # tokens per needle document
    min_words: int = 70
    max_words: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "multi"
    single_vector: str = "cls"
    k: int = 10
    paths: PathsConfig = field(default_factory=PathsConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    chunker: ChunkerConfig = field(default_factory=ChunkerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def path(self, name: str) -> Path | None:
        value = getattr(self.paths, name)
        if not value:
            return None
        p = Path(value)
        return (p if p.is_absolute() else self.base_dir / p).resolve()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            chunker=dataclasses.replace(self.chunker, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def validate(self) -> "RunConfig":
        self.encoder.validate()
        self.chunker.validate()
        if self.mode not in retrieval.MODES:
            raise ConfigError(f"mode must be one of {retrieval.MODES}, got {self.mode!r}")
        if self.single_vector not in ("cls", "mean"):
            raise ConfigError(f"single_vector must be cls or mean, got {self.single_vector!r}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        return self


# ---------------------------------------------------------------- config file

_SECTIONS = {
    "paths": PathsConfig,
    "encoder": EncoderConfig,
    "chunker": ChunkerConfig,
    "train": TrainConfig,
    "teacher": TeacherConfig,
    "tokenizer": TokenizerConfig,
    "synth": SynthConfig,
}
_RUN_KEYS = ("seed", "mode", "single_vector", "k")


def _cast(template, raw: str, where: str):
    try:
        if isinstance(template, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(json.loads(raw))
        return raw
    except (ValueError, TypeError, json.JSONDecodeError):
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(template).__name__}") from None


def _section(cls, items: dict[str, str], section: str, defaults=None):
    base = defaults if defaults is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _cast(getattr(base, key), raw, f"[{section}] {key}")
    return dataclasses.replace(base, **updates)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().with_seed(0).validate()
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ParseError(f"config: {exc}", path=str(path)) from None
    cfg = RunConfig(base_dir=path.resolve().parent)
    updates = {}
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            for key, raw in items.items():
                if key not in _RUN_KEYS:
                    raise ConfigError(f"[run] unknown key {key!r}")
                updates[key] = _cast(getattr(cfg, key), raw, f"[run] {key}")
        elif section in _SECTIONS:
            updates[section] = _section(_SECTIONS[section], items, section, getattr(cfg, section))
        else:
            raise ConfigError(f"unknown config section [{section}]")
    cfg = dataclasses.replace(cfg, **updates)
    # one global seed feeds every component
    return cfg.with_seed(cfg.seed).validate()


# ---------------------------------------------------------------- file helpers


def read_corpus(path: Path | None) -> list[tuple[str, str]]:
    if path is None:
        raise ConfigError("no corpus path configured")
    return retrieval.read_id_text_tsv(path)


def write_spans(path: Path, records: Sequence[tuple[str, str, list[ChunkSpan]]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(SPAN_FIELDS) + "\n")
        for doc_id, strategy, spans in records:
            for i, s in enumerate(spans):
                fh.write(f"{doc_id}\t{strategy}\t{i}\t{s.char_start}\t{s.char_end}\n")


def read_spans(path: Path) -> dict[str, list[ChunkSpan]]:
    plans: dict[str, list[ChunkSpan]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            cols = line.rstrip("\n").split("\t")
            if lineno == 1 and tuple(cols) == SPAN_FIELDS:
                continue
            if not line.strip():
                continue
            try:
                doc_id, _, idx, start, end = cols
                idx, start, end = int(idx), int(start), int(end)
            except ValueError:
                raise ParseError(f"expected {len(SPAN_FIELDS)} tab-separated span fields", line=lineno, path=str(path)) from None
            spans = plans.setdefault(doc_id, [])
            if idx != len(spans):
                raise ParseError(f"chunk_index {idx} out of order for {doc_id}", line=lineno, path=str(path))
            spans.append(ChunkSpan(start, end))
    return plans


def _vec(v: np.ndarray) -> str:
    # %.9g round-trips float32 exactly
    return " ".join(f"{x:.9g}" for x in np.asarray(v, dtype=np.float32))


def read_embeddings(path: str | Path) -> list[tuple[str, str, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                doc_id, kind, values = line.rstrip("\n").split("\t")
                out.append((doc_id, kind, np.array([float(x) for x in values.split()], dtype=np.float32)))
            except ValueError:
                raise ParseError("expected doc_id<TAB>kind<TAB>vector", line=lineno, path=str(path)) from None
    return out


def _teacher(cfg: RunConfig, plans: dict[str, list[ChunkSpan]] | None):
    if cfg.paths.teacher == "oracle":
        return OracleTeacher(cfg.teacher.dim, cfg.teacher.buckets, cfg.teacher.seed)
    if plans is None:
        raise ConfigError("a teacher embedding file needs a fixed chunk plan ([paths] plans)")
    counts = {d: len(s) for d, s in plans.items()}
    return RecordTeacherSource(load_teacher_jsonl(cfg.path("teacher"), counts))


def _plans(cfg: RunConfig) -> dict[str, list[ChunkSpan]] | None:
    p = cfg.path("plans")
    return None if p is None else read_spans(p)


def _planner(cfg: RunConfig, plans):
    if plans is not None:
        return plans
    return lambda doc_id, text: plan_document(doc_id, text, cfg.chunker, cfg.seed)[1]


def _load_model(cfg: RunConfig):
    ckpt_dir = cfg.path("checkpoint_dir")
    ckpt, vocab = ckpt_dir / "model.ckpt", ckpt_dir / "vocab.txt"
    for p in (ckpt, vocab):
        if not p.exists():
            raise FileNotFoundError(f"missing {p}; run 'chunkalign train' first")
    return load_encoder(ckpt), Tokenizer.load(vocab)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    s = cfg.synth
    gen = CorpusGenerator()
    train_docs = gen.corpus(s.num_docs, derive_seed(cfg.seed, "synth-train"), (s.min_words, s.max_words))
    retrieval.write_id_text_tsv(_mkparent(cfg.path("corpus")), train_docs)
    wrote = [f"{len(train_docs)} training docs -> {cfg.path('corpus')}"]
    if cfg.path("held_corpus") is not None and s.held_docs:
        held = gen.corpus(s.held_docs, derive_seed(cfg.seed, "synth-held"), (s.min_words, s.max_words), prefix="held")
        retrieval.write_id_text_tsv(_mkparent(cfg.path("held_corpus")), held)
        wrote.append(f"{len(held)} held-out docs -> {cfg.path('held_corpus')}")
    if s.needle_docs:
        task = retrieval.make_needle_task(s.needle_docs, s.needle_length, derive_seed(cfg.seed, "synth-needle"), gen)
        retrieval.write_id_text_tsv(_mkparent(cfg.path("eval_corpus")), task.corpus)
        retrieval.write_id_text_tsv(_mkparent(cfg.path("queries")), task.queries)
        retrieval.write_qrels(_mkparent(cfg.path("qrels")), task.qrels)
        wrote.append(f"{len(task.corpus)}-doc needle task -> {cfg.path('eval_corpus').parent}")
    print("\n".join(wrote))
    return 0


def _mkparent(p: Path) -> Path:
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_chunk(cfg: RunConfig, corpus_path: Path | None = None) -> int:
    docs = read_corpus(corpus_path or cfg.path("corpus"))
    records = []
    for doc_id, text in docs:
        strategy, spans = plan_document(doc_id, text, cfg.chunker, cfg.seed)
        records.append((doc_id, strategy, spans))
    out = cfg.path("spans")
    write_spans(out, records)
    mix = Counter(r[1] for r in records)
    n = max(len(records), 1)
    summary = ", ".join(f"{k} {mix[k] / n:.3f}" for k in sorted(mix))
    print(f"{len(records)} docs, {sum(len(r[2]) for r in records)} spans -> {out}; strategy mix: {summary or 'n/a'}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    docs = read_corpus(cfg.path("corpus"))
    cfg.train.resolve(len(docs))  # fail fast before any work
    plans = _plans(cfg)
    teacher = _teacher(cfg, plans)
    tok = Tokenizer.build([t for _, t in docs], cfg.tokenizer.max_words or None, cfg.tokenizer.min_count)
    out = cfg.path("checkpoint_dir")

    def progress(row):
        if row["step"] % 16 == 0:
            log.info("step %d lr %.2e loss %.4f", row["step"], row["lr"], row["total_loss"])

    result = train(docs, teacher, cfg.train, cfg.encoder, tok, plans, cfg.chunker, out, progress)
    print(f"trained {result.config.total_steps} steps; final loss {result.metrics[-1]['total_loss']:.4f}; wrote {out}")
    held_path = cfg.path("held_corpus")
    if held_path is not None and held_path.exists() and cfg.paths.teacher == "oracle":
        held = prepare_corpus(read_corpus(held_path), tok, teacher, cfg.train.max_len, None, cfg.chunker, cfg.seed, cfg.train.prompt)
        cls_cos, chunk_cos = evaluate_alignment(result.encoder, held, cfg.seed)
        report = _mkparent(cfg.path("report_dir") / "alignment.csv")
        with open(report, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["docs", "cls_cosine", "chunk_cosine"])
            w.writerow([len(held), repr(cls_cos), repr(chunk_cos)])
        print(f"held-out alignment over {len(held)} docs: cls {cls_cos:.4f}, chunk {chunk_cos:.4f}")
    return 0


def cmd_encode(cfg: RunConfig, corpus_path: Path | None = None, out_path: Path | None = None) -> int:
    encoder, tok = _load_model(cfg)
    docs = read_corpus(corpus_path or cfg.path("corpus"))
    embedder = retrieval.StudentEmbedder(encoder, tok, prompt=cfg.train.prompt)
    embs = retrieval.embed_corpus(docs, embedder, cfg.mode, _planner(cfg, _plans(cfg)), cfg.single_vector)
    out = out_path or cfg.path("report_dir") / f"embeddings.{cfg.mode}.tsv"
    _mkparent(out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for e in embs:
            for kind, v in zip(e.kinds, e.vectors):
                fh.write(f"{e.doc_id}\t{kind}\t{_vec(v)}\n")
    print(f"{len(embs)} docs, {sum(len(e.kinds) for e in embs)} vectors ({cfg.mode}) -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, modes: Sequence[str]) -> int:
    task = retrieval.read_task(cfg.path("eval_corpus"), cfg.path("queries"), cfg.path("qrels"))
    encoder, tok = _load_model(cfg)
    embedder = retrieval.StudentEmbedder(encoder, tok, prompt=cfg.train.prompt)
    report = retrieval.run_eval(task, embedder, modes, _planner(cfg, _plans(cfg)), cfg.k, cfg.single_vector)
    out = _mkparent(cfg.path("report_dir") / "report.csv")
    retrieval.write_report(out, report)
    if report.empty:
        print("no scorable queries (empty query set or no relevant documents)")
    for mode in report.modes:
        print(f"{mode}: ndcg@{cfg.k} {report.mean(mode):.4f} over {sum(1 for m, _, _ in report.rows if m == mode)} queries")
    if report.skipped:
        print(f"skipped {len(report.skipped)} query/mode pairs without relevant documents")
    print(f"report -> {out}")
    return 0


def cmd_gradcheck(seed: int = 0, corrupt_op: str | None = None) -> int:
    from . import gradcheck
    from . import numkernel as nk

    if corrupt_op:
        with nk.corrupt_gradient(corrupt_op):
            results, elapsed = gradcheck.timed_suite(seed)
    else:
        results, elapsed = gradcheck.timed_suite(seed)
    print(gradcheck.summarize(results, elapsed))
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="run config file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    mode = argparse.ArgumentParser(add_help=False)
    mode.add_argument("--mode", choices=retrieval.MODES, default=None)

    parser = argparse.ArgumentParser(prog="chunkalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write synthetic training, held-out and needle data")
    p = sub.add_parser("chunk", parents=[common], help="sample a chunk plan per document and write span records")
    p.add_argument("--corpus", type=Path, default=None)
    sub.add_parser("train", parents=[common], help="distill the teacher into a fresh encoder")
    p = sub.add_parser("encode", parents=[common, mode], help="write document embeddings")
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p = sub.add_parser("eval", parents=[common, mode], help="ndcg@k on a retrieval task")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every gradient rule")
    p.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed or 0, args.corrupt_op)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if getattr(args, "mode", None):
            cfg = dataclasses.replace(cfg, mode=args.mode)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "chunk":
            return cmd_chunk(cfg, args.corpus)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "encode":
            return cmd_encode(cfg, args.corpus, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, [args.mode] if args.mode else list(retrieval.MODES))
    except (ChunkAlignError, OSError) as exc:
        print(f"chunkalign {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
