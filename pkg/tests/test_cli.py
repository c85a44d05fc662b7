import csv
import dataclasses

import numpy as np
import pytest

from chunkalign import cli, retrieval
from chunkalign.encoder import Encoder, Tokenizer
from chunkalign.encoder.checkpoint import read_checkpoint
from chunkalign.errors import ConfigError, ParseError
from chunkalign.seeding import derive_seed

TINY_INI = """\
[run]
seed = 3

[paths]
corpus = data/train.tsv
held_corpus = data/held.tsv
spans = spans.tsv
checkpoint_dir = run
report_dir = reports
eval_corpus = data/needle/corpus.tsv
queries = data/needle/queries.tsv
qrels = data/needle/qrels.tsv

[synth]
num_docs = 16
held_docs = 4
needle_docs = 4
needle_length = 64
min_words = 20
max_words = 30

[encoder]
num_layers = 2
model_dim = 16
num_heads = 2
ffn_dim = 24
native_max_len = 64
target_max_len = 128
local_window = 4
global_layer_period = 2

[chunker]
size_min = 4
size_max = 12

[train]
batch_size = 4
warmup_steps = 2
epochs = 1
max_len = 64

[teacher]
dim = 16
"""


def write_config(tmp_path, extra=""):
    path = tmp_path / "run.ini"
    path.write_text(TINY_INI + extra)
    return path


@pytest.fixture()
def workdir(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    return tmp_path, cfg


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = write_config(tmp)
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return tmp, cfg


# --- config


def test_config_loads_and_resolves_paths(tmp_path):
    cfg = cli.load_config(write_config(tmp_path))
    assert cfg.seed == 3 and cfg.train.seed == 3 and cfg.chunker.seed == 3
    assert cfg.encoder.model_dim == 16 and cfg.chunker.size_max == 12
    assert cfg.path("corpus") == (tmp_path / "data/train.tsv").resolve()


def test_config_rejects_unknown_key_and_section(tmp_path):
    with pytest.raises(ConfigError):
        cli.load_config(write_config(tmp_path, "[extra]\nkey = 1\n"))
    p = tmp_path / "bad.ini"
    p.write_text("[encoder]\nwidth = 4\n")
    with pytest.raises(ConfigError, match="width"):
        cli.load_config(p)


def test_config_rejects_bad_values(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[encoder]\nnum_heads = 3\n")
    with pytest.raises(ConfigError):
        cli.load_config(p)
    p.write_text("[chunker]\np_recursive = lots\n")
    with pytest.raises(ConfigError):
        cli.load_config(p)


def test_unparseable_config(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("no section header\n")
    assert cli.main(["chunk", "--config", str(p)]) == 2


# --- chunk


def test_chunk_two_doc_fixture(tmp_path, capsys):
    cfg = write_config(tmp_path)
    corpus = tmp_path / "two.tsv"
    retrieval.write_id_text_tsv(corpus, [("d1", "one two three four five six seven eight nine ten"), ("d2", "a b c d e. f g h i j.")])
    assert cli.main(["chunk", "--config", str(cfg), "--corpus", str(corpus)]) == 0
    spans = cli.read_spans(tmp_path / "spans.tsv")
    assert set(spans) == {"d1", "d2"} and all(spans.values())
    assert "strategy mix" in capsys.readouterr().out


def test_chunk_rerun_byte_identical(workdir):
    tmp, cfg = workdir
    assert cli.main(["chunk", "--config", str(cfg)]) == 0
    first = (tmp / "spans.tsv").read_bytes()
    assert cli.main(["chunk", "--config", str(cfg)]) == 0
    assert (tmp / "spans.tsv").read_bytes() == first
    assert cli.main(["chunk", "--config", str(cfg), "--seed", "9"]) == 0
    assert (tmp / "spans.tsv").read_bytes() != first


def test_chunk_missing_corpus_is_io_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["chunk", "--config", str(cfg)]) == 2
    assert "train.tsv" in capsys.readouterr().err


# --- train


def test_lr_zero_checkpoint_equals_init(workdir):
    tmp, cfg = workdir
    cfg.write_text(cfg.read_text().replace("warmup_steps = 2\n", "warmup_steps = 2\npeak_lr = 0\n"))
    assert cli.main(["train", "--config", str(cfg)]) == 0
    run_cfg = cli.load_config(cfg)
    _, params, _ = read_checkpoint(tmp / "run" / "model.ckpt")
    tok = Tokenizer.load(tmp / "run" / "vocab.txt")
    init = Encoder.init(dataclasses.replace(run_cfg.encoder, vocab_size=tok.vocab_size), seed=derive_seed(3, "init"))
    assert set(params) == set(init.params)
    for k, p in init.params.items():
        assert np.array_equal(params[k], p.data.astype(np.float32).astype(params[k].dtype)), k  # checkpoints hold float32


def test_warmup_too_long_fails_before_work(workdir, capsys):
    tmp, cfg = workdir
    cfg.write_text(cfg.read_text().replace("warmup_steps = 2", "warmup_steps = 4"))
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "warmup" in capsys.readouterr().err
    assert not (tmp / "run").exists()


def test_train_rerun_byte_identical(trained, tmp_path):
    tmp, cfg = trained
    other = tmp_path / "again"
    other.mkdir()
    (other / "run.ini").write_text(cfg.read_text())
    (other / "data").symlink_to(tmp / "data")
    assert cli.main(["train", "--config", str(other / "run.ini")]) == 0
    for f in ("model.ckpt", "optimizer.ckpt", "metrics.csv", "vocab.txt"):
        assert (other / "run" / f).read_bytes() == (tmp / "run" / f).read_bytes(), f
    assert (other / "reports" / "alignment.csv").read_bytes() == (tmp / "reports" / "alignment.csv").read_bytes()


def test_train_writes_held_alignment(trained):
    tmp, _ = trained
    with open(tmp / "reports" / "alignment.csv") as fh:
        row = next(csv.DictReader(fh))
    assert int(row["docs"]) == 4 and -1 <= float(row["cls_cosine"]) <= 1


# --- encode


def test_encode_single_one_line(trained, tmp_path):
    tmp, cfg = trained
    one = tmp_path / "one.tsv"
    retrieval.write_id_text_tsv(one, [("solo", "some words about a topic")])
    out = tmp_path / "emb.tsv"
    assert cli.main(["encode", "--config", str(cfg), "--mode", "single", "--corpus", str(one), "--out", str(out)]) == 0
    rows = cli.read_embeddings(out)
    assert len(rows) == 1 and rows[0][:2] == ("solo", "cls")


def test_encode_multi_counts_and_round_trip(trained, tmp_path):
    tmp, cfg = trained
    out = tmp_path / "emb.tsv"
    assert cli.main(["encode", "--config", str(cfg), "--mode", "multi", "--out", str(out)]) == 0
    rows = cli.read_embeddings(out)
    run_cfg = cli.load_config(cfg)
    docs = cli.read_corpus(run_cfg.path("corpus"))
    encoder, tok = cli._load_model(run_cfg)
    embs = retrieval.embed_corpus(docs, retrieval.StudentEmbedder(encoder, tok), "multi", cli._planner(run_cfg, None))
    assert len(rows) == len(docs) + sum(e.vectors.shape[0] - 1 for e in embs)
    flat = [(e.doc_id, k, v) for e in embs for k, v in zip(e.kinds, e.vectors)]
    for (d, k, v), (d2, k2, v2) in zip(rows, flat):
        assert (d, k) == (d2, k2)
        assert np.max(np.abs(v - v2)) < 1e-6


def test_encode_missing_checkpoint(workdir, capsys):
    _, cfg = workdir
    assert cli.main(["encode", "--config", str(cfg)]) == 2
    assert "model.ckpt" in capsys.readouterr().err


# --- eval


def test_eval_writes_report(trained):
    tmp, cfg = trained
    assert cli.main(["eval", "--config", str(cfg)]) == 0
    lines = (tmp / "reports" / "report.csv").read_text().splitlines()
    assert lines[0] == "mode,query_id,ndcg_at_10"
    assert sum(",__mean__," in l for l in lines) == 2
    first = (tmp / "reports" / "report.csv").read_bytes()
    assert cli.main(["eval", "--config", str(cfg)]) == 0
    assert (tmp / "reports" / "report.csv").read_bytes() == first


def test_eval_malformed_qrels(trained, tmp_path, capsys):
    tmp, cfg = trained
    bad = tmp_path / "qrels.tsv"
    bad.write_text("q0000\tneedle0000\t1\nbroken line\n")
    text = cfg.read_text().replace("qrels = data/needle/qrels.tsv", f"qrels = {bad}")
    cfg2 = tmp / "bad_qrels.ini"
    cfg2.write_text(text)
    assert cli.main(["eval", "--config", str(cfg2)]) == 2
    assert ":2" in capsys.readouterr().err
    with pytest.raises(ParseError):
        retrieval.read_qrels(bad)


# --- gradcheck


def test_gradcheck_passes():
    assert cli.main(["gradcheck"]) == 0


def test_gradcheck_corrupted_rule_fails(capsys):
    assert cli.main(["gradcheck", "--corrupt-op", "gelu"]) == 1
    assert "FAIL" in capsys.readouterr().out
