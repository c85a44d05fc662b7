"""Finite-difference checks for every differentiable op and the full training loss.

Each op is probed on three random shapes.  A scalar is formed as
``sum(op(x) * W)`` with a fixed random ``W`` so every output entry carries
a distinct weight.  ``run_suite`` is used by the test suite and by the
``gradcheck`` command.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import numkernel as nk
from .chunker import ChunkSpan
from .distill.losses import cosine_loss_op, similarity_loss_op, total_loss_op
from .encoder.config import EncoderConfig
from .encoder.model import Encoder, rope_rotate
from .encoder.tokenizer import CLS, SEP, SPECIALS, TokenSequence
from .numkernel import Tensor2D

TOLERANCE = 1e-6
SHAPES = ((3, 4), (5, 3), (4, 7))


@dataclass(frozen=True)
class CheckResult:
    name: str
    shape: tuple[int, ...]
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _t(rng: np.random.Generator, shape, scale: float = 1.0) -> Tensor2D:
    return Tensor2D(scale * rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor2D, w: np.ndarray) -> Tensor2D:
    return nk.sum_all(nk.mul(out, Tensor2D(w)))


def _probe(name: str, shape, build: Callable[[Tensor2D], Tensor2D], x: Tensor2D, rng, coords=None) -> CheckResult:
    with nk.no_tape():
        w = rng.standard_normal(build(x).shape)
    err = nk.grad_check(lambda v: _weighted(build(v), w), x, coords=coords)
    return CheckResult(name, tuple(shape), err)


def _op_checks(rng: np.random.Generator) -> Iterator[CheckResult]:
    for r, c in SHAPES:
        shape = (r, c)
        other = _t(rng, (c, r + 1))
        yield _probe("matmul[a]", shape, lambda x: nk.matmul(x, other), _t(rng, shape), rng)
        left = _t(rng, (r + 1, r))
        yield _probe("matmul[b]", shape, lambda x: nk.matmul(left, x), _t(rng, shape), rng)
        yield _probe("transpose", shape, nk.transpose, _t(rng, shape), rng)
        same = _t(rng, shape)
        yield _probe("add", shape, lambda x: nk.add(x, same), _t(rng, shape), rng)
        yield _probe("add[self]", shape, lambda x: nk.add(x, x), _t(rng, shape), rng)
        bias = _t(rng, (1, c))
        yield _probe("add_row[x]", shape, lambda x: nk.add_row(x, bias), _t(rng, shape), rng)
        base = _t(rng, shape)
        yield _probe("add_row[bias]", (1, c), lambda b: nk.add_row(base, b), _t(rng, (1, c)), rng)
        yield _probe("mul", shape, lambda x: nk.mul(x, same), _t(rng, shape), rng)
        yield _probe("mul[self]", shape, lambda x: nk.mul(x, x), _t(rng, shape), rng)
        yield _probe("scale", shape, lambda x: nk.scale(x, -1.7), _t(rng, shape), rng)
        yield _probe("sum_all", shape, lambda x: nk.scale(nk.sum_all(x), 1.0), _t(rng, shape), rng)
        lo, hi = 0, max(1, c - 1)
        yield _probe("slice_cols", shape, lambda x: nk.slice_cols(x, lo, hi), _t(rng, shape), rng)
        extra = _t(rng, (r, 2))
        yield _probe("concat_cols", shape, lambda x: nk.concat_cols([extra, x, x]), _t(rng, shape), rng)
        below = _t(rng, (2, c))
        yield _probe("concat_rows", shape, lambda x: nk.concat_rows([x, below, x]), _t(rng, shape), rng)
        ids = list(rng.integers(0, r, size=r + 3))
        yield _probe("gather_rows", shape, lambda x: nk.gather_rows(x, ids), _t(rng, shape), rng)
        mask = rng.random(shape) < 0.3
        mask[:, 0] = False
        # a huge fill constant would swamp the central difference, so the bare op uses a small one
        yield _probe("masked_fill", shape, lambda x: nk.masked_fill(x, mask, -3.0), _t(rng, shape), rng)
        yield _probe(
            "softmax_rows", shape, lambda x: nk.softmax_rows(nk.masked_fill(x, mask)), _t(rng, shape), rng
        )
        gain, beta = _t(rng, (1, c)), _t(rng, (1, c))
        yield _probe("layer_norm[x]", shape, lambda x: nk.layer_norm(x, gain, beta), _t(rng, shape), rng)
        xs = _t(rng, shape)
        yield _probe("layer_norm[gain]", (1, c), lambda g: nk.layer_norm(xs, g, beta), _t(rng, (1, c)), rng)
        yield _probe("layer_norm[bias]", (1, c), lambda b: nk.layer_norm(xs, gain, b), _t(rng, (1, c)), rng)
        yield _probe("gelu", shape, nk.gelu, _t(rng, shape, 2.0), rng)
        yield _probe("l2_normalize_rows", shape, nk.l2_normalize_rows, _t(rng, shape), rng)
        s, e = (0, r) if r < 2 else (1, r)
        yield _probe("mean_rows", shape, lambda x: nk.mean_rows(x, s, e), _t(rng, shape), rng)
        even = (r, 2 * c)
        pos = np.arange(r) * 3
        yield _probe("rope_rotate", even, lambda x: rope_rotate(x, pos, 10_000.0), _t(rng, even), rng)
        target = rng.standard_normal(shape)
        target /= np.linalg.norm(target, axis=1, keepdims=True)
        yield _probe(
            "cosine_loss",
            shape,
            lambda x: cosine_loss_op(nk.l2_normalize_rows(x), target),
            _t(rng, shape),
            rng,
        )
        wide = rng.standard_normal((r, c + 3))
        yield _probe("similarity_loss", shape, lambda x: similarity_loss_op(x, wide), _t(rng, shape), rng)


TOY_GRAD_CONFIG = EncoderConfig(
    num_layers=3,
    model_dim=8,
    num_heads=2,
    ffn_dim=12,
    vocab_size=24,
    native_max_len=16,
    target_max_len=32,
    local_window=2,
    global_layer_period=2,
    init_std=0.3,
)


def _toy_sequence(rng: np.random.Generator, n_content: int, vocab: int) -> TokenSequence:
    cls_id, sep_id = SPECIALS.index(CLS), SPECIALS.index(SEP)
    ids = [cls_id] + [int(i) for i in rng.integers(len(SPECIALS), vocab, size=n_content)] + [sep_id]
    offsets = [(-1, -1)] + [(2 * i, 2 * i + 1) for i in range(n_content)] + [(-1, -1)]
    return TokenSequence(ids, offsets, has_cls=True, has_sep=True)


def _composition_checks(rng: np.random.Generator, coords: int) -> Iterator[CheckResult]:
    """Encoder forward, pooling and the weighted total loss, probed per parameter."""
    cfg = TOY_GRAD_CONFIG
    for n_content in (5, 7, 9):
        enc = Encoder.init(cfg, seed=int(rng.integers(1 << 30)))
        docs = []
        for k in range(2):
            seq = _toy_sequence(rng, n_content + k, cfg.vocab_size)
            mid = 1 + (n_content + k) // 2
            spans = [ChunkSpan(0, 1, 1, mid), ChunkSpan(0, 1, mid - 1, 1 + n_content + k)]
            docs.append((seq, spans))
        n_rows = sum(1 + len(s) for _, s in docs)
        t_cos = rng.standard_normal((n_rows, cfg.model_dim))
        t_cos /= np.linalg.norm(t_cos, axis=1, keepdims=True)
        t_sim = rng.standard_normal((n_rows, cfg.model_dim + 4))
        t_sim /= np.linalg.norm(t_sim, axis=1, keepdims=True)

        def loss(_x: Tensor2D) -> Tensor2D:
            parts = []
            for seq, spans in docs:
                pooled = enc.pool(enc.forward(seq.token_ids), seq, spans)
                parts += [pooled.cls, pooled.chunks]
            total, _, _ = total_loss_op(nk.concat_rows(parts), t_cos, t_sim, (1.0, 0.5))
            return total

        names = ["tok_emb", "layers.0.attn.q.weight", "layers.1.attn.k.weight", "layers.1.ffn.in.bias",
                 "layers.2.ln1.gain", "layers.2.attn.o.weight", "final_ln.bias"]
        for name in names:
            p = enc.params[name]
            err = nk.grad_check(loss, p, coords=coords, seed=n_content)
            yield CheckResult(f"encoder+total_loss[{name}]", (n_content,), err)


def run_suite(seed: int = 0, coords: int = 24) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return list(_op_checks(rng)) + list(_composition_checks(rng, coords))


def summarize(results: list[CheckResult], elapsed: float) -> str:
    bad = [r for r in results if not r.passed]
    lines = [f"{'FAIL' if not r.passed else 'ok  '} {r.name} {r.shape} err={r.error:.2e}" for r in results]
    lines.append(f"{len(results) - len(bad)}/{len(results)} checks passed in {elapsed:.1f}s")
    return "\n".join(lines)


def timed_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = run_suite(seed)
    return results, time.perf_counter() - t0
