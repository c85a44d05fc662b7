"""Toy bidirectional encoder: rotary attention with local/global layers.

Pre-norm blocks; every linear map carries a bias.  All pooled outputs
(CLS, per-chunk, mean) come from one forward pass over the full sequence,
so chunk vectors see their surrounding context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import numkernel as nk
from ..chunker import ChunkSpan
from ..errors import ConfigError, DimensionError, SpanError
from ..numkernel import Tensor2D
from .config import EncoderConfig
from .tokenizer import TokenSequence

_rope_cache: dict[tuple[int, float, int], tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(positions: np.ndarray, theta: float, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_rotate(x: Tensor2D, positions: Sequence[int] | np.ndarray, theta: float) -> Tensor2D:
    """Rotate column pairs (2i, 2i+1) of row t by ``positions[t] * theta**(-2i/head_dim)``."""
    if x.cols % 2:
        raise ConfigError(f"rope_rotate: head_dim {x.cols} is odd")
    if not theta > 0:
        raise ConfigError(f"rope_rotate: theta must be positive, got {theta}")
    pos = np.asarray(positions)
    if pos.shape != (x.rows,):
        raise DimensionError(f"rope_rotate: {pos.shape[0]} positions for {x.rows} rows")
    key = (x.rows, float(theta), x.cols)
    if np.array_equal(pos, np.arange(x.rows)):
        if key not in _rope_cache:
            _rope_cache[key] = _rope_tables(pos, theta, x.cols)
        cos, sin = _rope_cache[key]
    else:
        cos, sin = _rope_tables(pos, theta, x.cols)

    def rotate(a: np.ndarray, s: np.ndarray) -> np.ndarray:
        out = np.empty_like(a)
        even, odd = a[:, 0::2], a[:, 1::2]
        out[:, 0::2] = even * cos - odd * s
        out[:, 1::2] = even * s + odd * cos
        return out

    return nk.record_op("rope_rotate", rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),))


def attention_mask(layer_index: int, seq_len: int, config: EncoderConfig, cls_global: bool = True) -> np.ndarray:
    """Boolean ``seq_len × seq_len`` matrix, True where query i may attend key j.

    Local layers keep the band ``|i - j| <= local_window // 2``; position 0
    (CLS) attends and is attended everywhere when ``cls_global`` is set.
    """
    if config.is_global(layer_index):
        return np.ones((seq_len, seq_len), dtype=bool)
    idx = np.arange(seq_len)
    mask = np.abs(idx[:, None] - idx[None, :]) <= config.local_window // 2
    if cls_global:
        mask[0, :] = True
        mask[:, 0] = True
    return mask


@dataclass
class EmbeddingSet:
    """Pooled, unit-norm outputs for one document."""

    cls: np.ndarray
    chunks: list[tuple[ChunkSpan, np.ndarray]]
    mean: np.ndarray

    @property
    def chunk_matrix(self) -> np.ndarray:
        if not self.chunks:
            return np.zeros((0, self.cls.shape[0]))
        return np.stack([v for _, v in self.chunks])


@dataclass
class PooledRows:
    """Tape-tracked pooled rows; ``chunks`` is None when no spans were given."""

    cls: Tensor2D
    chunks: Tensor2D | None
    mean: Tensor2D


def _layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [p + n for n in (
        "ln1.gain", "ln1.bias", "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
        "attn.v.weight", "attn.v.bias", "attn.o.weight", "attn.o.bias",
        "ln2.gain", "ln2.bias", "ffn.in.weight", "ffn.in.bias", "ffn.out.weight", "ffn.out.bias",
    )]


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, int]]:
    d, f = config.model_dim, config.ffn_dim
    shapes = {"tok_emb": (config.vocab_size, d)}
    for i in range(config.num_layers):
        names = _layer_names(i)
        dims = [(1, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d),
                (1, d), (1, d), (d, f), (1, f), (f, d), (1, d)]
        shapes.update(zip(names, dims))
    shapes["final_ln.gain"] = (1, d)
    shapes["final_ln.bias"] = (1, d)
    return shapes


def _layer_index(name: str) -> int | None:
    parts = name.split(".")
    return int(parts[1]) if parts[0] == "layers" else None


class Encoder:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor2D]):
        config.validate()
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise DimensionError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "Encoder":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gain"):
                arr = np.ones(shape)
            elif name.endswith(".bias"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, config.init_std, size=shape)
                layer = _layer_index(name)
                if (
                    config.local_value_identity
                    and layer is not None
                    and not config.is_global(layer)
                    and name.endswith((".attn.v.weight", ".attn.o.weight"))
                ):
                    arr += config.local_value_identity * np.eye(shape[0], shape[1])
            params[name] = Tensor2D(arr, requires_grad=True, name=name)
        return cls(config, params)

    def parameters(self) -> list[Tensor2D]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def with_config(self, config: EncoderConfig) -> "Encoder":
        """Same weights under a new (shape-compatible) config, e.g. after theta scaling."""
        return Encoder(config, self.params)

    # ------------------------------------------------------------ forward

    def _attention(self, h: Tensor2D, layer: int) -> Tensor2D:
        cfg, P = self.config, self.params
        pre = f"layers.{layer}.attn."
        q = nk.add_row(nk.matmul(h, P[pre + "q.weight"]), P[pre + "q.bias"])
        k = nk.add_row(nk.matmul(h, P[pre + "k.weight"]), P[pre + "k.bias"])
        v = nk.add_row(nk.matmul(h, P[pre + "v.weight"]), P[pre + "v.bias"])
        T, hd = h.rows, cfg.head_dim
        positions = np.arange(T)
        if cfg.is_global(layer):
            theta, blocked = cfg.global_rope_theta, None
        else:
            theta, blocked = cfg.local_rope_theta, ~attention_mask(layer, T, cfg)
            if not blocked.any():
                blocked = None
        scale = 1.0 / math.sqrt(hd)
        heads = []
        for j in range(cfg.num_heads):
            a, b = j * hd, (j + 1) * hd
            qh = rope_rotate(nk.slice_cols(q, a, b), positions, theta)
            kh = rope_rotate(nk.slice_cols(k, a, b), positions, theta)
            scores = nk.scale(nk.matmul(qh, nk.transpose(kh)), scale)
            if blocked is not None:
                scores = nk.masked_fill(scores, blocked)
            heads.append(nk.matmul(nk.softmax_rows(scores), nk.slice_cols(v, a, b)))
        att = heads[0] if len(heads) == 1 else nk.concat_cols(heads)
        return nk.add_row(nk.matmul(att, P[pre + "o.weight"]), P[pre + "o.bias"])

    def forward(self, token_ids: Sequence[int]) -> Tensor2D:
        """Contextual token embeddings, one row per position."""
        cfg, P = self.config, self.params
        if len(token_ids) > cfg.target_max_len:
            raise DimensionError(f"sequence of {len(token_ids)} tokens exceeds target_max_len {cfg.target_max_len}")
        x = nk.gather_rows(P["tok_emb"], token_ids)
        for i in range(cfg.num_layers):
            pre = f"layers.{i}."
            h = nk.layer_norm(x, P[pre + "ln1.gain"], P[pre + "ln1.bias"], cfg.ln_eps)
            x = nk.add(x, self._attention(h, i))
            h = nk.layer_norm(x, P[pre + "ln2.gain"], P[pre + "ln2.bias"], cfg.ln_eps)
            f = nk.gelu(nk.add_row(nk.matmul(h, P[pre + "ffn.in.weight"]), P[pre + "ffn.in.bias"]))
            x = nk.add(x, nk.add_row(nk.matmul(f, P[pre + "ffn.out.weight"]), P[pre + "ffn.out.bias"]))
        return nk.layer_norm(x, P["final_ln.gain"], P["final_ln.bias"], cfg.ln_eps)

    def pool(self, hidden: Tensor2D, seq: TokenSequence, spans: Sequence[ChunkSpan] = ()) -> PooledRows:
        lo, hi = seq.content_start, seq.content_end
        rows = []
        for span in spans:
            if not (lo <= span.token_start < span.token_end <= hi):
                raise SpanError(f"chunk span {span} outside content tokens [{lo}, {hi})")
            rows.append(nk.mean_rows(hidden, span.token_start, span.token_end))
        chunks = None
        if rows:
            chunks = nk.l2_normalize_rows(rows[0] if len(rows) == 1 else nk.concat_rows(rows))
        cls = nk.l2_normalize_rows(nk.mean_rows(hidden, 0, 1))
        mean = nk.l2_normalize_rows(nk.mean_rows(hidden, lo, hi))
        return PooledRows(cls=cls, chunks=chunks, mean=mean)

    def encode_document(self, seq: TokenSequence, spans: Sequence[ChunkSpan] = ()) -> EmbeddingSet:
        """Inference-only pooled outputs; nothing is recorded."""
        with nk.no_tape():
            pooled = self.pool(self.forward(seq.token_ids), seq, spans)
        chunk_vecs = [] if pooled.chunks is None else list(pooled.chunks.data)
        return EmbeddingSet(
            cls=pooled.cls.data[0].copy(),
            chunks=[(s, v.copy()) for s, v in zip(spans, chunk_vecs)],
            mean=pooled.mean.data[0].copy(),
        )


def encode_document(tokens: TokenSequence, chunk_spans: Sequence[ChunkSpan], encoder: Encoder) -> EmbeddingSet:
    return encoder.encode_document(tokens, chunk_spans)
