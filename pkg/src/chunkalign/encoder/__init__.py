from .config import LONG_CONTEXT_ROPE_THETA, TOY_DISTILL, EncoderConfig, scale_rope_theta, slowest_rope_period
from .model import EmbeddingSet, Encoder, PooledRows, attention_mask, encode_document, rope_rotate
from .tokenizer import TokenSequence, Tokenizer, truncate_text

__all__ = [
    "LONG_CONTEXT_ROPE_THETA",
    "TOY_DISTILL",
    "EmbeddingSet",
    "Encoder",
    "EncoderConfig",
    "PooledRows",
    "TokenSequence",
    "Tokenizer",
    "attention_mask",
    "encode_document",
    "rope_rotate",
    "scale_rope_theta",
    "slowest_rope_period",
    "truncate_text",
]
