"""Checkpoint files: a text header followed by float32 parameter blocks.

Layout::

    CHUNKALIGN-CKPT
    format_version=1
    kind=model
    <one key=value line per EncoderConfig field, then any extra fields>
    blocks=<count>
    <blank line>
    <name> <rows> <cols>\\n<rows*cols little-endian float32>   (repeated)
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CheckpointError
from .config import EncoderConfig

MAGIC = b"CHUNKALIGN-CKPT"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_checkpoint(
    path: str | Path,
    config: EncoderConfig,
    blocks: Mapping[str, np.ndarray],
    kind: str = "model",
    extra: Mapping[str, object] | None = None,
) -> None:
    lines = [MAGIC.decode(), f"format_version={FORMAT_VERSION}", f"kind={kind}"]
    for f in dataclasses.fields(config):
        lines.append(f"{f.name}={_fmt(getattr(config, f.name))}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={_fmt(v)}")
    lines.append(f"blocks={len(blocks)}")
    parts = [("\n".join(lines) + "\n\n").encode("ascii")]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.ndim != 2 or " " in name or "\n" in name:
            raise CheckpointError(f"block {name!r}: need a 2-D array and a name without whitespace")
        parts.append(f"{name} {arr.shape[0]} {arr.shape[1]}\n".encode("ascii"))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> tuple[EncoderConfig, dict[str, np.ndarray], dict[str, str]]:
    """Return the config, float64 blocks, and the raw header fields."""
    raw = Path(path).read_bytes()
    head_end = raw.find(b"\n\n")
    if not raw.startswith(MAGIC + b"\n") or head_end < 0:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or header)")
    header: dict[str, str] = {}
    for line in raw[len(MAGIC) + 1 : head_end].decode("ascii").split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        header[key] = value
    if header.get("format_version") != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")

    kwargs = {}
    for f in dataclasses.fields(EncoderConfig):
        if f.name not in header:
            raise CheckpointError(f"{path}: header lacks config field {f.name}")
        caster = float if isinstance(f.default, float) else int
        kwargs[f.name] = caster(header[f.name])
    config = EncoderConfig(**kwargs)

    try:
        n_blocks = int(header["blocks"])
    except (KeyError, ValueError):
        raise CheckpointError(f"{path}: header lacks a valid block count") from None
    pos = head_end + 2
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated before block {len(blocks)} header")
        try:
            name, rows, cols = raw[pos:nl].decode("ascii").split(" ")
            rows, cols = int(rows), int(cols)
        except ValueError:
            raise CheckpointError(f"{path}: malformed block header {raw[pos:nl]!r}") from None
        start, stop = nl + 1, nl + 1 + rows * cols * _F32.itemsize
        if stop > len(raw):
            raise CheckpointError(f"{path}: block {name} needs {stop} bytes, file has {len(raw)}")
        blocks[name] = np.frombuffer(raw[start:stop], dtype=_F32).reshape(rows, cols).astype(np.float64)
        pos = stop
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} unexpected trailing bytes")
    return config, blocks, header


def save_encoder(path: str | Path, encoder) -> None:
    write_checkpoint(path, encoder.config, {k: p.data for k, p in encoder.params.items()})


def load_encoder(path: str | Path):
    from ..numkernel import Tensor2D
    from .model import Encoder

    config, blocks, header = read_checkpoint(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, found kind={header.get('kind')}")
    params = {k: Tensor2D(v, requires_grad=True, name=k) for k, v in blocks.items()}
    return Encoder(config, params)
