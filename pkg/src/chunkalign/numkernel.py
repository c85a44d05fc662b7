"""Dense 2-D tensor kernel with hand-written gradient rules.

Every differentiable op computes its forward value with numpy and, when a
:class:`Tape` is active and some input requires a gradient, records a
closure that maps the output gradient to input gradients.  ``Tape.backward``
replays the records in reverse order, which is a valid reverse topological
order because ops can only consume tensors that already exist.

Training runs in float64 so finite-difference checks can be tight.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, OracleError

# tanh-approximation GELU constants (Hendrycks & Gimpel).
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_local = threading.local()
_faults: dict[str, float] = {}


class Tensor2D:
    """Row-major matrix of scalars plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor2D needs 1-D or 2-D data, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor2D":
        """Adopt ``arr`` without copying."""
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor2D{label}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor2D:
    return x if isinstance(x, Tensor2D) else Tensor2D(x)


class Tape:
    """Records ops for one backward pass.  Use as a context manager."""

    def __init__(self):
        self.records: list[tuple[Tensor2D, tuple[Tensor2D, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor2D, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(input) into ``.grad`` of every tensor that requires it."""
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward from non-scalar of shape {loss.shape} needs an explicit grad")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for out, inputs, rule in reversed(self.records):
            if out.grad is None:
                continue
            in_grads = rule(out.grad)
            for inp, g in zip(inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Suspend recording (used by finite-difference probes)."""
    saved = getattr(_local, "stack", None)
    _local.stack = []
    try:
        yield
    finally:
        _local.stack = saved


@contextlib.contextmanager
def corrupt_gradient(op_name: str, factor: float = 1.5):
    """Test hook: scale the backward rule of ``op_name`` by ``factor``."""
    _faults[op_name] = factor
    try:
        yield
    finally:
        _faults.pop(op_name, None)


def record_op(name: str, value: np.ndarray, inputs: Sequence[Tensor2D], rule: Callable) -> Tensor2D:
    """Wrap ``value`` as an op output and register its backward ``rule``.

    ``rule(out_grad)`` must return one gradient (or None) per input.  Other
    modules use this to define their own differentiable ops.
    """
    out = Tensor2D.wrap(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if name in _faults:
            clean, factor = rule, _faults[name]

            def rule(g):
                return tuple(None if x is None else x * factor for x in clean(g))

        tape.records.append((out, tuple(inputs), rule))
    return out


# ---------------------------------------------------------------- linear ops


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return record_op("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(x: Tensor2D) -> Tensor2D:
    return record_op("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_row(x: Tensor2D, bias: Tensor2D) -> Tensor2D:
    """Broadcast-add a 1×cols bias to every row."""
    if bias.shape != (1, x.cols):
        raise DimensionError(f"add_row: bias {bias.shape} does not fit rows of {x.shape}")
    return record_op("add_row", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return record_op("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor2D, s: float) -> Tensor2D:
    return record_op("scale", x.data * s, (x,), lambda g: (g * s,))


def sum_all(x: Tensor2D) -> Tensor2D:
    shape = x.shape
    return record_op("sum_all", np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


# ------------------------------------------------------------ structural ops


def slice_cols(x: Tensor2D, start: int, end: int) -> Tensor2D:
    if not 0 <= start < end <= x.cols:
        raise DimensionError(f"slice_cols [{start}:{end}) outside {x.shape}")
    shape = x.shape

    def rule(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[:, start:end] = g
        return (dx,)

    return record_op("slice_cols", x.data[:, start:end].copy(), (x,), rule)


def concat_cols(parts: Sequence[Tensor2D]) -> Tensor2D:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])
    return record_op(
        "concat_cols",
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        lambda g: tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


def concat_rows(parts: Sequence[Tensor2D]) -> Tensor2D:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])
    return record_op(
        "concat_rows",
        np.concatenate([p.data for p in parts], axis=0),
        tuple(parts),
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


def gather_rows(table: Tensor2D, ids: Sequence[int]) -> Tensor2D:
    """Embedding lookup; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise DimensionError(f"gather_rows: ids outside [0, {table.rows})")
    shape = table.shape

    def rule(g):
        dt = np.zeros(shape, dtype=g.dtype)
        np.add.at(dt, idx, g)
        return (dt,)

    return record_op("gather_rows", table.data[idx], (table,), rule)


def masked_fill(x: Tensor2D, mask: np.ndarray, value: float = -1e9) -> Tensor2D:
    """Replace entries where ``mask`` is True by a constant; they get zero gradient."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_fill: mask {mask.shape} vs tensor {x.shape}")
    out = np.where(mask, value, x.data)
    return record_op("masked_fill", out, (x,), lambda g: (np.where(mask, 0.0, g),))


# ----------------------------------------------------------- nonlinear ops


def softmax_rows(x: Tensor2D) -> Tensor2D:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record_op("softmax_rows", p, (x,), rule)


def layer_norm(x: Tensor2D, gain: Tensor2D, bias: Tensor2D, eps: float = 1e-5) -> Tensor2D:
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    if not eps > 0:
        raise DimensionError(f"layer_norm: eps must be positive, got {eps}")
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data

    def rule(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return record_op("layer_norm", xhat * G + bias.data, (x, gain, bias), rule)


def gelu(x: Tensor2D) -> Tensor2D:
    X = x.data
    t = np.tanh(GELU_C * (X + GELU_A * X**3))
    out = 0.5 * X * (1.0 + t)

    def rule(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * X * X)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * dt),)

    return record_op("gelu", out, (x,), rule)


def l2_normalize_rows(x: Tensor2D) -> Tensor2D:
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise DegenerateInputError(f"l2_normalize_rows: row {int(zero[0])} has zero norm")
    y = x.data / norms

    def rule(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return record_op("l2_normalize_rows", y, (x,), rule)


def mean_rows(x: Tensor2D, row_start: int, row_end: int) -> Tensor2D:
    """Mean of rows ``[row_start, row_end)`` as a 1×cols tensor."""
    if row_start >= row_end:
        raise DegenerateInputError(f"mean_rows: empty slice [{row_start}:{row_end})")
    if row_start < 0 or row_end > x.rows:
        raise DimensionError(f"mean_rows: slice [{row_start}:{row_end}) outside {x.rows} rows")
    n = row_end - row_start
    shape = x.shape

    def rule(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[row_start:row_end] = g / n
        return (dx,)

    return record_op("mean_rows", x.data[row_start:row_end].mean(axis=0, keepdims=True), (x,), rule)


# ------------------------------------------------------------ gradient check


def grad_check(
    f: Callable[[Tensor2D], Tensor2D],
    x: Tensor2D,
    step: float = 1e-5,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over the probed
    coordinates (all of them, or ``coords`` sampled ones).  ``f`` may close
    over ``x`` itself: probes perturb ``x.data`` in place and restore it.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x.data = np.ascontiguousarray(x.data)
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            out = f(x)
        if out.data.size != 1:
            raise DimensionError(f"grad_check needs a scalar map, got shape {out.shape}")
        tape.backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = was

    flat = x.data.reshape(-1)
    n = flat.size
    if coords is None or coords >= n:
        probe = np.arange(n)
    else:
        probe = np.random.default_rng(seed).choice(n, size=coords, replace=False)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    with no_tape():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + step
            hi = f(x).item()
            flat[i] = orig - step
            lo = f(x).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise OracleError(f"non-finite f at coordinate {int(i)}: f(+)={hi}, f(-)={lo}")
            numeric = (hi - lo) / (2.0 * step)
            a = a_flat[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def parameters_finite(tensors: Iterable[Tensor2D]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
