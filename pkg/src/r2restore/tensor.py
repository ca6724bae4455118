"""Rank-4 tensors with reverse-mode automatic differentiation.

Every tensor is a (batch, channels, height, width) float array. Operations
record themselves on the active :class:`Tape` (when one is recording and a
participant requires gradients); :func:`backward` then replays the tape in
reverse to accumulate exact gradients.

The engine runs in two precisions: float64 for verification (gradient
checks, oracles) and float32 for training.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "concat_channels",
    "channel_scale",
    "global_avg_pool",
    "l1_loss",
    "pixel_shuffle",
    "pixel_unshuffle",
    "reduce_sum",
    "relu",
    "sigmoid",
    "softshrink",
    "backward",
]

_FLOAT_DTYPES = (np.float32, np.float64)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # One cheap reduction: a NaN or Inf anywhere makes the float64 sum
    # non-finite (finite float32 data cannot overflow a float64 accumulator).
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A rank-4 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _checked: bool = False):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ParameterError(f"tensor must be rank 4, got shape {arr.shape}")
        if not _checked:
            _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ParameterError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _checked=True)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"


def scalar(value: float, dtype=np.float64) -> Tensor:
    """A (1,1,1,1) tensor holding one value."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A tape records while used as a context manager
    and is *finished* once the context exits; :func:`backward` only accepts
    finished tapes. Confine each tape to one thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._recording = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise StateError("a tape is already recording on this thread")
        self._recording = True
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self._recording = False
        _tls.tape = None

    @property
    def recording(self) -> bool:
        return self._recording

    def clear(self) -> None:
        """Drop all recorded nodes (and with them the saved intermediates)."""
        self.nodes.clear()

    def _record(self, op, inputs, output, backward_fn) -> None:
        self.nodes.append(_Node(op, inputs, output, backward_fn))


def _make(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    _check_finite(out_data, op)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, _checked=True)
    tape = _active_tape()
    if tape is not None and tape.recording and requires:
        tape._record(op, tuple(inputs), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise activations


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return ((x.data > 0) * g,)

    return _make("relu", out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (out * (1.0 - out) * g,)

    return _make("sigmoid", out, (x,), bwd)


def softshrink(x: Tensor, lam: float = 0.5) -> Tensor:
    """v - lam for v > lam, v + lam for v < -lam, else 0."""
    if lam <= 0:
        raise ParameterError(f"softshrink threshold must be positive, got {lam}")
    d = x.data
    out = np.where(d > lam, d - lam, np.where(d < -lam, d + lam, 0.0)).astype(d.dtype)

    def bwd(g):
        return ((np.abs(d) > lam) * g,)

    return _make("softshrink", out, (x,), bwd)


# ---------------------------------------------------------------------------
# structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ParameterError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        return (g, g)

    return _make("add", out, (a, b), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ParameterError(f"concat needs matching n,h,w: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return (g[:, :ca], g[:, ca:])

    return _make("concat_channels", out, (a, b), bwd)


def channel_scale(f: Tensor, r: Tensor) -> Tensor:
    """Multiply every channel of ``f`` by its per-sample scalar from ``r``."""
    n, c, h, w = f.shape
    if r.shape != (n, c, 1, 1):
        raise ParameterError(f"channel_scale needs r of shape {(n, c, 1, 1)}, got {r.shape}")
    out = f.data * r.data

    def bwd(g):
        gf = g * r.data
        gr = (g * f.data).sum(axis=(2, 3), keepdims=True)
        return (gf, gr)

    return _make("channel_scale", out, (f, r), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h * w < 1:
        raise ParameterError("global_avg_pool needs a non-empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _make("global_avg_pool", out, (x,), bwd)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Depth-to-space: (n, c*s*s, h, w) -> (n, c, h*s, w*s).

    Channel c*s*s + a*s + b lands on spatial offset (a, b) within each
    s-by-s output cell; the rearrangement is an exact bijection.
    """
    if s < 2:
        raise ParameterError(f"pixel_shuffle factor must be >= 2, got {s}")
    n, cs2, h, w = x.shape
    if cs2 % (s * s) != 0:
        raise ParameterError(f"channels {cs2} not divisible by {s}*{s}")
    c = cs2 // (s * s)
    out = (x.data.reshape(n, c, s, s, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(n, c, h * s, w * s))

    def bwd(g):
        return (_unshuffle_array(g, s),)

    return _make("pixel_shuffle", np.ascontiguousarray(out), (x,), bwd)


def _unshuffle_array(arr: np.ndarray, s: int) -> np.ndarray:
    n, c, hs, ws = arr.shape
    h, w = hs // s, ws // s
    return np.ascontiguousarray(
        arr.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    n, c, hs, ws = x.shape
    if hs % s != 0 or ws % s != 0:
        raise ParameterError(f"spatial dims {(hs, ws)} not divisible by {s}")
    out = _unshuffle_array(x.data, s)

    def bwd(g):
        gt = (g.reshape(n, c, s, s, hs // s, ws // s)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(n, c, hs, ws))
        return (np.ascontiguousarray(gt),)

    return _make("pixel_unshuffle", out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute difference over every element; ties get gradient 0."""
    if pred.shape != gt.shape:
        raise ParameterError(f"l1_loss shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred.data - gt.data
    count = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=pred.dtype)).reshape(1, 1, 1, 1)

    def bwd(g):
        gp = np.sign(diff) * (float(g.reshape(-1)[0]) / count)
        return (gp.astype(pred.dtype), (-gp).astype(gt.dtype))

    return _make("l1_loss", out, (pred, gt), bwd)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.dtype)).reshape(1, 1, 1, 1)

    def bwd(g):
        return (np.full(x.shape, float(g.reshape(-1)[0]), dtype=x.dtype),)

    return _make("reduce_sum", out, (x,), bwd)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor,
             params: Iterable[Tensor] | None = None) -> None:
    """Accumulate gradients of ``loss`` into every requires_grad tensor.

    Tensors reached along several paths receive summed contributions;
    tensors in ``params`` that the loss never touched get a zero gradient.
    """
    if tape.recording:
        raise StateError("backward on an unfinished tape; leave the recording context first")
    if loss.data.size != 1:
        raise ParameterError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for tensor, ig in zip(node.inputs, input_grads):
            if ig is None or not tensor.requires_grad:
                continue
            have = grads.get(id(tensor))
            if have is None:
                grads[id(tensor)] = ig.copy() if ig is g else ig
            else:
                have += ig

    seen = set()
    for node in tape.nodes:
        for t in node.inputs + (node.output,):
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                g = grads.get(id(t))
                if g is not None:
                    t.grad = g
    if params is not None:
        for p in params:
            if p.requires_grad and id(p) not in grads and id(p) != id(loss):
                p.grad = np.zeros_like(p.data)
