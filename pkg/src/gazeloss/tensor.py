"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of operations needed by small valid-padding convolutional
networks and the gaze loss are provided. Every tensor wraps a contiguous
numpy array in the current default dtype (float32 unless switched to float64
for tight gradient checks).

Graph nodes are numbered in creation order; :func:`backward` visits the
reachable nodes in reverse creation order, which is a valid reverse
topological order because a node can only depend on nodes created before it.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, LabelIndexError

__all__ = [
    "Tensor",
    "backward",
    "conv2d",
    "relu",
    "leaky_relu",
    "fully_connected",
    "softmax_cross_entropy",
    "add",
    "mul",
    "scale",
    "tsum",
    "reshape",
    "make_op",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "record_kinks",
    "note_kink",
]

_DTYPE = np.float32
_ids = itertools.count()
_kink_log: Optional[list] = None


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def record_kinks():
    """Collect the discrete branch decisions taken by non-smooth ops.

    Inside the block, relu/leaky_relu masks and the min/max/smoothing choices
    of the gaze-map normalization are appended to the yielded list. Two
    forward passes with equal logs traverse the same smooth piece, so a
    finite difference across them is meaningful.
    """
    global _kink_log
    previous = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


def note_kink(*items) -> None:
    if _kink_log is not None:
        for item in items:
            _kink_log.append(np.asarray(item).tobytes())


class Tensor:
    """N-d array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap the result of a forward computation as a graph node.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
    parent, in order. Parents that do not require grad are still passed so
    the callback can index them positionally; their gradients are dropped.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate across calls; use ``zero_grad`` between steps.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar loss tensor, got shape {shape}")
    if not loss.requires_grad:
        return

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    pending = {loss._id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = pending.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = pg


# --- elementwise and structural ops -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.data.dtype.type(factor)
    return make_op(x.data * f, (x,), lambda g: (g * f,))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def _back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_op(out, (x,), _back)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_kink(mask)
    return make_op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0
    note_kink(mask)
    factor = np.where(mask, 1.0, slope).astype(x.data.dtype)
    return make_op(x.data * factor, (x,), lambda g: (g * factor,))


# --- layers -------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Optional[Tensor] = None) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, kH, kW]``. The output spatial size is
    ``floor((H - kH) / stride) + 1`` (same for width).
    """
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-d [C_out, C_in, kH, kW], got {kernel.shape}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be [C_in, H, W] or [N, C_in, H, W], got {x.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ContractError(f"conv2d: stride must be a positive integer, got {stride!r}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c_in, h, w = xd.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d: channel axis mismatch, input C_in={c_in} but kernel C_in={k_in}")
    if kh > h:
        raise DimensionError(f"conv2d: height axis mismatch, kernel kH={kh} exceeds input H={h}")
    if kw > w:
        raise DimensionError(f"conv2d: width axis mismatch, kernel kW={kw} exceeds input W={w}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match C_out={c_out}")

    windows = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    wmat = kernel.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if not batched:
        out = out[0]

    def _back(g):
        g2 = (g if batched else g[None]).transpose(0, 2, 3, 1).reshape(-1, c_out)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # channels-last scatter keeps the inner copies contiguous
            w_last = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c_in, c_out)
            dcols = (g2 @ w_last.T).reshape(n, ho, wo, kh, kw, c_in)
            gx_last = np.zeros((n, h, w, c_in), dtype=xd.dtype)
            h_span = stride * (ho - 1) + 1
            w_span = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gx_last[:, i : i + h_span : stride, j : j + w_span : stride, :] += dcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gx_last.transpose(0, 3, 1, 2))
            if not batched:
                gx = gx[0]
        return (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, parents, _back)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for ``x`` of shape ``[n]`` or ``[N, n]``."""
    if weight.ndim != 2:
        raise DimensionError(f"fully_connected: weight must be 2-d [m, n], got {weight.shape}")
    m, n_in = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n_in:
        raise DimensionError(f"fully_connected: input feature axis {x.shape} does not match weight n={n_in}")
    if bias.shape != (m,):
        raise DimensionError(f"fully_connected: bias shape {bias.shape} does not match m={m}")
    out = x.data @ weight.data.T + bias.data

    def _back(g):
        gx = g @ weight.data if x.requires_grad else None
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return (gx, gw, gb)

    return make_op(out, (x, weight, bias), _back)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log-softmax probability of ``label``.

    Batched logits ``[N, k]`` take an integer array of labels and return the
    summed loss over the batch.
    """
    z = logits.data
    if z.ndim not in (1, 2):
        raise DimensionError(f"softmax_cross_entropy: logits must be [k] or [N, k], got {z.shape}")
    batched = z.ndim == 2
    z2 = z if batched else z[None]
    k = z2.shape[1]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (z2.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: {labels.size} labels for {z2.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelIndexError(f"softmax_cross_entropy: label out of range [0, {k}): {labels.tolist()}")

    shifted = z2 - z2.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    rows = np.arange(z2.shape[0])
    per_row = np.log(denom[:, 0]) - shifted[rows, labels]
    loss = np.sum(per_row)

    def _back(g):
        probs = exp / denom
        probs[rows, labels] -= 1
        grad = probs * g
        return (grad if batched else grad[0],)

    return make_op(np.asarray(loss, dtype=z.dtype), (logits,), _back)
