"""Minimal dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the engagement model needs: matrix products
with broadcastable batch dims, softmax, layer norm, pointwise ops, concat
and narrow slicing, reshape/transpose, and scalar reductions. A thread-local
tape records the forward pass in creation order (which is already a
topological order); ``backward`` walks it once in reverse and then clears it.

Float64 is the default dtype so finite-difference checks are meaningful;
float32 arrays pass through unchanged for training throughput.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where the contract requires finite values."""


class GradCheckError(ArithmeticError):
    """Analytic and numeric gradients disagree beyond the given tolerance."""


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.enabled = True
        self.nan_checks = False


_STATE = _TapeState()


def set_nan_checks(on: bool) -> None:
    """Enable per-op finite checks (slow; meant for tests and debugging)."""
    _STATE.nan_checks = on


def reset_tape() -> None:
    """Drop all recorded nodes on the current thread's tape."""
    _STATE.nodes = []


def tape_size() -> int:
    return len(_STATE.nodes)


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        self._prev = _STATE.enabled
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        elif dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded forward op: inputs, output, and its backward closure."""

    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    # `fresh` marks arrays the backward fn owns exclusively, safe to adopt.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if _STATE.nan_checks and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if _STATE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        _STATE.nodes.append(TapeNode(op, inputs, out, backward_fn))
    else:
        out.requires_grad = False
        out.is_leaf = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` over leading/stretched broadcast axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_suffix_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    # Only scalar or trailing-suffix broadcasting is supported; anything
    # fancier is a shape bug in the caller, not a feature.
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, large = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small == large[len(large) - len(small):]:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not equal or suffix-broadcastable")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def constant(x, dtype=None) -> Tensor:
    """Non-trainable tensor wrapping `x` (no copy when dtype matches)."""
    return Tensor(x, requires_grad=False, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for shapes {a.shape} and {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(da, a.shape), fresh=True)
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(db, b.shape), fresh=True)

    return _record("matmul", (a, b), out_data, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast("add", a, b)
    out_data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape), fresh=g.shape != a.shape)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape), fresh=g.shape != b.shape)

    return _record("add", (a, b), out_data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast("sub", a, b)
    out_data = a.data - b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape), fresh=g.shape != a.shape)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape), fresh=True)

    return _record("sub", (a, b), out_data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast("mul", a, b)
    out_data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape), fresh=True)

    return _record("mul", (a, b), out_data, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast("div", a, b)
    out_data = a.data / b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape), fresh=True)
        if b.requires_grad:
            db = -g * a.data / (b.data * b.data)
            _accumulate(b, _unbroadcast(db, b.shape), fresh=True)

    return _record("div", (a, b), out_data, backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * s

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * s, fresh=True)

    return _record("scale", (a,), out_data, backward)


def shift(a: Tensor, s: float) -> Tensor:
    """Add a python scalar (no gradient to the scalar)."""
    out_data = a.data + float(s)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)

    return _record("shift", (a,), out_data, backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data > 0), fresh=True)

    return _record("relu", (a,), out_data, backward)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = x2 * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 0.134145 * x2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        local *= g
        _accumulate(a, local, fresh=True)

    return _record("gelu", (a,), out_data, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out_data = a.data - np.max(a.data, axis=axis, keepdims=True)
    np.exp(out_data, out=out_data)
    out_data /= np.sum(out_data, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dx = g - np.sum(g * out_data, axis=axis, keepdims=True)
        dx *= out_data
        _accumulate(a, dx, fresh=True)

    return _record("softmax", (a,), out_data, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape), fresh=True)
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.shape), fresh=True)
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (dxhat - m1 - xhat * m2), fresh=True)

    return _record("layer_norm", (x, gamma, beta), out_data, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis if axis >= 0 else len(ref) + axis
    for t in tensors[1:]:
        s = t.shape
        if len(s) != len(ref) or any(i != ax and s[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat: incompatible shapes {ref} and {s} along axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=ax)
    extents = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _record("concat", tuple(tensors), out_data, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient routes back to the slice."""
    ax = axis if axis >= 0 else a.ndim + axis
    if start < 0 or start + length > a.shape[ax]:
        raise ShapeError(f"narrow: slice [{start}, {start + length}) exceeds axis {axis} "
                         f"of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx].copy()

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accumulate(a, full, fresh=True)

    return _record("narrow", (a,), out_data, backward)


def split(a: Tensor, sizes: Iterable[int], axis: int = -1) -> list[Tensor]:
    """Inverse of concat: consecutive narrows of the given extents."""
    sizes = list(sizes)
    ax = axis if axis >= 0 else a.ndim + axis
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis {axis} of shape {a.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(narrow(a, ax, start, n))
        start += n
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out_data = a.data.reshape(tuple(shape))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _record("reshape", (a,), out_data, backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.transpose(g, inverse))

    return _record("transpose", (a,), out_data, backward)


def tensor_sum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _record("sum", (a,), out_data, backward)


def mean(a: Tensor) -> Tensor:
    return scale(tensor_sum(a), 1.0 / a.data.size)


def backward(loss: Tensor) -> None:
    """Reverse-sweep the tape from a scalar loss; clears the tape after.

    Gradients accumulate additively into every tensor reached, so a tensor
    used in several places receives the sum of all path contributions.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes = _STATE.nodes
    if not nodes:
        raise RuntimeError("backward: tape is empty (already consumed, or forward "
                           "ran under no_grad)")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tracked tensor")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("backward: loss is not finite")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes):
        if node.out.grad is not None:
            node.backward_fn(node.out.grad)
    _STATE.nodes = []


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5,
               tol: float | None = None, max_coords_per_param: int = 16,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of a taped scalar function to central differences.

    `f` must be deterministic (dropout off). Returns the max over sampled
    coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8);
    raises GradCheckError when `tol` is given and breached, NonFiniteError on
    NaN/Inf with the offending coordinate identified.
    """
    named = [p if isinstance(p, tuple) else (f"param{i}", p) for i, p in enumerate(params)]
    if rng is None:
        rng = np.random.default_rng(0)

    for _, p in named:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named}

    worst = 0.0
    worst_at = ""
    for name, p in named:
        flat = p.data.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords_per_param
                  else rng.choice(n, size=max_coords_per_param, replace=False))
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                f_plus = f().item()
            flat[c] = orig - h
            with no_grad():
                f_minus = f().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            if not (math.isfinite(numeric) and math.isfinite(a_flat[c])):
                raise NonFiniteError(f"grad_check: non-finite value at {name}[{c}]")
            err = abs(a_flat[c] - numeric) / max(abs(a_flat[c]), abs(numeric), 1e-8)
            if err > worst:
                worst, worst_at = err, f"{name}[{c}]"
    for _, p in named:
        p.zero_grad()
    if tol is not None and worst > tol:
        raise GradCheckError(f"grad_check: max rel err {worst:.3e} at {worst_at} "
                             f"exceeds tol {tol:.1e}")
    return worst
