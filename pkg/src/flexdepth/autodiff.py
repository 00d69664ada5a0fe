"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A Tape records operations define-by-run; a fresh tape is built every
training step. All values are float64. Backward rules are closures that
map the output gradient to input gradients; gradients accumulate
additively across fan-out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when an operation's input shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node on a tape: dense float64 values plus autodiff bookkeeping."""

    __slots__ = ("values", "grad", "tape", "node_id", "requires_grad", "name")

    def __init__(self, values, tape: "Tape", node_id: int,
                 requires_grad: bool = False, name: str | None = None):
        self.values = _asarray(values)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"


class TapeEntry:
    """One recorded operation: input node-ids, output node-id, and the
    backward rule mapping dL/dout to one gradient per input."""

    __slots__ = ("op", "in_ids", "out_id", "backward")

    def __init__(self, op: str, in_ids: tuple[int, ...], out_id: int,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.in_ids = in_ids
        self.out_id = out_id
        self.backward = backward


@dataclass
class Tape:
    """Ordered operation record; inputs always precede their consumers."""

    recording: bool = True
    entries: list[TapeEntry] = field(default_factory=list)
    _next_id: int = 0
    _leaves: list[Tensor] = field(default_factory=list)

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, values, requires_grad: bool = False,
             name: str | None = None) -> Tensor:
        t = Tensor(values, self, self._new_id(), requires_grad, name)
        if requires_grad:
            self._leaves.append(t)
        return t

    def constant(self, values) -> Tensor:
        return self.leaf(values, requires_grad=False)

    def record(self, op: str, inputs: Sequence[Tensor], out_values,
               backward: Callable) -> Tensor:
        out = Tensor(out_values, self, self._new_id())
        if self.recording:
            self.entries.append(
                TapeEntry(op, tuple(t.node_id for t in inputs),
                          out.node_id, backward))
        return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every trainable leaf with dLoss/dleaf.

    Backward rules receive the accumulated output gradient and must never
    mutate it; they may return freshly owned buffers.
    """
    if loss.values.ndim != 0:
        raise ShapeError(
            f"backward: loss must be scalar, got shape {loss.values.shape}")
    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones((), dtype=np.float64)}
    for entry in reversed(tape.entries):
        g = grads.get(entry.out_id)
        if g is None:
            continue
        for in_id, gin in zip(entry.in_ids, entry.backward(g)):
            if gin is None:
                continue
            acc = grads.get(in_id)
            grads[in_id] = gin if acc is None else acc + gin
    for leaf in tape._leaves:
        g = grads.get(leaf.node_id)
        leaf.grad = np.zeros_like(leaf.values) if g is None else _asarray(g)


def _tensor_on(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands come from different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives


def add(a: Tensor, b) -> Tensor:
    b = _tensor_on(a.tape, b)
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    ash, bsh = a.shape, b.shape
    return a.tape.record(
        "add", (a, b), out,
        lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b) -> Tensor:
    b = _tensor_on(a.tape, b)
    try:
        out = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    ash, bsh = a.shape, b.shape
    return a.tape.record(
        "sub", (a, b), out,
        lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a: Tensor, b) -> Tensor:
    b = _tensor_on(a.tape, b)
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return a.tape.record(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape.record("scale", (a,), a.values * c, lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape.record("add_const", (a,), a.values + c, lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def log(a: Tensor) -> Tensor:
    av = a.values
    return a.tape.record("log", (a,), np.log(av), lambda g: (g / av,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return a.tape.record("exp", (a,), out, lambda g: (g * out,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    sgn = np.sign(a.values)
    return a.tape.record("abs", (a,), np.abs(a.values), lambda g: (g * sgn,))


def maximum_const(a: Tensor, c: float) -> Tensor:
    keep = a.values > c
    return a.tape.record("maximum_const", (a,), np.maximum(a.values, c),
                         lambda g: (g * keep,))


def minimum_const(a: Tensor, c: float) -> Tensor:
    keep = a.values < c
    return a.tape.record("minimum_const", (a,), np.minimum(a.values, c),
                         lambda g: (g * keep,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.values)

    def back(g):
        t = np.empty_like(out)
        np.subtract(1.0, out, out=t)
        np.multiply(t, out, out=t)
        np.multiply(t, g, out=t)
        return (t,)

    return a.tape.record("sigmoid", (a,), out, back)


def swish(a: Tensor) -> Tensor:
    sig = expit(a.values)
    av = a.values

    def back(g):
        # d(x*sig)/dx = sig + x*sig*(1-sig), fused in one buffer
        t = np.empty_like(sig)
        np.subtract(1.0, sig, out=t)
        np.multiply(t, sig, out=t)
        np.multiply(t, av, out=t)
        np.add(t, sig, out=t)
        np.multiply(t, g, out=t)
        return (t,)

    return a.tape.record("swish", (a,), av * sig, back)


def relu(a: Tensor) -> Tensor:
    pos = a.values > 0
    return a.tape.record("relu", (a,), np.where(pos, a.values, 0.0),
                         lambda g: (g * pos,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _tensor_on(a.tape, b)
    av, bv = a.values, b.values
    if av.ndim < 1 or bv.ndim < 1 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = av @ bv
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return a.tape.record("matmul", (a, b), out, back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis of x; fused single tape entry."""
    xv, wv, bv = x.values, w.values, b.values
    if xv.shape[-1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"linear: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    x2 = xv.reshape(-1, xv.shape[-1])
    out = (x2 @ wv + bv).reshape(xv.shape[:-1] + (wv.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (
            (g2 @ wv.T).reshape(xv.shape),
            x2.T @ g2,
            g2.sum(axis=0),
        )

    return x.tape.record("linear", (x, w, b), out, back)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xv = x.values
    if gamma.shape != xv.shape[-1:] or beta.shape != xv.shape[-1:]:
        raise ShapeError(
            f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not "
            f"match feature width of {x.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.values
    out = xhat * gv
    out += beta.values

    def back(g):
        dxhat = g * gv
        t = dxhat * xhat
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = t.mean(axis=-1, keepdims=True)
        lead = tuple(range(g.ndim - 1))
        np.multiply(g, xhat, out=t)
        dgamma = t.sum(axis=lead)
        np.subtract(dxhat, m1, out=dxhat)
        np.multiply(xhat, m2, out=t)
        np.subtract(dxhat, t, out=dxhat)
        np.multiply(dxhat, inv, out=dxhat)
        return (dxhat, dgamma, g.sum(axis=lead))

    return x.tape.record("layernorm", (x, gamma, beta), out, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = x.values
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        t = g * out
        dot = t.sum(axis=axis, keepdims=True)
        np.subtract(g, dot, out=t)
        np.multiply(t, out, out=t)
        return (t,)

    return x.tape.record("softmax", (x,), out, back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = x.values
    shifted = xv - xv.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        t = soft * g.sum(axis=axis, keepdims=True)
        np.subtract(g, t, out=t)
        return (t,)

    return x.tape.record("log_softmax", (x,), out, back)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    xv = x.values
    d = xv.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"glu: last axis must be even, got shape {x.shape}")
    h = d // 2
    a, b = xv[..., :h], xv[..., h:]
    sig = expit(b)
    out = a * sig

    def back(g):
        dx = np.empty_like(xv)
        left, right = dx[..., :h], dx[..., h:]
        np.multiply(g, sig, out=left)
        np.subtract(1.0, sig, out=right)
        np.multiply(right, sig, out=right)
        np.multiply(right, a, out=right)
        np.multiply(right, g, out=right)
        return (dx,)

    return x.tape.record("glu", (x,), out, back)


# ---------------------------------------------------------------------------
# convolutions


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 1-D convolution along axis 1 of [B, T, C]; same padding.

    w has shape [K, C] with K odd; b has shape [C].
    """
    xv, wv, bv = x.values, w.values, b.values
    if xv.ndim != 3 or wv.ndim != 2 or xv.shape[2] != wv.shape[1]:
        raise ShapeError(
            f"depthwise_conv1d: incompatible shapes x={x.shape} w={w.shape}")
    k = wv.shape[0]
    if k % 2 != 1:
        raise ShapeError(f"depthwise_conv1d: kernel must be odd, got {k}")
    B, T, C = xv.shape
    half = k // 2
    xpad = np.zeros((B, T + k - 1, C))
    xpad[:, half:half + T] = xv
    out = np.broadcast_to(bv, (B, T, C)).copy()
    tmp = np.empty_like(xv)
    for j in range(k):
        np.multiply(xpad[:, j:j + T], wv[j], out=tmp)
        out += tmp

    def back(g):
        gpad = np.zeros_like(xpad)
        dw = np.empty_like(wv)
        buf = np.empty_like(g)
        for j in range(k):
            np.multiply(g, wv[j], out=buf)
            gpad[:, j:j + T] += buf
            np.multiply(xpad[:, j:j + T], g, out=buf)
            dw[j] = buf.sum(axis=(0, 1))
        return (gpad[:, half:half + T], dw, g.sum(axis=(0, 1)))

    return x.tape.record("depthwise_conv1d", (x, w, b), out, back)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Full 1-D convolution along axis 1 of [B, T, Cin]; same padding.

    w has shape [K, Cin, Cout]; output length is ceil(T / stride).
    """
    xv, wv, bv = x.values, w.values, b.values
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[2] != wv.shape[1]:
        raise ShapeError(
            f"conv1d: incompatible shapes x={x.shape} w={w.shape}")
    B, T, cin = xv.shape
    k, _, cout = wv.shape
    t_out = -(-T // stride)
    pad_total = max((t_out - 1) * stride + k - T, 0)
    pad_left = pad_total // 2
    xpad = np.zeros((B, T + pad_total, cin))
    xpad[:, pad_left:pad_left + T] = xv
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    windows = xpad[:, idx, :]                      # [B, T', K, Cin]
    w2 = wv.reshape(k * cin, cout)
    out = windows.reshape(B * t_out, k * cin) @ w2 + bv
    out = out.reshape(B, t_out, cout)

    def back(g):
        g2 = g.reshape(B * t_out, cout)
        dw = (windows.reshape(B * t_out, k * cin).T @ g2).reshape(k, cin, cout)
        dwin = (g2 @ w2.T).reshape(B, t_out, k, cin)
        gpad = np.zeros_like(xpad)
        np.add.at(gpad, (slice(None), idx), dwin)
        return (gpad[:, pad_left:pad_left + T], dw, g2.sum(axis=0))

    return x.tape.record("conv1d", (x, w, b), out, back)


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return x.tape.record("transpose", (x,), np.transpose(x.values, axes),
                         lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.values.shape
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}")
    return x.tape.record("reshape", (x,), out,
                         lambda g: (g.reshape(old),))


def slice_tensor(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient scatters back into place."""
    xv = x.values
    out = xv[key]

    def back(g):
        dx = np.zeros_like(xv)
        dx[key] = g
        return (dx,)

    return x.tape.record("slice", (x,), out, back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = xs[0].tape
    vals = [t.values for t in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in xs]}")
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record("concat", tuple(xs), out, back)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xv = x.values
    out = xv.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, xv.shape).copy(),)

    return x.tape.record("sum", (x,), out, back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xv = x.values
    count = xv.size if axis is None else xv.shape[axis]
    out = xv.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / count, xv.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, xv.shape).copy(),)

    return x.tape.record("mean", (x,), out, back)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout; evaluation needs no rescaling."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.values.shape) >= p) / (1.0 - p)
    return x.tape.record("dropout", (x,), x.values * mask,
                         lambda g: (g * mask,))


def straight_through(hard_values: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the hard values; route the whole gradient into `soft`."""
    hard_values = _asarray(hard_values)
    if hard_values.shape != soft.values.shape:
        raise ShapeError(
            f"straight_through: shapes {hard_values.shape} and "
            f"{soft.shape} differ")
    return soft.tape.record("straight_through", (soft,), hard_values,
                            lambda g: (g,))


# ---------------------------------------------------------------------------
# verification oracle


@dataclass
class FdReport:
    max_rel_err: float
    passed: bool
    non_finite: list[tuple[int, ...]] = field(default_factory=list)


def finite_difference_check(f: Callable[[Tensor], Tensor],
                            x: np.ndarray,
                            eps: float = 1e-5,
                            tol: float = 1e-5) -> FdReport:
    """Compare the analytic gradient of scalar-valued f against central
    differences. Relative error uses denominator max(|a|, |n|, 1).
    """
    x = np.ascontiguousarray(x, dtype=np.float64).copy()
    tape = Tape()
    leaf = tape.leaf(x, requires_grad=True)
    out = f(leaf)
    if out.values.ndim != 0:
        raise ShapeError(
            f"finite_difference_check: f must be scalar-valued, got "
            f"shape {out.values.shape}")
    backward(tape, out)
    analytic = leaf.grad

    def eval_at(vals: np.ndarray) -> float:
        t = Tape(recording=False)
        return float(f(t.leaf(vals)).values)

    numeric = np.zeros_like(x)
    flat = x.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = eval_at(x)
        flat[i] = orig - eps
        lo = eval_at(x)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    non_finite = []
    for idx in zip(*np.nonzero(~(np.isfinite(analytic) & np.isfinite(numeric)))):
        non_finite.append(idx)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    if non_finite:
        max_rel = math.inf
    return FdReport(max_rel, max_rel <= tol and not non_finite, non_finite)
