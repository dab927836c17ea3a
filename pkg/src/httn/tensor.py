"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a :class:`Node` carrying a monotonically
increasing sequence number, so the append order is a valid topological
order. ``Tensor.backward`` collects the nodes reachable from the output
and replays them in reverse sequence order, visiting each exactly once.

Only the ops the HTTN model needs are provided. Leading batch dimensions
are accepted wherever the underlying kernel allows it.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

_seq = itertools.count()
_grad_enabled = True
_corrupted: set[str] = set()

DEFAULT_DTYPE = np.float32


class Node:
    __slots__ = ("seq", "kind", "inputs", "backward")

    def __init__(self, kind: str, inputs: tuple, backward: Callable):
        self.seq = next(_seq)
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype.kind != "f":
                arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.seq

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad=None) -> "GradGraph":
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        graph = GradGraph.from_output(self)
        graph.run_backward(self, np.asarray(grad, dtype=self.dtype))
        return graph


@dataclass
class GradGraph:
    """The recorded ops reachable from one output, in append order."""

    nodes: list = field(default_factory=list)
    visits: int = 0

    @classmethod
    def from_output(cls, out: Tensor) -> "GradGraph":
        found: dict[int, Node] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.seq in found:
                continue
            found[node.seq] = node
            stack.extend(node.inputs)
        return cls(nodes=[found[k] for k in sorted(found)])

    def run_backward(self, out: Tensor, seed: np.ndarray) -> None:
        if out.node is None:
            if out.requires_grad:
                _accumulate_leaf(out, seed)
            return
        pending: dict[int, np.ndarray] = {out.node.seq: seed}
        for node in reversed(self.nodes):
            self.visits += 1
            g = pending.pop(node.seq, None)
            if g is None:
                continue
            grads = node.backward(g)
            if node.kind in _corrupted:
                grads = tuple(None if x is None else -x for x in grads)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                check_finite(gi, f"backward of {node.kind}")
                if t.node is None:
                    _accumulate_leaf(t, gi)
                elif t.node.seq in pending:
                    pending[t.node.seq] = pending[t.node.seq] + gi
                else:
                    pending[t.node.seq] = gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_backward_bug(kind: str):
    """Flip the sign of one op kind's backward rule (negative control)."""
    _corrupted.add(kind)
    try:
        yield
    finally:
        _corrupted.discard(kind)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def check_finite(out: np.ndarray, kind: str) -> None:
    # NaN/Inf anywhere makes the sum non-finite; one pass instead of isfinite().all()
    with np.errstate(over="ignore", invalid="ignore"):
        total = out.sum()
    if not np.isfinite(total) and not np.isfinite(out).all():
        raise FloatingPointError(f"{kind} produced non-finite values")


def grad_enabled() -> bool:
    return _grad_enabled


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    check_finite(out, kind)
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    t = Tensor(out, requires_grad=needs)
    if needs:
        t.node = Node(kind, tuple(inputs), backward)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    return a, b


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def elementwise(op: str, *args) -> Tensor:
    table = {"mul": mul, "add": add, "relu": relu, "sigmoid": sigmoid}
    if op not in table:
        raise ConfigError(f"unknown elementwise op {op!r}; expected one of {sorted(table)}")
    return table[op](*args)


# ----------------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in xs]} along axis {axis}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _record("concat", out, tuple(xs), backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):]) for x in xs]
    return concat(expanded, axis=axis)


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing is not supported."""
    out = x.data[key]
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _record("index", np.array(out, copy=True), (x,), backward)


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({a % ndim for a in axes}))
    if not axes:
        raise ConfigError("reduction over an empty axis set")
    return axes


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        raise ConfigError("reduction over an empty axis set")
    axes = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("reduce_sum", np.asarray(out, dtype=x.dtype), (x,), backward)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        raise ConfigError("reduction over an empty axis set")
    axes = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("reduce_mean", np.asarray(out, dtype=x.dtype), (x,), backward)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None

    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over the flattened leading dims instead of numpy's batch loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record("matmul", out, (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), backward)


def temporal_conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """1-D convolution along the second-to-last axis with zero "same" padding.

    x: [..., T, Cin]; w: [Cout, Cin, k]; bias: [Cout]. Output [..., T, Cout].
    """
    cout, cin, k = w.shape
    if k % 2 == 0:
        raise ConfigError(f"temporal kernel must be odd, got k_t={k}")
    if x.shape[-1] != cin:
        raise DimensionError(f"temporal_conv1d: input channels {x.shape} do not match weight {w.shape}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"temporal_conv1d needs input [..., T, Cin] with T >= 1, got {x.shape}")
    lead, T = x.shape[:-2], x.shape[-2]
    p = (k - 1) // 2
    xb = x.data.reshape((-1, T, cin))
    B = xb.shape[0]
    xp = np.zeros((B, T + 2 * p, cin), dtype=x.dtype)
    xp[:, p:p + T] = xb
    out = np.zeros((B * T, cout), dtype=x.dtype)
    for j in range(k):
        out += xp[:, j:j + T, :].reshape(B * T, cin) @ w.data[:, :, j].T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, T, cout)
    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g2 = g.reshape(B * T, cout)
        gx = gw = gbias = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + T, :] += (g2 @ w.data[:, :, j]).reshape(B, T, cin)
            gx = gxp[:, p:p + T, :].reshape(x.shape)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for j in range(k):
                gw[:, :, j] = g2.T @ xp[:, j:j + T, :].reshape(B * T, cin)
        if bias is not None and bias.requires_grad:
            gbias = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gbias)

    return _record("temporal_conv1d", out.reshape(lead + (T, cout)), inputs, backward)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int | str = 0) -> Tensor:
    """2-D convolution on channels-last input.

    x: [..., H, W, Cin]; w: [Cout, Cin, k, k]. ``padding`` is an int or one
    of "valid"/"same" (same = (k-1)//2 per side).
    """
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"conv2d expects square kernels, got {w.shape}")
    k = kh
    if x.ndim < 3 or x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        padding = 0
    elif padding == "same":
        padding = (k - 1) // 2
    lead, H, W = x.shape[:-3], x.shape[-3], x.shape[-2]
    Ho, Wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d output would be {Ho}x{Wo} for input {x.shape}, kernel {k}, stride {stride}, padding {padding}")
    xb = x.data.reshape((-1, H, W, cin))
    B = xb.shape[0]
    xp = np.zeros((B, H + 2 * padding, W + 2 * padding, cin), dtype=x.dtype)
    xp[:, padding:padding + H, padding:padding + W] = xb
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.reshape(B * Ho * Wo, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(lead + (Ho, Wo, cout))

    def backward(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gx = gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :] += gcols[..., i, j]
            gx = gxp[:, padding:padding + H, padding:padding + W, :].reshape(x.shape)
        return gx, gw

    return _record("conv2d", out, (x, w), backward)


# ----------------------------------------------------------------------------
# normalisation and losses
# ----------------------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE, **kw) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, train: bool) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In train mode the running moments are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[-1]
    xb = x.data.reshape(-1, C)
    n = xb.shape[0]
    eps = stats.eps
    if train:
        if n < 2:
            raise DimensionError(f"batch_norm in train mode needs at least 2 values per channel, got input {x.shape}")
        mu = xb.mean(axis=0)
        var = xb.var(axis=0)
        m = stats.momentum
        stats.mean[...] = m * stats.mean + (1 - m) * mu
        stats.var[...] = m * stats.var + (1 - m) * var * (n / (n - 1))
    else:
        mu, var = stats.mean, stats.var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xb - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        g2 = g.reshape(-1, C)
        ggamma = (g2 * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g2 * gamma.data
            if train:
                gx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                gx = dxhat * inv
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _record("batch_norm", out.reshape(x.shape), (x, gamma, beta), backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    C = x.shape[-1]

    def backward(g):
        return (inv / C * (C * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True)),)

    return _record("layer_norm", xhat, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", s, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ----------------------------------------------------------------------------
# finite-difference checking
# ----------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    rows: list  # (name, size, max_rel_err, tol, passed)
    passed: bool

    @property
    def max_rel_err(self) -> float:
        return max((r[2] for r in self.rows), default=0.0)

    def format(self) -> str:
        lines = [f"{'parameter':<28}{'size':>8}{'max_rel_err':>14}{'tol':>10}  status"]
        for name, size, err, tol, ok in self.rows:
            lines.append(f"{name:<28}{size:>8}{err:>14.3e}{tol:>10.0e}  {'PASS' if ok else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor] | dict,
    eps: float = 1e-6,
    tol: float | dict = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``inputs`` are the leaf tensors to perturb (a dict gives them names).
    ``tol`` may be a dict mapping input name to its tolerance.
    """
    if isinstance(inputs, dict):
        named = list(inputs.items())
    else:
        named = [(t.name or f"input{i}", t) for i, t in enumerate(inputs)]
    for _, t in named:
        if t.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 inputs, got {t.dtype}")
        t.grad = None
    out = f()
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    rows = []
    for name, t in named:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
        err = float(relative_error(analytic, numeric, floor).max()) if t.size else 0.0
        t_tol = tol.get(name, 1e-4) if isinstance(tol, dict) else tol
        rows.append((name, t.size, err, t_tol, err <= t_tol))
    return GradCheckReport(rows=rows, passed=all(r[4] for r in rows))
