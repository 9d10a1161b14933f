"""A small reverse-mode differentiation engine over numpy arrays.

Operations on :class:`Tensor` always compute eagerly. When a :class:`Tape` is
active and some input requires a gradient, the operation is also appended to
the tape together with its vector-Jacobian product; :func:`backward` walks the
tape in exact reverse order.

>>> store = ParamStore()
>>> theta = store.add("theta", np.array([1.0, 2.0, 3.0]))
>>> with Tape() as tape:
...     loss = (theta * theta).sum()
>>> backward(tape, loss)
>>> theta.grad
array([2., 4., 6.])
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import CycleDetected, NonScalarLoss, ValidationError

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class BranchLog:
    """Branch decisions of piecewise ops (ReLU sign, clamp side, max-pool
    argmax), in execution order.

    Inside ``with log.record():`` decisions are appended; inside
    ``with log.replay():`` the same sequence is reused instead of being
    recomputed, so a perturbed re-evaluation stays on the smooth piece of the
    unperturbed one (used by finite-difference checks).
    """

    def __init__(self):
        self.decisions: list[np.ndarray] = []
        self._mode = None
        self._pos = 0

    def _scope(self, mode):
        log = self

        class _Scope:
            # saved per scope so nested scopes on one log unwind correctly
            def __enter__(self):
                self.prev = getattr(_state, "branches", None), log._mode, log._pos
                log._mode, log._pos = mode, 0
                if mode == "record":
                    log.decisions = []
                _state.branches = log
                return log

            def __exit__(self, *exc):
                _state.branches, log._mode, log._pos = self.prev
                return False

        return _Scope()

    def record(self):
        return self._scope("record")

    def replay(self):
        return self._scope("replay")

    def decide(self, value: np.ndarray) -> np.ndarray:
        if self._mode == "record":
            self.decisions.append(value)
            return value
        if self._pos >= len(self.decisions):
            raise ValidationError("replay ran past the recorded branch decisions")
        out = self.decisions[self._pos]
        self._pos += 1
        if out.shape != value.shape:
            raise ValidationError("replayed branch decision has a different shape")
        return out


def _decide(value: np.ndarray) -> np.ndarray:
    log = getattr(_state, "branches", None)
    return value if log is None else log.decide(value)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "reached", "name", "_index", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.reached = False  # set when a backward pass accumulates into grad
        self.name = name
        self._index = -1  # position on the tape that produced it; -1 for leaves

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)
    T = property(lambda self: transpose(self))

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}{', requires_grad' if self.requires_grad else ''})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only squaring is supported")

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kink: float | None = None  # input value where a piecewise op switches branch


class Tape:
    """Ordered record of primitive operations. Use as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype if np.asarray(b).dtype.kind in "fiub" else None)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype if np.asarray(a).dtype.kind in "fiub" else None)
    return as_tensor(a), as_tensor(b)


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp, kink: float | None = None) -> Tensor:
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._index = len(tape.nodes)
        tape.nodes.append(Node(op, inputs, result, vjp, kink))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def expm1(a) -> Tensor:
    """``exp(a) - 1`` without cancellation for small ``a``."""
    a = as_tensor(a)
    out = np.expm1(a.data)
    return _record("expm1", (a,), out, lambda g: (g * (out + 1.0),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(np.zeros((), a.dtype), a.data)
    return _record("softplus", (a,), out, lambda g: (g * _sigmoid(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = _decide(a.data > 0)
    return _record("relu", (a,), np.where(pos, a.data, 0).astype(a.dtype, copy=False), lambda g: (g * pos,), 0.0)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record("silu", (a,), a.data * s, lambda g: (g * (s + a.data * s * (1.0 - s)),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` for a constant floor."""
    a = as_tensor(a)
    keep = _decide(a.data >= floor)
    return _record("maximum", (a,), np.where(keep, a.data, np.asarray(floor, a.dtype)), lambda g: (g * keep,),
                   float(floor))


def where(mask: np.ndarray, a, b) -> Tensor:
    """``mask ? a : b`` with a constant boolean mask (broadcasting allowed)."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _record("where", (a, b), out, lambda g: (
        _unbroadcast(np.where(mask, g, 0).astype(g.dtype), a.shape),
        _unbroadcast(np.where(mask, 0, g).astype(g.dtype), b.shape),
    ))


# -- reductions and shape ------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", tuple(ts), out, lambda g: tuple(np.split(g, splits, axis=axis)))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record("gather", (a,), a.data[idx], vjp)


def cumsum_exclusive(a, axis: int = -1) -> Tensor:
    """``out[i] = sum_{j<i} a[j]`` along ``axis``."""
    a = as_tensor(a)
    c = np.cumsum(a.data, axis=axis)
    out = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), np.delete(c, -1, axis=axis)], axis=axis)

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        # d out[i] / d a[j] = 1 for j < i
        return (np.concatenate([np.delete(rev, 0, axis=axis), np.zeros_like(np.take(rev, [0], axis=axis))], axis=axis),)

    return _record("cumsum", (a,), out, vjp)


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), a.data @ b.data, vjp)


def sparse_apply(matrix: sp.spmatrix, a) -> Tensor:
    """Constant sparse linear map applied to the leading axis of ``a``
    (bilinear interpolation, upsampling)."""
    a = as_tensor(a)
    flat = a.data.reshape(a.shape[0], -1)
    out = np.asarray(matrix @ flat).astype(a.dtype, copy=False).reshape((matrix.shape[0],) + a.shape[1:])
    mt = matrix.T.tocsr()

    def vjp(g):
        return (np.asarray(mt @ g.reshape(g.shape[0], -1)).astype(g.dtype, copy=False).reshape(a.shape),)

    return _record("interpolate", (a,), out, vjp)


# -- normalizations and activations over an axis -------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), out, vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        n = x.shape[-1]
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record("layer_norm", (x, gain, bias), out, vjp)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit Euclidean norm over the last axis."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    out = x.data / norm

    def vjp(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _record("l2_normalize", (x,), out, vjp)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs ``(x[2i], x[2i+1])`` by angles whose
    cosines/sines are given per token and pair (shape ``(..., T, D/2)``)."""
    x = as_tensor(x)

    def rot(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = ev * cos - od * s
        out[..., 1::2] = ev * s + od * cos
        return out

    return _record("rotary", (x,), rot(x.data, sin), lambda g: (rot(g, -sin),))


def scatter_max(features, cells: np.ndarray, n_cells: int) -> Tensor:
    """Per-cell, per-channel max over the rows of ``features`` assigned to each
    cell; empty cells are 0. The gradient goes to the arg-max row of each
    (cell, channel), ties resolved to the lowest row index."""
    f = as_tensor(features)
    n, c = f.shape
    cells = np.asarray(cells, dtype=np.int64)
    out = np.zeros((n_cells, c), dtype=f.dtype)
    arg = np.full((n_cells, c), -1, dtype=np.int64)
    if n:
        order = np.argsort(cells, kind="stable")
        sc = cells[order]
        starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
        occupied = sc[starts]
        fs = f.data[order]
        cmax = np.maximum.reduceat(fs, starts, axis=0)
        out[occupied] = cmax
        seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, n]))
        cand = np.where(fs == cmax[seg], order[:, None], n)
        arg[occupied] = np.minimum.reduceat(cand, starts, axis=0)
    arg = _decide(arg)
    filled = arg >= 0
    if n:
        out = np.where(filled, f.data[np.maximum(arg, 0), np.arange(c)], 0).astype(f.dtype, copy=False)

    def vjp(g):
        gf = np.zeros((n, c), dtype=g.dtype)
        rows, chans = np.nonzero(filled)
        gf[arg[rows, chans], chans] += g[rows, chans]
        return (gf,)

    return _record("max_pool", (f,), out, vjp)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# -- parameters, backward, optimizer ---------------------------------------------


class ParamStore:
    """Named trainable tensors, each with a same-shape gradient buffer."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.step = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=requires_grad, name=name)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad[...] = 0
            t.reached = False

    def freeze(self, prefix: str) -> None:
        for n in self.names(prefix):
            self.params[n].requires_grad = False

    def astype(self, dtype) -> "ParamStore":
        """Copy with every parameter cast (used for 64-bit gradient checks)."""
        new = ParamStore(dtype)
        for n, t in self.params.items():
            new.add(n, t.data, t.requires_grad)
        new.step = self.step
        return new

    def num_values(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{n}": t.data for n, t in self.params.items()}
        for n, (m, v) in self.moments.items():
            out[f"adam_m/{n}"] = m
            out[f"adam_v/{n}"] = v
        return out

    def load_state(self, tensors: dict[str, np.ndarray], with_moments: bool = True) -> dict[str, list[str]]:
        """Load parameters by name. Returns the coverage report with keys
        ``loaded``, ``initialized`` (kept fresh) and ``unused`` (in the file but
        unknown here); together they partition the union of names."""
        saved = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")}
        loaded, initialized = [], []
        for n, t in self.params.items():
            if n in saved and saved[n].shape == t.shape:
                t.data = np.array(saved[n], dtype=self.dtype)
                loaded.append(n)
            else:
                initialized.append(n)
        unused = [n for n in saved if n not in self.params]
        if with_moments:
            for n in loaded:
                if f"adam_m/{n}" in tensors:
                    self.moments[n] = (np.array(tensors[f"adam_m/{n}"], dtype=self.dtype),
                                       np.array(tensors[f"adam_v/{n}"], dtype=self.dtype))
        return {"loaded": loaded, "initialized": initialized, "unused": unused}


def kink_margin(tape: Tape) -> float:
    """Smallest distance of any recorded piecewise-op input to its switch point."""
    margin = np.inf
    for node in tape.nodes:
        if node.kink is not None and node.inputs[0].size:
            margin = min(margin, float(np.min(np.abs(node.inputs[0].data - node.kink))))
    return margin


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` buffer of every leaf that
    requires a gradient."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = tape.nodes
    if not (0 <= loss._index < len(nodes) and nodes[loss._index].output is loss):
        raise ValidationError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for i in range(loss._index, -1, -1):
        node = nodes[i]
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._index >= i:
                raise CycleDetected(f"{node.op} at position {i} consumes a later result")
            if t._index < 0:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi.astype(t.grad.dtype, copy=False)
                t.reached = True
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine decay from ``base_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamW:
    lr: float = 1e-4
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    min_lr: float = 0.0

    def current_lr(self, step: int) -> float:
        return cosine_lr(step, self.total_steps, self.lr, self.min_lr)

    def step(self, store: ParamStore) -> float:
        """One decoupled-weight-decay Adam update; zeroes gradients afterwards.

        Parameters no backward pass reached since the last step are left
        alone (no decay, no moment update).
        """
        lr = self.current_lr(store.step)
        store.step += 1
        t = store.step
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in store.params.items():
            if not (p.requires_grad and p.reached):
                continue
            g = p.grad
            m, v = store.moments.get(name, (None, None))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            store.moments[name] = (m, v)
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        store.zero_grad()
        return lr
