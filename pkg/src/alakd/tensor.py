"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the active :class:`Graph` (entered with ``with``)
only when at least one input requires a gradient. Outside a graph every
operation is a plain numpy computation, which is what inference uses.

    >>> w = Tensor(np.eye(2), requires_grad=True)
    >>> with Graph() as g:
    ...     loss = (w @ w).sum()
    >>> g.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _active_graph() -> "Graph | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._op = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Tape of executed operations in recording order."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf tensor's ``grad``.

        Intermediate gradients live only for the duration of the call, so the
        same graph can be swept again and contributes identical increments.
        """
        if loss._op is None:
            return
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, float)
        }
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._op is None:
                    inp.grad += gi
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(inputs, out, backward)
        out._op = node
        graph.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _record(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    return _record(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out**2),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    inner = c * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    n = len(tensors)
    return _record(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; errors name both shapes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into rows: one BLAS call each way
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(*a.shape[:-1], n)

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _record(out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(
        out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``.

    Passing ``gain=bias=None`` skips the affine step.
    """
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    affine = gain is not None
    out = xhat * gain.data + bias.data if affine else xhat

    def backward(g):
        dxhat = g * gain.data if affine else g
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        if not affine:
            return (dx,)
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    inputs = (x, gain, bias) if affine else (x,)
    return _record(out, inputs, backward)


def cosine_similarity(u, v, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``u.v / (max(|u|, eps) * max(|v|, eps))`` along ``axis``.

    Zero vectors give 0 rather than NaN.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ValueError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    dot = (u.data * v.data).sum(axis=axis, keepdims=True)
    nu = np.sqrt((u.data * u.data).sum(axis=axis, keepdims=True))
    nv = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    a, b = np.maximum(nu, eps), np.maximum(nv, eps)
    cos = dot / (a * b)

    def backward(g):
        g = np.expand_dims(g, axis)
        # d|u|/du vanishes where the eps floor is active
        du_norm = np.where(nu > eps, u.data / np.where(nu > 0, nu, 1.0), 0.0)
        dv_norm = np.where(nv > eps, v.data / np.where(nv > 0, nv, 1.0), 0.0)
        gu = g * (v.data / (a * b) - cos / a * du_norm)
        gv = g * (u.data / (a * b) - cos / b * dv_norm)
        return gu, gv

    return _record(np.squeeze(cos, axis=axis), (u, v), backward)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_input: list[float]
    flagged: list[tuple[int, tuple[int, ...]]]

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}), "
            f"{len(self.flagged)} non-differentiable points flagged"
        )


def rel_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    kink_tol: float = 1e-3,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward-pass gradients of scalar ``fn(*tensors)`` with central differences.

    Elements that miss ``tol`` are re-probed at ``h/2``; if the two difference
    estimates disagree by more than ``kink_tol`` the point is treated as
    non-differentiable, listed in ``flagged`` and left out of the error
    statistic. ``max_elements`` caps the probes per input (seeded sample).
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x.copy(), requires_grad=True) for x in arrays]
    with Graph() as graph:
        out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError("check_gradients needs a scalar-valued function")
    graph.backward(out)
    rng = np.random.default_rng(seed)

    def evaluate(k: int, flat_index: int, delta: float) -> float:
        probe = [x.copy() for x in arrays]
        probe[k].reshape(-1)[flat_index] += delta
        return float(fn(*[Tensor(p) for p in probe]).data)

    def central(k: int, i: int, step: float) -> float:
        return (evaluate(k, i, step) - evaluate(k, i, -step)) / (2 * step)

    per_input, flagged = [], []
    for k, (x, t) in enumerate(zip(arrays, tensors)):
        ad = t.grad.reshape(-1)
        idx = np.arange(x.size)
        if max_elements is not None and x.size > max_elements:
            idx = np.sort(rng.choice(x.size, max_elements, replace=False))
        worst = 0.0
        for i in idx:
            fd = central(k, i, h)
            err = float(rel_error(ad[i], fd))
            if err > tol:
                fd_half = central(k, i, h / 2)
                if float(rel_error(fd, fd_half)) > kink_tol:
                    flagged.append((k, np.unravel_index(i, x.shape)))
                    continue
            worst = max(worst, err)
        per_input.append(worst)
    max_err = max(per_input, default=0.0)
    return GradCheckReport(max_err, max_err <= tol, tol, per_input, flagged)
