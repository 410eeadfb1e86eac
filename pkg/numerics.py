# 📄 numerics.py
"""Reverse-mode differentiation over dense float64 arrays.

A ``Tensor`` is an immutable value that remembers which primitive produced it.
Calling ``backward()`` on a scalar records the reachable graph into a
``ComputationTape`` (inputs before outputs) and walks it in reverse, summing
gradient contributions at fan-out nodes.
"""
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.special import erf

from errors import NumericsError, ShapeError

LAYER_NORM_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Tuple["Tensor", ...] = (), backward: Optional[BackwardFn] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> "ComputationTape":
        tape = ComputationTape(self)
        tape.backward()
        return tape

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data)


class ComputationTape:
    """Ordered record of the primitives reachable from one scalar output."""

    def __init__(self, output: Tensor):
        if output.data.size != 1:
            raise ShapeError("backward", output.shape, ())
        self.output = output
        self.nodes: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))

    def backward(self) -> None:
        for node in self.nodes:
            node.grad = None
        self.output.grad = np.ones_like(self.output.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- Elementwise primitives ---

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericsError("log: input must be strictly positive")
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _node(np.where(on, a.data, 0.0), "relu", (a,), lambda g: (g * on,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _node(x * cdf, "gelu", (a,), lambda g: (g * (cdf + x * pdf),))


NONLINEARITIES: Dict[str, Callable[[Tensor], Tensor]] = {"gelu": gelu, "relu": relu}


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    return _node(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# --- Linear algebra ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T.copy(),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError("concat", parts[0].shape, p.shape)
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]].copy() for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=-1), "concat", tuple(parts), backward)


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError("take_cols", a.shape, (start, stop))

    def backward(g):
        out = np.zeros_like(a.data)
        out[..., start:stop] = g
        return (out,)

    return _node(a.data[..., start:stop].copy(), "take_cols", (a,), backward)


def gather_rows(a: Tensor, rows: Sequence[int]) -> Tensor:
    idx = np.asarray(rows, dtype=np.int64)
    if a.data.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError("gather_rows", a.shape, idx.shape)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], "gather_rows", (a,), backward)


def pick(a: Tensor, cols: Sequence[int]) -> Tensor:
    """Entry ``a[i, cols[i]]`` for every row i."""
    idx = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, idx.shape)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return (out,)

    return _node(a.data[rows, idx], "pick", (a,), backward)


def replace_rows(a: Tensor, rows: Sequence[int], vec: Tensor) -> Tensor:
    """Copy of ``a`` with the given (distinct) rows overwritten by ``vec``."""
    idx = np.asarray(sorted(set(int(r) for r in rows)), dtype=np.int64)
    if a.data.ndim != 2 or vec.shape != (a.shape[1],):
        raise ShapeError("replace_rows", a.shape, vec.shape)
    out = a.data.copy()
    out[idx] = vec.data

    def backward(g):
        ga = g.copy()
        ga[idx] = 0.0
        return ga, g[idx].sum(axis=0)

    return _node(out, "replace_rows", (a, vec), backward)


# --- Normalization and attention primitives ---

def softmax(a: Tensor, allowed: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; positions where ``allowed`` is False get 0."""
    x = a.data
    if allowed is not None:
        if allowed.shape != x.shape:
            raise ShapeError("softmax", x.shape, allowed.shape)
        if not np.all(allowed.any(axis=-1)):
            raise NumericsError("softmax: a row has no allowed positions")
        x = np.where(allowed, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, "softmax", (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)
    return _node(out, "log_softmax", (a,), lambda g: (g - y * g.sum(axis=-1, keepdims=True),))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gamma.shape, beta.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(a.data.var(axis=-1, keepdims=True) + eps)
    xhat = (a.data - mu) / sigma

    def backward(g):
        dxhat = g * gamma.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / sigma
        lead = tuple(range(a.data.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gamma.data + beta.data, "layer_norm", (a, gamma, beta), backward)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of ``u`` (a vector, or each row of a matrix) with each row of ``v``."""
    vector = u.data.ndim == 1
    U = u.data[None, :] if vector else u.data
    if v.data.ndim != 2 or U.shape[1] != v.shape[1]:
        raise ShapeError("cosine_sim", u.shape, v.shape)
    nu = np.linalg.norm(U, axis=1, keepdims=True)
    nv = np.linalg.norm(v.data, axis=1, keepdims=True)
    if np.any(nu == 0) or np.any(nv == 0):
        raise NumericsError("cosine_sim: zero-norm vector, similarity undefined")
    un, vn = U / nu, v.data / nv
    out = un @ vn.T

    def backward(g):
        G = g[None, :] if vector else g
        dun = G @ vn
        dvn = G.T @ un
        du = (dun - un * (dun * un).sum(axis=1, keepdims=True)) / nu
        dv = (dvn - vn * (dvn * vn).sum(axis=1, keepdims=True)) / nv
        return (du[0] if vector else du), dv

    return _node(out[0] if vector else out, "cosine_sim", (u, v), backward)


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int) -> Tensor:
    """Strided 1-D convolution, time-major: x is N×C_in, w is C_out×C_in×k, out is T×C_out."""
    if x.data.ndim != 2 or w.data.ndim != 3 or w.shape[1] != x.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    c_out, c_in, k = w.shape
    n = x.shape[0]
    if n < k or stride < 1:
        raise ShapeError("conv1d", x.shape, w.shape)
    t = 1 + (n - k) // stride
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=0)[::stride][:t]
    cols = windows.reshape(t, c_in * k)
    wmat = w.data.reshape(c_out, c_in * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data

    def backward(g):
        dw = (g.T @ cols).reshape(w.shape)
        dcols = (g @ wmat).reshape(t, c_in, k)
        dx = np.zeros_like(x.data)
        for j in range(k):
            dx[j:j + stride * (t - 1) + 1:stride] += dcols[:, :, j]
        grads = (dx, dw)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    parents = (x, w) + ((b,) if b is not None else ())
    return _node(out, "conv1d", parents, backward)


# --- Parameter binding ---

def bind(params: Dict[str, np.ndarray], trainable: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
    """Fresh leaf tensors for one forward pass; only ``trainable`` names get gradients."""
    keep = set(params) if trainable is None else set(trainable)
    return {name: Tensor(value, requires_grad=name in keep) for name, value in params.items()}


def collect_grads(leaves: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in leaves.items() if t.requires_grad}


def reduce_grads(per_item: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Ordered sum of per-example gradients (bit-stable regardless of worker count)."""
    out: Dict[str, np.ndarray] = {}
    for grads in per_item:
        for name, g in grads.items():
            out[name] = g.copy() if name not in out else out[name] + g
    return out


# --- Gradient verification ---

class GradCheckReport(BaseModel):
    max_rel_error: float
    per_input: List[List[float]]
    checked: int


def grad_check(fn: Callable[..., Tensor], point: Sequence[np.ndarray], epsilon: float = 1e-5,
               sample: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn`` against central differences.

    With ``sample`` set, only that many randomly chosen coordinates per input
    are perturbed.
    """
    if not 0 < epsilon <= 1e-2:
        raise NumericsError(f"grad_check: epsilon {epsilon} outside (0, 1e-2]")
    base = [np.array(p, dtype=np.float64) for p in point]

    def evaluate(arrays) -> float:
        value = fn(*[Tensor(a) for a in arrays]).item()
        if not math.isfinite(value):
            raise NumericsError("grad_check: function value is not finite")
        return value

    leaves = [Tensor(a.copy(), requires_grad=True) for a in base]
    out = fn(*leaves)
    if not math.isfinite(out.item()):
        raise NumericsError("grad_check: function value is not finite")
    out.backward()

    rng = np.random.default_rng(seed)
    per_input: List[List[float]] = []
    checked = 0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base[i])
        coords = np.arange(base[i].size)
        if sample is not None and sample < coords.size:
            coords = np.sort(rng.choice(coords, size=sample, replace=False))
        errors = []
        for flat in coords:
            idx = np.unravel_index(flat, base[i].shape)
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[i][idx] += epsilon
            minus[i][idx] -= epsilon
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * epsilon)
            a = float(analytic[idx])
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        per_input.append(errors)
        checked += len(errors)
    worst = max((e for errs in per_input for e in errs), default=0.0)
    return GradCheckReport(max_rel_error=worst, per_input=per_input, checked=checked)
