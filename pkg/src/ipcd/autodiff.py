"""Small reverse-mode autodiff over a recorded tape, plus Adam.

Every op appends one node to the tape of its inputs; ``backward`` walks the
nodes in reverse recording order. Values are float64 numpy arrays.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse
from scipy.special import expit

from ipcd._kernels import neighbor_max


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tape:
    def __init__(self):
        self.nodes: list[tuple] = []  # (op, inputs, backward_fn)
        self.params: dict[str, "Tensor"] = {}
        self._kinks: list[np.ndarray] = []

    def param(self, name: str, value) -> "Tensor":
        t = Tensor(np.asarray(value, dtype=np.float64), self, len(self.nodes), name)
        self.nodes.append(("param", (), None))
        self.params[name] = t
        return t

    def bind(self, arrays: dict[str, np.ndarray], names=None) -> dict[str, "Tensor"]:
        """Register arrays as parameters; names outside ``names`` become constants."""
        out = {}
        for k, v in arrays.items():
            out[k] = self.param(k, v) if names is None or k in names else Tensor(np.asarray(v, dtype=np.float64))
        return out

    def signature(self) -> str:
        """Digest of every relu mask and max selection recorded so far."""
        h = hashlib.sha1()
        for k in self._kinks:
            h.update(np.ascontiguousarray(k).tobytes())
        return h.hexdigest()


class Tensor:
    __slots__ = ("value", "tape", "id", "name")

    def __init__(self, value, tape: Tape | None = None, node_id: int | None = None, name: str | None = None):
        self.value = value
        self.tape = tape
        self.id = node_id
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.id}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _record(op: str, value: np.ndarray, inputs, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = next((t.tape for t in inputs if t.tape is not None and t.id is not None), None)
    if tape is None:
        return Tensor(value)
    node_id = len(tape.nodes)
    tape.nodes.append((op, tuple(inputs), backward))
    return Tensor(value, tape, node_id)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("add", a, b)
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("sub", a, b)
    return _record("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.value > 0  # subgradient 0 at exactly 0
    out = _record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))
    if out.tape is not None:
        out.tape._kinks.append(mask)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = expit(a.value)
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def concat(tensors) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    lead = ts[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in ts):
        raise ShapeError(f"concat: leading shapes differ: {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[-1] for t in ts])[:-1]
    return _record("concat", np.concatenate([t.value for t in ts], axis=-1), ts,
                   lambda g: tuple(np.split(g, splits, axis=-1)))


def gather_rows(x, idx) -> Tensor:
    """Row selection ``x[idx]``; backward scatter-adds, so duplicate indices accumulate."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.value.ndim != 2:
        raise ShapeError(f"gather_rows: expected a 2-D source, got {x.shape}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: indices out of range for {n} rows")

    def backward(g):
        flat = idx.ravel()
        scatter = scipy.sparse.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
        return (np.asarray(scatter @ g.reshape(flat.size, -1)),)

    return _record("gather_rows", x.value[idx], (x,), backward)


def reduce_max(x, axis: int) -> Tensor:
    """Max along ``axis``; gradient goes to the first maximizer."""
    x = _wrap(x)
    arg = np.expand_dims(x.value.argmax(axis=axis), axis)
    value = np.take_along_axis(x.value, arg, axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros(x.shape)
        np.put_along_axis(out, arg, np.expand_dims(g, axis), axis=axis)
        return (out,)

    out = _record("reduce_max", value, (x,), backward)
    if out.tape is not None:
        out.tape._kinks.append(arg)
    return out


def gather_max(x, idx) -> Tensor:
    """Fused ``reduce_max(gather_rows(x, idx), axis=1)`` for an N x k index table.

    Avoids materializing the N x k x C gather; gradient goes to the first
    maximizing neighbor, as in the unfused pair.
    """
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.value.ndim != 2 or idx.ndim != 2 or idx.shape[1] == 0:
        raise ShapeError(f"gather_max: need a 2-D source and an N x k (k>0) table, got {x.shape}, {idx.shape}")
    n, c = x.shape
    if idx.min() < 0 or idx.max() >= n:
        raise ShapeError(f"gather_max: indices out of range for {n} rows")
    best, src = neighbor_max(np.ascontiguousarray(x.value), np.ascontiguousarray(idx))

    def backward(g):
        flat = (src * c + np.arange(c)[None, :]).ravel()
        return (np.bincount(flat, weights=g.ravel(), minlength=n * c).reshape(n, c),)

    out = _record("gather_max", best, (x,), backward)
    if out.tape is not None:
        out.tape._kinks.append(src)
    return out


def sum_all(x) -> Tensor:
    x = _wrap(x)
    return _record("sum", np.array(x.value.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x) -> Tensor:
    x = _wrap(x)
    n = x.value.size
    return _record("mean_all", np.array(x.value.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def frobenius_norm(x) -> Tensor:
    x = _wrap(x)
    v = x.value
    norm = float(np.sqrt(np.sum(v * v)))
    return _record("frobenius_norm", np.array(norm), (x,),
                   lambda g: (v * (float(g) / norm) if norm > 0 else np.zeros_like(v),))


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter registered on its tape."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        return {}
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node_id in range(loss.id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        op, inputs, fn = tape.nodes[node_id]
        if fn is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if inp.id is None or inp.tape is not tape:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
        del grads[node_id]
    return {name: grads.get(t.id, np.zeros_like(t.value)) for name, t in tape.params.items()}


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update; parameters without a gradient are left alone."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = dict(params)
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = params[name] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


# --------------------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    checked: int
    skipped: int


def _richardson(ev, x, i, h, sig0):
    """Extrapolated central difference along coordinate i, or None across a kink."""
    old = x[i]
    diffs = []
    for step in (h, h / 2):
        x[i] = old + step
        fp, sp = ev(x)
        x[i] = old - step
        fm, sm = ev(x)
        x[i] = old
        if sig0 is not None and (sp != sig0 or sm != sig0):
            return None
        diffs.append((fp - fm) / (2 * step))
    return (4.0 * diffs[1] - diffs[0]) / 3.0


def grad_check_report(fn, x, grad, eps: float = 1e-3, coords=None) -> GradCheckReport:
    """Compare ``grad`` against finite differences of ``fn`` at ``x``.

    Uses central differences at steps ``eps`` and ``eps/2`` combined by
    Richardson extrapolation (fourth order), which allows a step large enough
    that rounding in ``fn`` stays far below the tolerance for small gradients.

    ``fn`` returns a float or ``(float, signature)``. When a signature is
    given and a probe changes it (a relu or max decision flips), the step is
    shrunk tenfold up to twice; if the kink is still crossed the coordinate is
    skipped since the function is not differentiable there.
    """
    x = np.array(x, dtype=np.float64, copy=True).ravel()
    grad = np.asarray(grad, dtype=np.float64).ravel()

    def ev(p):
        r = fn(p)
        val, sig = (r if isinstance(r, tuple) else (r, None))
        if not np.isfinite(val):
            raise FloatingPointError("grad_check: function returned a non-finite value")
        return float(val), sig

    _, sig0 = ev(x)
    worst, worst_i, checked, skipped = 0.0, -1, 0, 0
    for i in (range(x.size) if coords is None else coords):
        fd = None
        for step in (eps, eps / 10, eps / 100):
            fd = _richardson(ev, x, i, step, sig0)
            if fd is not None:
                break
        if fd is None:
            skipped += 1
            continue
        err = abs(grad[i] - fd) / max(1e-8, abs(grad[i]) + abs(fd))
        checked += 1
        if err > worst:
            worst, worst_i = err, i
    return GradCheckReport(worst, worst_i, checked, skipped)


def grad_check(fn, x, grad, eps: float = 1e-3, coords=None) -> float:
    return grad_check_report(fn, x, grad, eps, coords).max_rel_error
