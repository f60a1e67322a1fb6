"""Dense numerics: vector primitives, a small reverse-mode tape, Adam, grad checking.

All arithmetic is float64. Matrices are plain ``numpy`` arrays treated as
immutable values; operations return new arrays.

The tape supports a closed operator set (matmul, add, constant scale,
bias_add, tanh, concat, softmax_ce, cosine_distill, l2_normalize). Rows are samples.
Reductions over the batch axis always run in ascending sample order, so a
given computation gives the same bits on every run.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    InvalidDistribution,
    NonFiniteInput,
    NonFiniteLoss,
    ShapeMismatch,
    ZeroVector,
)

ZERO_NORM = 1e-30


def as_matrix(x, ndim=None):
    """Validate and convert to a float64 array; rejects NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeMismatch(f"expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("non-finite entry")
    return arr


def ordered_sum(arr):
    """Sum over axis 0 in ascending index order."""
    arr = np.asarray(arr)
    acc = arr[0].astype(np.float64, copy=True)
    for k in range(1, arr.shape[0]):
        acc += arr[k]
    return acc


def rowdot(x, w):
    """``x @ w.T`` for row batches (w is out x in).

    numpy's own einsum loop rather than BLAS: single-threaded, and each
    row's result is independent of the rest of the batch.
    """
    return np.einsum("bi,oi->bo", np.atleast_2d(x), w)


def coordinate_dot(x, w):
    """``x @ w.T`` with every dot product summed over coordinates in ascending order.

    Slower than :func:`rowdot` but the arithmetic is fully pinned down, so a
    scalar loop reproduces it bit for bit. Used where exact ties matter.
    """
    out = np.zeros((x.shape[0], w.shape[0]))
    for k in range(x.shape[1]):
        out += np.multiply.outer(x[:, k], w[:, k])
    return out


def outer_sum(g, x):
    """``sum_b outer(g_b, x_b)``; einsum accumulates b in ascending order."""
    return np.einsum("bo,bi->oi", g, x)


# ---------------------------------------------------------------------------
# vector primitives


def l2_normalize(v):
    v = as_matrix(v, ndim=1)
    n = math.sqrt(float(np.dot(v, v)))
    if n < ZERO_NORM:
        raise ZeroVector("cannot normalise a zero vector")
    return v / n


def _check_pair(a, b):
    a = as_matrix(a, ndim=1)
    b = as_matrix(b, ndim=1)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape[0]} vs {b.shape[0]}")
    return a, b


def cosine_similarity(a, b):
    a, b = _check_pair(a, b)
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroVector("cosine of a zero vector")
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def softmax(z):
    z = as_matrix(z)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(y, p):
    p = as_matrix(p, ndim=1)
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise InvalidDistribution("probabilities must be nonnegative and sum to 1")
    if not 0 <= y < p.shape[0]:
        raise IndexOutOfRange(f"class {y} with {p.shape[0]} classes")
    if p[y] == 0.0:
        return math.inf
    return -math.log(p[y])


def kd_loss(t, t_hat):
    """``1 - cos(t_hat, t)``; symmetric in its arguments."""
    return 1.0 - cosine_similarity(t_hat, t)


def kd_loss_grad(t, t_hat):
    """Gradients of :func:`kd_loss` as ``(d/dt, d/dt_hat)``."""
    t, t_hat = _check_pair(t, t_hat)
    nt = np.linalg.norm(t)
    nh = np.linalg.norm(t_hat)
    if nt < ZERO_NORM or nh < ZERO_NORM:
        raise ZeroVector("kd gradient at a zero vector")
    c = float(np.dot(t, t_hat)) / (nt * nh)
    d_hat = -(t / (nt * nh) - c * t_hat / nh**2)
    d_t = -(t_hat / (nt * nh) - c * t / nt**2)
    return d_t, d_hat


# ---------------------------------------------------------------------------
# reverse-mode tape


class Node:
    __slots__ = ("value", "grad", "name", "track", "per_sample", "cos")

    def __init__(self, value, name=None, track=True):
        self.value = value
        self.grad = None
        self.name = name
        self.track = track

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if not self.track:
            return
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else g
        else:
            self.grad = self.grad + g


class Tape:
    """Records forward operations; :meth:`backward` replays them in reverse.

    Parameters enter via :meth:`param` and receive gradients keyed by name.
    Plain inputs enter via :meth:`const` and are never differentiated.
    """

    def __init__(self):
        self._ops = []
        self._params = {}

    def param(self, name, value):
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        node = Node(as_matrix(value), name)
        self._params[name] = node
        return node

    def const(self, value):
        return Node(as_matrix(value), track=False)

    def _out(self, value, *inputs):
        return Node(value, track=any(n.track for n in inputs))

    # -- operators ---------------------------------------------------------

    def matmul(self, x, w):
        """Row batch ``x`` (B x in) times ``w.T`` (w is out x in)."""
        if x.value.shape[-1] != w.value.shape[1]:
            raise DimensionMismatch(f"matmul {x.shape} by {w.shape}^T")
        out = self._out(rowdot(x.value, w.value), x, w)

        def back():
            g = out.grad
            if w.track:
                w._accumulate(outer_sum(g, x.value))
            if x.track:
                x._accumulate(np.einsum("bo,oi->bi", g, w.value))

        self._ops.append((out, back))
        return out

    def add(self, a, b):
        if np.shape(a.value) != np.shape(b.value):
            raise ShapeMismatch(f"add {np.shape(a.value)} + {np.shape(b.value)}")
        out = self._out(a.value + b.value, a, b)

        def back():
            a._accumulate(out.grad)
            b._accumulate(out.grad)

        self._ops.append((out, back))
        return out

    def scale(self, x, k):
        """Multiply by a fixed constant (LoRA's alpha / r)."""
        out = self._out(x.value * k, x)

        def back():
            x._accumulate(out.grad * k)

        self._ops.append((out, back))
        return out

    def bias_add(self, x, b):
        if x.value.shape[-1] != b.value.shape[0]:
            raise DimensionMismatch(f"bias {b.shape} on {x.shape}")
        out = self._out(x.value + b.value[None, :], x, b)

        def back():
            x._accumulate(out.grad)
            if b.track:
                b._accumulate(ordered_sum(out.grad))

        self._ops.append((out, back))
        return out

    def tanh(self, x):
        y = np.tanh(x.value)
        out = self._out(y, x)

        def back():
            x._accumulate(out.grad * (1.0 - y * y))

        self._ops.append((out, back))
        return out

    def concat(self, a, b):
        if a.value.shape[0] != b.value.shape[0]:
            raise ShapeMismatch("concat over differing batch sizes")
        split = a.value.shape[1]
        out = self._out(np.concatenate([a.value, b.value], axis=1), a, b)

        def back():
            a._accumulate(out.grad[:, :split])
            b._accumulate(out.grad[:, split:])

        self._ops.append((out, back))
        return out

    def l2_normalize(self, x):
        norms = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
        if np.any(norms < ZERO_NORM):
            raise ZeroVector("row with zero norm")
        y = x.value / norms
        out = self._out(y, x)

        def back():
            g = out.grad
            x._accumulate((g - y * (g * y).sum(axis=1, keepdims=True)) / norms)

        self._ops.append((out, back))
        return out

    def softmax_ce(self, logits, labels):
        """Mean softmax cross-entropy over the batch (scalar node)."""
        z = logits.value
        labels = np.asarray(labels, dtype=np.int64)
        n, c = z.shape
        if labels.shape != (n,):
            raise ShapeMismatch("one label per row required")
        if np.any(labels < 0) or np.any(labels >= c):
            raise IndexOutOfRange("label outside [0, C)")
        shifted = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        per = logsum - shifted[np.arange(n), labels]
        out = self._out(float(ordered_sum(per)) / n, logits)
        out.per_sample = per

        def back():
            p = softmax(z)
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(p * (out.grad / n))

        self._ops.append((out, back))
        return out

    def cosine_distill(self, t, t_hat, weight=1.0):
        """``weight * mean_b (1 - cos(t_hat_b, t_b))`` (scalar node)."""
        if t.value.shape != t_hat.value.shape:
            raise DimensionMismatch(f"{t.shape} vs {t_hat.shape}")
        a, h = t.value, t_hat.value
        na = np.sqrt((a * a).sum(axis=1, keepdims=True))
        nh = np.sqrt((h * h).sum(axis=1, keepdims=True))
        if np.any(na < ZERO_NORM) or np.any(nh < ZERO_NORM):
            raise ZeroVector("zero vector in distillation loss")
        cos = (a * h).sum(axis=1, keepdims=True) / (na * nh)
        n = a.shape[0]
        per = 1.0 - cos[:, 0]
        out = self._out(weight * float(ordered_sum(per)) / n, t, t_hat)
        out.per_sample = per
        out.cos = cos[:, 0]

        def back():
            k = out.grad * weight / n
            t_hat._accumulate(-k * (a / (na * nh) - cos * h / nh**2))
            t._accumulate(-k * (h / (na * nh) - cos * a / na**2))

        self._ops.append((out, back))
        return out

    # -- adjoint -------------------------------------------------------------

    def backward(self, loss):
        """Gradients of scalar ``loss`` for every registered parameter.

        Parameters that the loss does not reach get an all-zero gradient.
        """
        if not math.isfinite(loss.value):
            raise NonFiniteLoss(f"loss is {loss.value}")
        loss.grad = 1.0
        for out, back in reversed(self._ops):
            # branches the loss never reads carry no gradient
            if out.grad is not None:
                back()
        grads = {}
        for name, node in self._params.items():
            grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    """Adam moments plus hyperparameters. Weight decay is decoupled."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One Adam update. Returns a new parameter dict; ``state`` is advanced in place.

    Only keys present in ``grads`` are updated. Decay is applied after the
    moment step as ``p <- p - lr * wd * p``.
    """
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    new = dict(params)
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeMismatch(f"{name}: grad {np.shape(g)} vs param {np.shape(p)}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p = p - state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        if state.weight_decay:
            p = p - state.lr * state.weight_decay * p
        new[name] = p
    return new


def grad_check(fn, params, h=1e-5):
    """Compare analytic gradients against central differences.

    ``fn(params) -> (loss, grads)``. Returns the max over every coordinate of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    _, grads = fn(params)
    worst = 0.0
    for name in sorted(grads):
        base = np.asarray(params[name], dtype=np.float64)
        flat = base.ravel()
        analytic = np.asarray(grads[name]).ravel()
        for k in range(flat.size):
            vals = []
            for step in (h, -h):
                bumped = flat.copy()
                bumped[k] += step
                trial = dict(params)
                trial[name] = bumped.reshape(base.shape)
                loss, _ = fn(trial)
                if not math.isfinite(loss):
                    raise NonFiniteLoss(f"{name}[{k}] perturbed loss is {loss}")
                vals.append(loss)
            numeric = (vals[0] - vals[1]) / (2 * h)
            err = abs(analytic[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
