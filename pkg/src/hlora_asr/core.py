"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op takes and returns :class:`Tensor`. When a
:class:`GradTape` is active and an input requires a gradient, the op appends
a node ``(name, output, inputs, backward)`` to the tape; ``GradTape.backward``
replays those nodes in exact reverse order.

Shapes are explicit. Ops accept leading batch dimensions (``[..., T, d]``)
but never broadcast anything except a bias vector over the last axis.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .kernels import ctc_forward_backward

_ACTIVE: list["GradTape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a loss becomes non-finite while probing a coordinate."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of primitive ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []
        self.visited: list[str] = []
        self.grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    @property
    def ops(self) -> list[str]:
        return [n[0] for n in self.nodes]

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf that requires a gradient.

        Returns a map from ``id(leaf)`` to its gradient array.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n[1]) for n in self.nodes}
        pending = {id(loss): np.ones_like(loss.data)}
        self.visited = []
        for name, out, inputs, fn in reversed(self.nodes):
            self.visited.append(name)
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                if key not in produced:
                    self._leaves[key] = inp
        self.grads = {k: v for k, v in pending.items() if k in self._leaves}
        return self.grads

    def gradient(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t`` from the last backward pass (zeros if it got none)."""
        g = self.grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def _record(name: str, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append((name, out, inputs, backward))
    return out


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record("add", Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _record("sub", Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record("mul", Tensor(a.data * b.data), (a, b),
                   lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", Tensor(x.data * c), (x,), lambda g: (g * c,))


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """``x + c`` for a non-differentiable constant broadcastable onto ``x``."""
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_const: constant {np.shape(c)} would reshape {x.shape}")
    return _record("add_const", Tensor(out), (x,), lambda g: (g,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, so finite differences behave)."""
    k = math.sqrt(2.0 / math.pi)
    x2 = x.data * x.data
    th = np.tanh(k * x.data * (1.0 + 0.044715 * x2))
    out = 0.5 * x.data * (1.0 + th)

    def backward(g):
        du = k * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th ** 2) * du),)

    return _record("gelu", Tensor(out), (x,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record("reshape", Tensor(x.data.reshape(shape)), (x,),
                   lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", Tensor(np.ascontiguousarray(x.data.transpose(axes))), (x,),
                   lambda g: (g.transpose(inv),))


def take(x: Tensor, index: Sequence[int]) -> Tensor:
    """Select entries of a 1-D tensor."""
    idx = np.asarray(index, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("take", Tensor(x.data[idx]), (x,), backward)


# ---------------------------------------------------------------- linear algebra

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y[..., t] = W @ x[..., t] + b`` for ``x[..., d_in]``, ``W[d_out, d_in]``."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with W {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ W.data if x.requires_grad else None
        gW = gb = None
        if W.requires_grad:
            gW = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gW, gb)

    inputs = (x, W) if b is None else (x, W, b)
    return _record("linear", Tensor(out), inputs, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[..., n, m] @ b[..., m, p]`` with identical leading dims."""
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        ga = g @ _swap(b.data) if a.requires_grad else None
        gb = _swap(a.data) @ g if b.requires_grad else None
        return (ga, gb)

    return _record("matmul", Tensor(a.data @ b.data), (a, b), backward)


# ---------------------------------------------------------------- normalisers

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", Tensor(y), (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, max-shifted so large inputs stay finite."""
    if x.shape[-1] < 1:
        raise ShapeError("log_softmax: last dimension must be >= 1")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", Tensor(y), (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        gg = (flat * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gb = flat.sum(axis=0) if bias.requires_grad else None
        return (gx, gg, gb)

    return _record("layer_norm", Tensor(out), (x, gain, bias), backward)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    return _record("sum", Tensor(x.data.sum()), (x,),
                   lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _record("mean", Tensor(x.data.mean()), (x,),
                   lambda g: (np.full_like(x.data, float(g) / n),))


def masked_mean(x: Tensor, lengths: Sequence[int]) -> Tensor:
    """Mean of ``x[b, :lengths[b], :]`` over time, giving ``[B, d]``."""
    B, T, _ = x.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
        raise ShapeError(f"masked_mean: lengths {lengths.tolist()} invalid for {x.shape}")
    w = (np.arange(T)[None, :] < lengths[:, None]) / lengths[:, None]
    out = np.einsum("bt,btd->bd", w, x.data)
    return _record("masked_mean", Tensor(out), (x,),
                   lambda g: (w[:, :, None] * g[:, None, :],))


def weighted_sum(hs: Sequence[Tensor], w: Tensor) -> Tensor:
    """``sum_l softmax(w)_l * hs[l]`` over a list of equal-shape tensors."""
    if len(hs) == 0:
        raise ShapeError("weighted_sum: empty layer list")
    if w.shape != (len(hs),):
        raise ShapeError(f"weighted_sum: {len(hs)} layers but weights {w.shape}")
    shape = hs[0].shape
    for h in hs:
        if h.shape != shape:
            raise ShapeError(f"weighted_sum: layer shapes {shape} and {h.shape} differ")
    e = np.exp(w.data - w.data.max())
    p = e / e.sum()
    out = sum(p[i] * h.data for i, h in enumerate(hs))

    def backward(g):
        gh = [g * p[i] if h.requires_grad else None for i, h in enumerate(hs)]
        gw = None
        if w.requires_grad:
            dp = np.array([(g * h.data).sum() for h in hs])
            gw = p * (dp - (p * dp).sum())
        return (*gh, gw)

    return _record("weighted_sum", Tensor(out), (*hs, w), backward)


# ---------------------------------------------------------------- losses

def nll(logp: Tensor, labels: Sequence[int]) -> Tensor:
    """Per-row ``-logp[b, labels[b]]`` for ``logp[B, C]``."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))

    def backward(g):
        gx = np.zeros_like(logp.data)
        gx[rows, labels] = -g
        return (gx,)

    return _record("nll", Tensor(-logp.data[rows, labels]), (logp,), backward)


def ctc(log_probs: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]],
        blank: int = 0) -> Tensor:
    """Per-utterance CTC loss for ``log_probs[B, T, V]``.

    Infeasible utterances get ``inf`` and contribute no gradient.
    """
    B = log_probs.shape[0]
    losses = np.empty(B)
    grads = np.zeros_like(log_probs.data)
    for b in range(B):
        n = int(lengths[b])
        losses[b], grads[b, :n] = ctc_forward_backward(log_probs.data[b, :n], targets[b], blank)

    return _record("ctc", Tensor(losses), (log_probs,),
                   lambda g: (grads * g[:, None, None],))


# ---------------------------------------------------------------- scalars

def logsumexp(xs: Iterable[float]) -> float:
    """``log(sum(exp(x)))`` over scalars; ``-inf`` is the identity element.

    An empty input returns ``-inf`` (the log of an empty sum).
    """
    vals = [float(v) for v in xs]
    if not vals:
        return -math.inf
    m = max(vals)
    if m == -math.inf or m == math.inf:
        return m
    return m + math.log(math.fsum(math.exp(v - m) for v in vals))


# ---------------------------------------------------------------- verification

def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    ``max_coords`` optionally samples that many coordinates per parameter.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-4]")
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = tape.gradient(p).reshape(-1)
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)  # view: writes below perturb p in place
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError(f"non-finite loss probing {p.name or 'param'}[{i}]")
            numeric = (up - down) / (2 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
