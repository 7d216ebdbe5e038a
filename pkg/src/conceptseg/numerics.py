"""Dense float64 tensors with taped reverse-mode gradients.

Everything is 64-bit and deterministic: matrix products go through the
loop-order-exact kernels in ``_kernels`` (bit-identical to a naive triple
loop), reductions use numpy's deterministic pairwise sums, and all random
initialization flows through the seeded :class:`Rng`.

A tensor produced by an operation is treated as an immutable value. The
tape is the implicit DAG hanging off ``_parents``; calling
:meth:`Tensor.backward` on a scalar replays it in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad``.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ._kernels import matmul_exact
from .errors import (
    EvaluationError,
    FrozenParameterError,
    ParameterError,
    ShapeError,
)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense float64 array plus its place on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "frozen", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = False
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = "frozen" if self.frozen else ("grad" if self.requires_grad else "const")
        return f"Tensor(shape={self.shape}, {flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def freeze(self) -> "Tensor":
        """Mark immutable: drops it from the tape and hard-errors optimizers."""
        self.frozen = True
        self.requires_grad = False
        return self

    # -- tape plumbing -----------------------------------------------------

    def _attach(self, parents: tuple["Tensor", ...], bwd: Callable) -> "Tensor":
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = parents
            self._bwd = bwd
        return self

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
        # intermediate grads are scratch space; keep only leaf grads
        for node in topo:
            if node._parents:
                node.grad = None

    # -- operators ----------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, _lift(other))

    def __rsub__(self, other) -> "Tensor":
        return sub(_lift(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, _lift(other))

    def __rtruediv__(self, other) -> "Tensor":
        return div(_lift(other), self)

    def __neg__(self) -> "Tensor":
        return mul(self, _lift(-1.0))

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitive operations ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, naive accumulation order; see ``_kernels``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(matmul_exact(a.data, b.data))

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            gb = np.swapaxes(b.data, -1, -2)
            _acc(a, matmul_exact(g, gb))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                ga = a.data.reshape(-1, a.shape[-1])
                gg = g.reshape(-1, g.shape[-1])
                _acc(b, matmul_exact(ga.T, gg))
            else:
                _acc(b, matmul_exact(np.swapaxes(a.data, -1, -2), g))

    return out._attach((a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g: np.ndarray) -> None:
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return out._attach((a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g: np.ndarray) -> None:
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return out._attach((a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g: np.ndarray) -> None:
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return out._attach((a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def bwd(g: np.ndarray) -> None:
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return out._attach((a, b), bwd)


def relu(t: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    mask = t.data > 0.0
    out = Tensor(np.where(mask, t.data, 0.0))

    def bwd(g: np.ndarray) -> None:
        _acc(t, g * mask)

    return out._attach((t,), bwd)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)

    def bwd(g: np.ndarray) -> None:
        _acc(t, g * y * (1.0 - y))

    return out._attach((t,), bwd)


def log(t: Tensor) -> Tensor:
    out = Tensor(np.log(t.data))

    def bwd(g: np.ndarray) -> None:
        _acc(t, g / t.data)

    return out._attach((t,), bwd)


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    out = Tensor(np.logaddexp(0.0, t.data))

    def bwd(g: np.ndarray) -> None:
        x = t.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _acc(t, g * sig)

    return out._attach((t,), bwd)


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is passed only inside the range."""
    out = Tensor(np.clip(t.data, lo, hi))
    mask = (t.data >= lo) & (t.data <= hi)

    def bwd(g: np.ndarray) -> None:
        _acc(t, g * mask)

    return out._attach((t,), bwd)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along `axis` (max subtraction inside)."""
    if t.data.size == 0 or t.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis: shape {t.shape}")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(t, (g - dot) * y)

    return out._attach((t,), bwd)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(t.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g: np.ndarray) -> None:
        if axis is None:
            _acc(t, np.broadcast_to(g, t.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(t, np.broadcast_to(g, t.shape).copy())

    return out._attach((t,), bwd)


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = t.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([t.shape[a] for a in axis]))
    else:
        count = t.shape[axis]
    return tsum(t, axis, keepdims) * (1.0 / count)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(t.data.reshape(shape))

    def bwd(g: np.ndarray) -> None:
        _acc(t, g.reshape(t.shape))

    return out._attach((t,), bwd)


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(t.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def bwd(g: np.ndarray) -> None:
        _acc(t, np.ascontiguousarray(g.transpose(inv)))

    return out._attach((t,), bwd)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not ts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, np.ascontiguousarray(g[tuple(sl)]))

    return out._attach(tuple(ts), bwd)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(start, start + length)
    out = Tensor(np.ascontiguousarray(t.data[tuple(sl)]))

    def bwd(g: np.ndarray) -> None:
        full = np.zeros(t.shape)
        full[tuple(sl)] = g
        _acc(t, full)

    return out._attach((t,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    d = x.shape[-1]

    def bwd(g: np.ndarray) -> None:
        if gain.requires_grad:
            red = tuple(range(g.ndim - 1))
            _acc(gain, (g * xhat).sum(axis=red))
        if bias.requires_grad:
            red = tuple(range(g.ndim - 1))
            _acc(bias, g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
            _acc(x, inv * term)

    return out._attach((x, gain, bias), bwd)


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Only unfrozen parameters may be registered; a parameter frozen after
    registration makes the next ``step`` raise, which is the contract hook
    for freeze-on-growth.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        if lr < 0:
            raise ParameterError(f"lr must be nonnegative, got {lr}")
        if weight_decay < 0:
            raise ParameterError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params: list[Tensor] = []
        for p in params:
            if p.frozen:
                raise FrozenParameterError("cannot register a frozen parameter")
            if not p.requires_grad:
                raise ParameterError("optimizer parameters must have requires_grad")
            self.params.append(p)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.frozen:
                raise FrozenParameterError("optimizer step touched a frozen parameter")
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * (g * g)
            mhat = self._m[i] / bc1
            vhat = self._v[i] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_warmup_lr(epoch: int, total_epochs: int, warmup_epochs: int,
                     base_lr: float) -> float:
    """Linear warm-up then cosine decay to ~0 over the remaining epochs."""
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = max(1, total_epochs - warmup_epochs)
    frac = (epoch - warmup_epochs) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


# -- validation helpers --------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    `f` must rebuild its graph from `params` on every call and return a
    scalar Tensor. Relative error per entry is
    |analytic - fd| / (|analytic| + |fd| + 1e-10).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("grad_check loss is non-finite")
    for p in params:
        p.grad = None
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = float(f().data)
            flat[idx] = orig - eps
            lo = float(f().data)
            flat[idx] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise EvaluationError("grad_check perturbation made loss non-finite")
            fd = (hi - lo) / (2.0 * eps)
            err = abs(an_flat[idx] - fd) / (abs(an_flat[idx]) + abs(fd) + 1e-10)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def checksum(arr) -> str:
    """sha256 of the raw float64 bytes (bitwise identity witness)."""
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    return hashlib.sha256(np.ascontiguousarray(data).tobytes()).hexdigest()


class Rng:
    """Seeded PCG64 stream with named, deterministic children.

    Children derived with the same (seed, key...) path always produce the
    same draws, independent of creation order.
    """

    def __init__(self, seed: int, *key: int):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, *self.key))))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, *self.key, *key)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, lo: float, hi: float, shape=None) -> np.ndarray:
        return self._gen.uniform(lo, hi, shape)

    def integers(self, lo: int, hi: int, shape=None):
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
