"""Dense tensors with reverse-mode differentiation, a seeded random source,
and a central-difference gradient checker.

Everything here is plain numpy.  A :class:`Tensor` records the operation that
produced it only when at least one input requires a gradient and recording is
enabled (see :func:`no_grad`).  ``loss.backward()`` then accumulates
``d(loss)/d(leaf)`` into ``leaf.grad`` for every leaf with
``requires_grad=True``.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "NumericalError",
    "Tensor",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "add",
    "matmul",
    "linear",
    "softmax",
    "log_softmax",
    "layernorm",
    "gelu",
    "mean",
    "concat",
    "broadcast_to",
    "cross_entropy",
    "Rng",
    "GradCheckReport",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("pmoe_grad_enabled", default=True)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (context-local, thread safe)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if type(data) is not np.ndarray or data.dtype.kind != "f":
            data = np.asarray(data)
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(np.float64)
        self.data: np.ndarray = data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return self._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb

        return self._make(a.data / b.data, (a, b), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        src_shape = self.shape
        fancy = _is_fancy(index)

        def backward(g):
            full = np.zeros(src_shape, dtype=g.dtype)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return self._make(self.data[index], (self,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src_shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        return self._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src_shape),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return self._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return self._make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return self._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return self._make(np.log(x), (self,), lambda g: (g / x,))

    def __pow__(self, p: float) -> "Tensor":
        x = self.data
        return self._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data + b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` applied to the last axis of ``x`` (weight is 2-D)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is None:
        parents = (x, weight)
    else:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._make(out, parents, backward)


def attention(x, qkv_w, qkv_b, out_w, out_b, num_heads: int) -> Tensor:
    """Full (non-causal) multi-head self-attention over axis -2, as one op.

    ``qkv_w`` is (D, 3D) with output columns ordered [q | k | v], each split
    into ``num_heads`` contiguous blocks; scores are scaled by 1/sqrt(D/heads).
    """
    x, qkv_w, qkv_b, out_w, out_b = (as_tensor(t) for t in (x, qkv_w, qkv_b, out_w, out_b))
    *lead, t, d = x.shape
    if qkv_w.shape != (d, 3 * d) or out_w.shape != (d, d) or d % num_heads:
        raise ShapeError(f"attention: input {x.shape}, qkv {qkv_w.shape}, out {out_w.shape}, heads {num_heads}")
    h, dh = num_heads, d // num_heads
    scale = 1.0 / np.sqrt(dh)
    nl = len(lead)
    qkv = (x.data @ qkv_w.data + qkv_b.data).reshape(*lead, t, 3, h, dh)
    qkv = np.moveaxis(qkv, (nl + 1, nl + 2), (0, nl + 1))  # (3, *lead, h, t, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    ctx = np.swapaxes(a @ v, -2, -3).reshape(*lead, t, d)
    out = ctx @ out_w.data + out_b.data

    def backward(g):
        g2 = g.reshape(-1, d)
        g_ow = ctx.reshape(-1, d).T @ g2 if out_w.requires_grad else None
        g_ob = g2.sum(axis=0) if out_b.requires_grad else None
        need_in = x.requires_grad or qkv_w.requires_grad or qkv_b.requires_grad
        if not need_in:
            return None, None, None, g_ow, g_ob
        g_ctx = np.swapaxes((g @ out_w.data.T).reshape(*lead, t, h, dh), -2, -3)
        g_a = g_ctx @ np.swapaxes(v, -1, -2)
        g_v = np.swapaxes(a, -1, -2) @ g_ctx
        g_s = a * (g_a - (g_a * a).sum(axis=-1, keepdims=True)) * scale
        g_q = g_s @ k
        g_k = np.swapaxes(g_s, -1, -2) @ q
        g_qkv = np.stack([g_q, g_k, g_v])  # (3, *lead, h, t, dh)
        g_qkv = np.moveaxis(g_qkv, (0, nl + 1), (nl + 1, nl + 2)).reshape(-1, 3 * d)
        g_x = (g_qkv @ qkv_w.data.T).reshape(x.shape) if x.requires_grad else None
        g_qw = x.data.reshape(-1, d).T @ g_qkv if qkv_w.requires_grad else None
        g_qb = g_qkv.sum(axis=0) if qkv_b.requires_grad else None
        return g_x, g_qw, g_qb, g_ow, g_ob

    return Tensor._make(out, (x, qkv_w, qkv_b, out_w, out_b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layernorm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} for dim {d}")
    scale = 1.0 / d
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * scale
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * scale + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.sum(axis=-1, keepdims=True) * scale - xhat * ((gh * xhat).sum(axis=-1, keepdims=True) * scale))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor._make(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for a in axes:
            if not -x.ndim <= a < x.ndim:
                raise ShapeError(f"axis {a} out of range for shape {x.shape}")
        count = int(np.prod([x.shape[a] for a in axes]))
    else:
        count = x.size
    src_shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src_shape).copy(),)

    return Tensor._make(x.data.sum(axis=axis, keepdims=keepdims) * (1.0 / count), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._make(data, tuple(tensors), backward)


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src_shape = x.shape
    try:
        data = np.broadcast_to(x.data, tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._make(data, (x,), lambda g: (_unbroadcast(g, src_shape),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return Tensor._make(np.asarray(loss), (logits,), backward)


class Rng:
    """Seeded random source on numpy's PCG64.

    ``spawn``/``child`` derive independent streams through ``SeedSequence`` so a
    component's draws do not depend on how many draws other components made.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else 0
        else:
            if seed < 0 or seed >= 2**64:
                raise ValueError("seed must be an unsigned 64-bit integer")
            self.seed = int(seed)
            self._ss = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._ss))

    def child(self, *key: int) -> "Rng":
        """Stream keyed by integers, independent of draws already made."""
        ss = np.random.SeedSequence(self._ss.entropy, spawn_key=tuple(self._ss.spawn_key) + tuple(int(k) for k in key))
        return Rng(ss)

    def spawn(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) resampled until every draw lies within ``bound`` std."""
        out = self._gen.normal(0.0, 1.0, size=shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.normal(0.0, 1.0, size=int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def integers(self, low: int, high: int | None = None, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, values, shape=None):
        return self._gen.choice(values, size=shape)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int
    tol: float
    per_param: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _scalar(value) -> float:
    v = value.data if isinstance(value, Tensor) else np.asarray(value)
    if v.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    v = float(v.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericalError("grad_check: f evaluated to a non-finite value")
    return v


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-6,
    max_elements: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads ``params`` (mutated in place while
    probing).  Relative error per element is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps round-off on
    vanishing gradients from dominating.  With ``max_elements`` set, a random
    subset of that many elements per parameter is probed instead of all.
    """
    params = list(params)
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    loss = f()
    _scalar(loss)
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = (0.0, 0, (), 0.0, 0.0)
    per_param = []
    checked = 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idxs = (rng or Rng(0)).permutation(flat.size)[:max_elements]
        p_worst = 0.0
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = _scalar(f())
                flat[i] = orig - h
                fm = _scalar(f())
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[pi].reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            p_worst = max(p_worst, rel)
            if rel > worst[0]:
                worst = (rel, pi, np.unravel_index(i, p.shape), float(ana), float(num))
        per_param.append(p_worst)
    for p in params:
        p.grad = None
    return GradCheckReport(
        max_rel_error=worst[0],
        worst_param=worst[1],
        worst_index=tuple(int(i) for i in worst[2]),
        analytic=worst[3],
        numeric=worst[4],
        checked=checked,
        tol=tol,
        per_param=per_param,
    )
