"""Minimal dense tensor with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass registered
under an op kind; :func:`apply` runs its forward pass and, when any input
tracks gradients, records a node so :meth:`Tensor.backward` can replay the
graph in reverse topological order.

Broadcasting is deliberately narrow: operands of a binary op must have equal
shapes, or one of them is a scalar, or one is a 1-D row vector matching the
last axis of the other (the bias case). Anything else needs an explicit
reshape.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, EigenFailure, EmptyGraph, NotScalar, ShapeMismatch

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One executed op in a graph: the function object plus its inputs."""

    __slots__ = ("fn", "inputs")

    def __init__(self, fn: "Function", inputs: tuple["Tensor", ...]):
        self.fn = fn
        self.inputs = inputs

    @property
    def kind(self) -> str:
        return self.fn.kind


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.id = next(_ids)
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return apply("add", [self, self._coerce(other)])

    def __radd__(self, other):
        return apply("add", [self._coerce(other), self])

    def __sub__(self, other):
        return apply("subtract", [self, self._coerce(other)])

    def __rsub__(self, other):
        return apply("subtract", [self._coerce(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", [self], factor=float(other))
        return apply("multiply", [self, self._coerce(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division only supports a python scalar divisor")
        return apply("scale", [self], factor=1.0 / float(other))

    def __neg__(self):
        return apply("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply("matmul", [self, self._coerce(other)])

    @property
    def T(self) -> "Tensor":
        return apply("transpose", [self])

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=tuple(shape))

    def sum(self, axis: int | None = None) -> "Tensor":
        return apply("sum", [self], axis=axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return apply("mean", [self], axis=axis)

    def relu(self) -> "Tensor":
        return apply("relu", [self])

    def sigmoid(self) -> "Tensor":
        return apply("sigmoid", [self])

    def exp(self) -> "Tensor":
        return apply("exp", [self])

    def log(self) -> "Tensor":
        return apply("log", [self])

    # -- differentiation -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if self.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {self.shape}")
        if self._node is None:
            raise EmptyGraph("loss was not produced by any recorded op")
        order = topological_order(self)
        pending: dict[int, np.ndarray] = {self.id: np.ones_like(self.data)}
        for t in reversed(order):
            g = pending.pop(t.id, None)
            if g is None:
                continue
            in_grads = t._node.fn.backward(g)
            for inp, ig in zip(t._node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig, dtype=inp.dtype).reshape(inp.shape)
                if inp._node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                elif inp.id in pending:
                    pending[inp.id] = pending[inp.id] + ig
                else:
                    pending[inp.id] = ig


def topological_order(root: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``root``, each after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.id in seen or t._node is None:
            continue
        seen.add(t.id)
        stack.append((t, True))
        for inp in reversed(t._node.inputs):
            if inp._node is not None and inp.id not in seen:
                stack.append((inp, False))
    return order


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Return d(loss)/d(param) for each named parameter.

    Parameters that do not influence ``loss`` get an all-zero gradient.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

_OPS: dict[str, type["Function"]] = {}


def register(kind: str):
    def deco(cls):
        cls.kind = kind
        _OPS[kind] = cls
        return cls

    return deco


class Function:
    kind = "?"

    def __init__(self, **attrs):
        self.attrs = attrs

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError


def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        cls = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    fn = cls(**attrs)
    out = fn.forward(*(t.data for t in inputs))
    track = grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track, dtype=out.dtype)
    if track:
        result._node = Node(fn, tuple(inputs))
    return result


def op_kinds() -> list[str]:
    return sorted(_OPS)


# -- broadcasting helpers ----------------------------------------------------


def _is_scalar(a: np.ndarray) -> bool:
    return a.ndim == 0 or (a.ndim == 1 and a.shape[0] == 1)


def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeMismatch(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or shape == (1,):
        return np.asarray(g.sum()).reshape(shape)
    # row vector broadcast along leading axes
    return g.reshape(-1, shape[-1]).sum(axis=0)


class _Binary(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, self.kind)
        self.shapes = (a.shape, b.shape)
        return self._compute(a, b)


@register("add")
class Add(_Binary):
    def _compute(self, a, b):
        return a + b

    def backward(self, g):
        sa, sb = self.shapes
        return _reduce_to(g, sa), _reduce_to(g, sb)


@register("subtract")
class Subtract(_Binary):
    def _compute(self, a, b):
        return a - b

    def backward(self, g):
        sa, sb = self.shapes
        return _reduce_to(g, sa), _reduce_to(-g, sb)


@register("multiply")
class Multiply(_Binary):
    def _compute(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        sa, sb = self.shapes
        return _reduce_to(g * self.b, sa), _reduce_to(g * self.a, sb)


@register("scale")
class Scale(Function):
    def forward(self, a):
        self.factor = self.attrs["factor"]
        return (a * self.factor).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * self.factor,)


@register("matmul")
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


@register("relu")
class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * self.mask,)


def stable_sigmoid(a: np.ndarray) -> np.ndarray:
    """Branch form: never exponentiates a positive number."""
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)


@register("sigmoid")
class Sigmoid(Function):
    def forward(self, a):
        self.out = stable_sigmoid(a)
        return self.out

    def backward(self, g):
        return (g * self.out * (1 - self.out),)


@register("exp")
class Exp(Function):
    def forward(self, a):
        limit = np.log(np.finfo(a.dtype).max)
        if a.size and a.max() >= limit:
            raise DomainError(f"exp overflow: input {a.max():.4g} exceeds {limit:.4g}")
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


@register("log")
class Log(Function):
    def forward(self, a):
        if a.size and a.min() <= 0:
            raise DomainError(f"log of non-positive value {a.min():.4g}")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


@register("sum")
class Sum(Function):
    def forward(self, a):
        self.axis = self.attrs.get("axis")
        self.shape = a.shape
        return np.asarray(a.sum(axis=self.axis), dtype=a.dtype)

    def backward(self, g):
        if self.axis is None:
            return (np.broadcast_to(g, self.shape),)
        return (np.broadcast_to(np.expand_dims(g, self.axis), self.shape),)


@register("mean")
class Mean(Function):
    def forward(self, a):
        self.axis = self.attrs.get("axis")
        self.shape = a.shape
        self.count = a.size if self.axis is None else a.shape[self.axis]
        return np.asarray(a.mean(axis=self.axis), dtype=a.dtype)

    def backward(self, g):
        g = g / self.count
        if self.axis is None:
            return (np.broadcast_to(g, self.shape),)
        return (np.broadcast_to(np.expand_dims(g, self.axis), self.shape),)


@register("concat")
class Concat(Function):
    """Concatenate along the last axis."""

    def forward(self, *xs):
        lead = {x.shape[:-1] for x in xs}
        if len(lead) != 1:
            raise ShapeMismatch(f"concat: leading shapes differ {[x.shape for x in xs]}")
        self.widths = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1)

    def backward(self, g):
        cuts = np.cumsum(self.widths)[:-1]
        return tuple(np.split(g, cuts, axis=-1))


@register("slice")
class Slice(Function):
    """Take ``[start:stop]`` along the last axis."""

    def forward(self, a):
        self.start, self.stop = self.attrs["start"], self.attrs["stop"]
        if not 0 <= self.start <= self.stop <= a.shape[-1]:
            raise ShapeMismatch(f"slice [{self.start}:{self.stop}] outside width {a.shape[-1]}")
        self.shape = a.shape
        return a[..., self.start:self.stop].copy()

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[..., self.start:self.stop] = g
        return (out,)


@register("l2_normalize")
class L2Normalize(Function):
    """Row-wise unit scaling. Rows with norm below 1e-12 map to zero."""

    tiny = 1e-12

    def forward(self, a):
        if a.ndim != 2:
            raise ShapeMismatch(f"l2_normalize expects a 2-D input, got {a.shape}")
        norm = np.sqrt((a * a).sum(axis=1, keepdims=True))
        self.live = norm > self.tiny
        self.norm = np.where(self.live, norm, 1)
        self.out = np.where(self.live, a / self.norm, 0).astype(a.dtype, copy=False)
        return self.out

    def backward(self, g):
        proj = (g * self.out).sum(axis=1, keepdims=True)
        return (np.where(self.live, (g - self.out * proj) / self.norm, 0),)


@register("transpose")
class Transpose(Function):
    def forward(self, a):
        if a.ndim != 2:
            raise ShapeMismatch(f"transpose expects a 2-D input, got {a.shape}")
        return a.T.copy()

    def backward(self, g):
        return (g.T,)


@register("reshape")
class Reshape(Function):
    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.attrs["shape"])
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from None

    def backward(self, g):
        return (g.reshape(self.in_shape),)


# -- composite layer ops -------------------------------------------------------


@register("conv2d")
class Conv2d(Function):
    """Cross-correlation with zero 'same' padding, via im2col."""

    def forward(self, x, w, b):
        stride = self.attrs.get("stride", 1)
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernels {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"conv2d: bias {b.shape} does not match {w.shape[0]} kernels")
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        oh, ow = (h + 2 * ph - kh) // stride + 1, (wd + 2 * pw - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeMismatch(f"conv2d: empty output for input {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        patches = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patches[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
        cols = patches.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
        wmat = w.reshape(o, -1)
        out = cols @ wmat.T + b
        self.saved = (cols, wmat, x.shape, w.shape, xp.shape, stride, oh, ow)
        return out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2).copy()

    def backward(self, g):
        cols, wmat, xshape, wshape, pshape, stride, oh, ow = self.saved
        n, c, h, wd = xshape
        o, _, kh, kw = wshape
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(wshape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros(pshape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        return gxp[:, :, ph:ph + h, pw:pw + wd], gw, gb


@register("avg_pool2d")
class AvgPool2d(Function):
    """Non-overlapping ``size x size`` average pooling."""

    def forward(self, x):
        k = self.attrs["size"]
        n, c, h, w = x.shape
        if h % k or w % k:
            raise ShapeMismatch(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
        self.k = k
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, g):
        k = self.k
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)


def whitening_matrix(cov: np.ndarray, eps: float, method: str = "zca") -> np.ndarray:
    """Whitening matrix W such that W (cov + eps I) W^T = I."""
    d = cov.shape[0]
    try:
        if method == "zca":
            lam, u = np.linalg.eigh(cov)
            return (u * (lam + eps) ** -0.5) @ u.T
        if method == "cholesky":
            chol = np.linalg.cholesky(cov + eps * np.eye(d, dtype=cov.dtype))
            return np.linalg.inv(chol)
    except np.linalg.LinAlgError as exc:
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(cov) if np.isfinite(cov).all() else float("nan")
        raise EigenFailure(f"{method} whitening failed ({exc}); cond(cov)={cond:.3g}") from exc
    raise ValueError(f"unknown whitening method {method!r}")


@register("batch_whiten")
class BatchWhiten(Function):
    """x_hat = W_B (x - mu_B) from batch statistics, differentiable in x.

    The ZCA backward uses the divided-difference form of the matrix function
    derivative. For f(l) = (l + eps)^(-1/2) the divided difference has the
    closed form -1 / (s_i s_j (s_i + s_j)) with s = sqrt(l + eps), which stays
    finite on repeated eigenvalues, so no eigengap guard is needed.
    """

    def forward(self, x):
        n, d = x.shape
        self.eps = self.attrs.get("eps", 1e-5)
        self.method = self.attrs.get("method", "zca")
        mu = x.mean(axis=0)
        xc = x - mu
        cov = xc.T @ xc / n
        self.xc = xc
        if self.method == "zca":
            try:
                lam, u = np.linalg.eigh(cov)
            except np.linalg.LinAlgError as exc:
                raise EigenFailure(f"eigh failed: {exc}") from exc
            s = np.sqrt(np.maximum(lam + self.eps, self.eps))
            self.u, self.s = u, s
            self.w = (u / s) @ u.T
            return xc @ self.w
        self.w = whitening_matrix(cov, self.eps, self.method)
        self.chol = np.linalg.inv(self.w)
        return xc @ self.w.T

    def backward(self, g):
        xc, w = self.xc, self.w
        n = xc.shape[0]
        if self.method == "zca":
            gw = xc.T @ g
            gxc = g @ w
            u, s = self.u, self.s
            k = -1.0 / (s[:, None] * s[None, :] * (s[:, None] + s[None, :]))
            gcov = u @ (k * (u.T @ gw @ u)) @ u.T
        else:
            # x_hat = xc W^T with W = L^-1
            gw = g.T @ xc
            gxc = g @ w
            chol = self.chol
            gl = np.tril(-w.T @ gw @ w.T)
            phi = np.tril(chol.T @ gl)
            phi[np.diag_indices_from(phi)] *= 0.5
            gcov = w.T @ phi @ w
        gcov = 0.5 * (gcov + gcov.T)
        gxc = gxc + 2.0 * xc @ gcov / n
        return (gxc - gxc.mean(axis=0),)


@register("batch_norm")
class BatchNorm(Function):
    """Per-feature standardization with batch statistics."""

    def forward(self, x):
        eps = self.attrs.get("eps", 1e-5)
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        return self.xhat

    def backward(self, g):
        n = g.shape[0]
        xhat = self.xhat
        gx = (self.inv / n) * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))
        return (gx,)


@register("bce_with_logits")
class BCEWithLogits(Function):
    """Elementwise binary cross-entropy from logits; labels are constants."""

    def forward(self, logits, labels):
        if logits.shape != labels.shape:
            raise ShapeMismatch(f"bce: logits {logits.shape} vs labels {labels.shape}")
        self.logits, self.labels = logits, labels
        return np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))

    def backward(self, g):
        return g * (stable_sigmoid(self.logits) - self.labels), None


# -- functional front-end ------------------------------------------------------


def concat(tensors: Iterable[Tensor]) -> Tensor:
    return apply("concat", list(tensors))


def split(t: Tensor, widths: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat` along the last axis."""
    if sum(widths) != t.shape[-1]:
        raise ShapeMismatch(f"split widths {list(widths)} do not sum to {t.shape[-1]}")
    out, start = [], 0
    for w in widths:
        out.append(apply("slice", [t], start=start, stop=start + w))
        start += w
    return out


def l2_normalize(t: Tensor) -> Tensor:
    return apply("l2_normalize", [t])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", [a, b])


def relu(t: Tensor) -> Tensor:
    return apply("relu", [t])


def sigmoid(t: Tensor) -> Tensor:
    return apply("sigmoid", [t])


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``.

    Evaluated in float64 regardless of the dtype of ``x``.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def value(arr):
        with no_grad():
            r = f(Tensor(arr.reshape(base.shape), dtype=np.float64))
        return float(r.data.reshape(-1)[0]) if isinstance(r, Tensor) else float(r)

    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = value(flat)
        flat[k] = orig - h
        fm = value(flat)
        flat[k] = orig
        out[k] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, 1e-8)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
