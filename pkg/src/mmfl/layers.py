"""Learnable layers, parameter initialization and the Adam optimizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .autograd import Tensor, apply, whitening_matrix
from .errors import BatchTooSmall, DimMismatch, InvalidSpec, MissingGradient, ShapeMismatch

logger = logging.getLogger(__name__)

ParameterSet = dict[str, np.ndarray]

MODES = ("train", "eval", "batch")


class Module:
    """Container of named parameters, buffers and child modules.

    Parameters are :class:`Tensor` objects that receive gradients; buffers are
    plain arrays (running statistics) that travel with the state dict but are
    never optimized.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self.register_buffer(name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self) -> ParameterSet:
        """Copies of all parameters followed by all buffers."""
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = set(self.parameters()) | {n for n, _ in self.named_buffers()}
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise ShapeMismatch(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        self._load(state, "")

    def _load(self, state, prefix):
        for name, p in self._params.items():
            arr = np.asarray(state[prefix + name])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{prefix + name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, b in list(self._buffers.items()):
            arr = np.asarray(state[prefix + name])
            if arr.shape != b.shape:
                raise ShapeMismatch(f"{prefix + name}: expected {b.shape}, got {arr.shape}")
            self.register_buffer(name, arr.astype(b.dtype, copy=True))
        for cname, child in self._children.items():
            child._load(state, f"{prefix}{cname}.")

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for float64 checks)."""
        for p in self._params.values():
            p.data = p.data.astype(dtype)
        for name, b in list(self._buffers.items()):
            self.register_buffer(name, b.astype(dtype))
        for child in self._children.values():
            child.astype(dtype)
        return self

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters().values():
            p.requires_grad = flag
        return self


def _param(p: Tensor, frozen: bool) -> Tensor:
    return p.detach() if frozen else p


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """Shape description of one layer, consumed by :func:`init_params`.

    ``kind`` is one of ``dense``, ``conv2d``, ``bw`` or ``bn``. For dense and
    conv layers ``in_dim``/``out_dim`` are features or channels; for the
    normalizers only ``in_dim`` is used.
    """

    kind: str
    in_dim: int
    out_dim: int = 0
    kernel: int = 3
    activation: str | None = "relu"


def init_params(spec: LayerSpec, seed: int | np.random.Generator, dtype=np.float32) -> ParameterSet:
    """Deterministically initialize the parameters of one layer.

    Weights feeding a relu get He-uniform bounds sqrt(6 / fan_in); other
    weights get Xavier-uniform sqrt(6 / (fan_in + fan_out)). Biases and
    shifts start at zero, scales at one.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if spec.in_dim <= 0:
        raise InvalidSpec(f"in_dim must be positive, got {spec.in_dim}")
    if spec.kind in ("dense", "conv2d"):
        if spec.out_dim <= 0:
            raise InvalidSpec(f"out_dim must be positive, got {spec.out_dim}")
        if spec.kind == "dense":
            shape = (spec.in_dim, spec.out_dim)
            fan_in, fan_out = spec.in_dim, spec.out_dim
        else:
            if spec.kernel <= 0 or spec.kernel % 2 == 0:
                raise InvalidSpec(f"conv kernel must be odd and positive, got {spec.kernel}")
            shape = (spec.out_dim, spec.in_dim, spec.kernel, spec.kernel)
            fan_in = spec.in_dim * spec.kernel ** 2
            fan_out = spec.out_dim * spec.kernel ** 2
        if spec.activation == "relu":
            bound = np.sqrt(6.0 / fan_in)
        elif spec.activation is None:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            raise InvalidSpec(f"unsupported activation {spec.activation!r}")
        return {
            "weight": rng.uniform(-bound, bound, size=shape).astype(dtype),
            "bias": np.zeros(spec.out_dim, dtype=dtype),
        }
    if spec.kind == "bw":
        d = spec.in_dim
        return {
            "gamma": np.ones(d, dtype=dtype),
            "beta": np.zeros(d, dtype=dtype),
            "running_mean": np.zeros(d, dtype=dtype),
            "running_cov": np.eye(d, dtype=dtype),
        }
    if spec.kind == "bn":
        d = spec.in_dim
        return {
            "gamma": np.ones(d, dtype=dtype),
            "beta": np.zeros(d, dtype=dtype),
            "running_mean": np.zeros(d, dtype=dtype),
            "running_var": np.ones(d, dtype=dtype),
        }
    raise InvalidSpec(f"unknown layer kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, activation: str | None = "relu", rng=0):
        super().__init__()
        p = init_params(LayerSpec("dense", in_dim, out_dim, activation=activation), rng)
        self.weight = Tensor(p["weight"], requires_grad=True)
        self.bias = Tensor(p["bias"], requires_grad=True)

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeMismatch(f"dense expects (n, {self.weight.shape[0]}), got {x.shape}")
        return x @ _param(self.weight, frozen) + _param(self.bias, frozen)


class Conv2dLayer(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, rng=0):
        super().__init__()
        if stride <= 0:
            raise InvalidSpec("stride must be positive")
        p = init_params(LayerSpec("conv2d", in_ch, out_ch, kernel=kernel), rng)
        self.kernels = Tensor(p["weight"], requires_grad=True)
        self.bias = Tensor(p["bias"], requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return conv2d_forward(self, x, frozen=frozen)


def conv2d_forward(layer: Conv2dLayer, x: Tensor, frozen: bool = False) -> Tensor:
    """Zero-padded 'same' cross-correlation plus bias."""
    return apply("conv2d", [x, _param(layer.kernels, frozen), _param(layer.bias, frozen)], stride=layer.stride)


def compute_whitening_matrix(cov, eps: float = 1e-5, method: str = "zca") -> Tensor:
    """W with W (cov + eps I) W^T = I; ZCA gives the symmetric U diag((l+eps)^-1/2) U^T."""
    c = cov.data if isinstance(cov, Tensor) else np.asarray(cov)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeMismatch(f"covariance must be square, got {c.shape}")
    return Tensor(whitening_matrix(c, eps, method), dtype=c.dtype if c.dtype.kind == "f" else np.float64)


class BatchWhitening(Module):
    """Batch whitening followed by a per-feature affine map.

    Modes: ``train`` whitens with batch statistics and updates the running
    estimates; ``batch`` whitens with batch statistics without touching them;
    ``eval`` uses the running estimates.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1, method: str = "zca"):
        super().__init__()
        if eps <= 0:
            raise InvalidSpec("eps must be positive")
        if not 0 < momentum < 1:
            raise InvalidSpec("momentum must lie in (0, 1)")
        if method not in ("zca", "cholesky"):
            raise InvalidSpec(f"unknown whitening method {method!r}")
        p = init_params(LayerSpec("bw", dim), 0)
        self.dim, self.eps, self.momentum, self.method = dim, eps, momentum, method
        self.gamma = Tensor(p["gamma"], requires_grad=True)
        self.beta = Tensor(p["beta"], requires_grad=True)
        self.register_buffer("running_mean", p["running_mean"])
        self.register_buffer("running_cov", p["running_cov"])

    def __call__(self, x: Tensor, mode: str = "train", frozen: bool = False) -> Tensor:
        return batch_whiten_forward(self, x, mode, frozen=frozen)


def batch_whiten_forward(layer: BatchWhitening, batch: Tensor, mode: str = "train", frozen: bool = False) -> Tensor:
    if batch.ndim != 2 or batch.shape[1] != layer.dim:
        raise DimMismatch(f"whitening layer of dim {layer.dim} got batch {batch.shape}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "eval":
        w = whitening_matrix(layer.running_cov.astype(np.float64), layer.eps, layer.method).astype(batch.dtype)
        xhat = (batch - Tensor(layer.running_mean.astype(batch.dtype))) @ Tensor(w.T.copy())
    else:
        n = batch.shape[0]
        if n < 2:
            raise BatchTooSmall(f"whitening needs at least 2 rows in {mode} mode, got {n}")
        xhat = apply("batch_whiten", [batch], eps=layer.eps, method=layer.method)
        if mode == "train":
            x = batch.data
            mu = x.mean(axis=0)
            xc = x - mu
            cov = xc.T @ xc / n
            m = layer.momentum
            rc = (1 - m) * layer.running_cov + m * cov
            layer.set_buffer("running_mean", ((1 - m) * layer.running_mean + m * mu).astype(layer.running_mean.dtype))
            layer.set_buffer("running_cov", (0.5 * (rc + rc.T)).astype(layer.running_cov.dtype))
    return xhat * _param(layer.gamma, frozen) + _param(layer.beta, frozen)


class BatchNorm(Module):
    """Plain per-feature batch normalization (the ablation normalizer)."""

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        p = init_params(LayerSpec("bn", dim), 0)
        self.dim, self.eps, self.momentum = dim, eps, momentum
        self.gamma = Tensor(p["gamma"], requires_grad=True)
        self.beta = Tensor(p["beta"], requires_grad=True)
        self.register_buffer("running_mean", p["running_mean"])
        self.register_buffer("running_var", p["running_var"])

    def __call__(self, x: Tensor, mode: str = "train", frozen: bool = False) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimMismatch(f"batch norm of dim {self.dim} got batch {x.shape}")
        if mode == "eval":
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - Tensor(self.running_mean.astype(x.dtype))) * Tensor(scale.astype(x.dtype))
        else:
            if x.shape[0] < 2:
                raise BatchTooSmall(f"batch norm needs at least 2 rows, got {x.shape[0]}")
            xhat = apply("batch_norm", [x], eps=self.eps)
            if mode == "train":
                m = self.momentum
                self.set_buffer("running_mean", ((1 - m) * self.running_mean + m * x.data.mean(axis=0)).astype(self.running_mean.dtype))
                self.set_buffer("running_var", ((1 - m) * self.running_var + m * x.data.var(axis=0)).astype(self.running_var.dtype))
        return xhat * _param(self.gamma, frozen) + _param(self.beta, frozen)


def make_norm(kind: str, dim: int, eps: float = 1e-5, momentum: float = 0.1, method: str = "zca") -> Module:
    if kind == "bw":
        return BatchWhitening(dim, eps=eps, momentum=momentum, method=method)
    if kind == "bn":
        return BatchNorm(dim, eps=eps, momentum=momentum)
    raise InvalidSpec(f"unknown normalizer {kind!r}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction. ``beta1`` doubles as the 'momentum' knob."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in grads]
        if missing:
            raise MissingGradient(f"no gradient for {missing}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        for k, p in self.params.items():
            g = np.asarray(grads[k], dtype=p.dtype)
            m = b1 * self.m[k] + (1 - b1) * g
            v = b2 * self.v[k] + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            # rebinding keeps previously exported snapshots intact
            p.data = (p.data - update).astype(p.dtype)


def adam_step(state: Adam, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Functional wrapper: apply one Adam update and return the parameter map."""
    if set(params) != set(state.params):
        raise MissingGradient("optimizer state does not cover the given parameters")
    state.step(grads)
    return dict(params)
