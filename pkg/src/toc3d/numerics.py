"""Dense numeric substrate shared by every other module.

Matrices are plain ``numpy.ndarray`` objects; this module only adds the shape
checks, the few activations the scorer and encoder need (with their
derivatives), and deterministic initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-6
INIT_STD = 0.02

_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(a, name: str = "array", dtype=np.float64) -> np.ndarray:
    a = np.asarray(a, dtype=dtype)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}")
    as_matrix(a, "left operand", a.dtype)
    as_matrix(b, "right operand", b.dtype)
    return a @ b


def layer_norm(x, eps: float = LN_EPS) -> np.ndarray:
    """Affine-free layer norm over the last axis."""
    x = np.asarray(x)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("layer_norm needs a nonempty input")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def layer_norm_backward(grad_out: np.ndarray, x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Gradient of ``layer_norm(x, eps)`` w.r.t. ``x`` given the upstream gradient."""
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    g_mean = grad_out.mean(axis=-1, keepdims=True)
    gy_mean = (grad_out * y).mean(axis=-1, keepdims=True)
    return inv * (grad_out - g_mean - y * gy_mean)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation of GELU."""
    t = x * x
    t *= _GELU_C
    t += 1.0
    t *= x
    t *= _GELU_K
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_K * x * (1.0 + _GELU_C * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples truncated at two standard deviations (resampled)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


@dataclass
class Linear:
    """y = x @ weight.T + bias, weight stored (out, in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be 2-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int, std: float = INIT_STD) -> "Linear":
        return cls(trunc_normal(rng, (out_dim, in_dim), std), np.zeros(out_dim))

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int) -> "Linear":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} does not match layer input {self.in_dim}")
        return x @ self.weight.T + self.bias

    def astype(self, dtype) -> "Linear":
        return Linear(self.weight.astype(dtype), self.bias.astype(dtype))

    def copy(self) -> "Linear":
        return Linear(self.weight.copy(), self.bias.copy())
