"""Dense differentiable primitives on numpy arrays.

A "matrix" is any float ndarray with ``ndim >= 2``; row-wise operations act
on the last axis, so the same functions serve single matrices and stacks of
them (batch, tokens, features).  All arithmetic is carried out in float64
regardless of the storage dtype of the inputs.

Each primitive has a pure forward function, an explicit backward function,
and a small stateful wrapper (:class:`Primitive`) that caches the forward
intermediates so :func:`backward` can be called later.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import InputError, ShapeError, StateError

LN_EPS = 1e-6
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# forward functions
# --------------------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    """Matrix product with a shape check that names both operands."""
    a, b = as_f64(a), as_f64(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got a{a.shape} and b{b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: a{a.shape} cols != b{b.shape} rows")
    return a @ b


def softmax_rows(x) -> np.ndarray:
    x = as_f64(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x) -> np.ndarray:
    x = as_f64(x)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    return _layer_norm_fwd(x, gamma, beta, eps)[0]


def _layer_norm_fwd(x, gamma, beta, eps):
    x = as_f64(x)
    gamma, beta = as_f64(gamma).reshape(-1), as_f64(beta).reshape(-1)
    if gamma.shape[0] != x.shape[-1] or beta.shape[0] != x.shape[-1]:
        raise ShapeError(
            f"layer_norm: gamma{gamma.shape}/beta{beta.shape} do not match width {x.shape[-1]}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def gelu(x) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_f64(x)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _check_labels(z: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y)
    if z.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {z.shape}")
    if y.shape != (z.shape[0],):
        raise ShapeError(f"labels{y.shape} do not match batch of logits{z.shape}")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise InputError(f"labels must lie in [0, {z.shape[1]}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def cross_entropy(z, y) -> float:
    """Mean over the batch of ``-log softmax(z)[y]``."""
    z = as_f64(z)
    y = _check_labels(z, y)
    lp = log_softmax_rows(z)
    return float(-lp[np.arange(z.shape[0]), y].mean())


def kl_soft(z_teacher, z_student, temperature: float = 1.0) -> float:
    """Batch mean of KL(softmax(z_t/T) || softmax(z_s/T)).  Not scaled by T**2."""
    zt, zs = as_f64(z_teacher), as_f64(z_student)
    if zt.shape != zs.shape:
        raise ShapeError(f"kl_soft: teacher{zt.shape} vs student{zs.shape}")
    if not temperature > 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    lpt = log_softmax_rows(zt / temperature)
    lps = log_softmax_rows(zs / temperature)
    pt = np.exp(lpt)
    per_row = (pt * (lpt - lps)).sum(axis=-1)
    return float(per_row.mean())


# --------------------------------------------------------------------------
# backward functions
# --------------------------------------------------------------------------

def matmul_backward(a, b, g):
    """Gradients of ``a @ b`` w.r.t. ``a`` and ``b``; batch dims of ``b`` are summed if broadcast."""
    a, b, g = as_f64(a), as_f64(b), as_f64(g)
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    if gb.ndim > b.ndim:
        gb = gb.reshape(-1, *b.shape).sum(axis=0)
    return ga, gb


def softmax_backward(y, g) -> np.ndarray:
    """Given the softmax output ``y`` and upstream ``g``."""
    y, g = as_f64(y), as_f64(g)
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def layer_norm_backward(cache, g):
    xhat, rstd, gamma = cache
    g = as_f64(g)
    red = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    dxhat = g * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu_backward(x, g) -> np.ndarray:
    x = as_f64(x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return as_f64(g) * (cdf + x * pdf)


def cross_entropy_backward(z, y) -> np.ndarray:
    z = as_f64(z)
    y = _check_labels(z, y)
    p = softmax_rows(z)
    p[np.arange(z.shape[0]), y] -= 1.0
    return p / z.shape[0]


def kl_soft_backward(z_teacher, z_student, temperature: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the student logits only; teacher logits are constants."""
    zt, zs = as_f64(z_teacher), as_f64(z_student)
    if zt.shape != zs.shape:
        raise ShapeError(f"kl_soft: teacher{zt.shape} vs student{zs.shape}")
    pt = softmax_rows(zt / temperature)
    ps = softmax_rows(zs / temperature)
    return (ps - pt) / (temperature * zs.shape[0])


# --------------------------------------------------------------------------
# cached primitives
# --------------------------------------------------------------------------

class Primitive:
    """A forward op that remembers what its backward pass needs."""

    name = "primitive"

    def __init__(self):
        self._cache = None

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        return self._cache

    def forward(self, *inputs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Linear(Primitive):
    """``x @ w + b``.  Parameter gradients are summed over all leading axes."""

    name = "linear"

    def forward(self, x, w, b=None):
        x = as_f64(x)
        w = as_f64(w)
        out = matmul(x, w)
        if b is not None:
            out = out + as_f64(b)
        self._cache = (x, w, b is not None)
        return out

    def backward(self, grad):
        x, w, has_b = self._require_cache()
        grad = as_f64(grad)
        dx = grad @ w.T
        dw = x.reshape(-1, x.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        db = grad.reshape(-1, grad.shape[-1]).sum(axis=0) if has_b else None
        return dx, dw, db


class MatMul(Primitive):
    name = "matmul"

    def forward(self, a, b):
        self._cache = (as_f64(a), as_f64(b))
        return matmul(a, b)

    def backward(self, grad):
        a, b = self._require_cache()
        return matmul_backward(a, b, grad)


class Softmax(Primitive):
    name = "softmax"

    def forward(self, x):
        y = softmax_rows(x)
        self._cache = y
        return y

    def backward(self, grad):
        return (softmax_backward(self._require_cache(), grad),)


class LayerNorm(Primitive):
    name = "layer_norm"

    def __init__(self, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps

    def forward(self, x, gamma, beta):
        y, self._cache = _layer_norm_fwd(x, gamma, beta, self.eps)
        return y

    def backward(self, grad):
        return layer_norm_backward(self._require_cache(), grad)


class GELU(Primitive):
    name = "gelu"

    def forward(self, x):
        x = as_f64(x)
        self._cache = x
        return gelu(x)

    def backward(self, grad):
        return (gelu_backward(self._require_cache(), grad),)


class CrossEntropy(Primitive):
    name = "cross_entropy"

    def forward(self, z, y):
        z = as_f64(z)
        loss = cross_entropy(z, y)
        self._cache = (z, np.asarray(y))
        return loss

    def backward(self, grad=1.0):
        z, y = self._require_cache()
        return (float(grad) * cross_entropy_backward(z, y),)


class KLSoft(Primitive):
    name = "kl_soft"

    def __init__(self, temperature: float = 1.0):
        super().__init__()
        self.temperature = temperature

    def forward(self, z_teacher, z_student):
        loss = kl_soft(z_teacher, z_student, self.temperature)
        self._cache = (as_f64(z_teacher), as_f64(z_student))
        return loss

    def backward(self, grad=1.0):
        zt, zs = self._require_cache()
        return (float(grad) * kl_soft_backward(zt, zs, self.temperature),)


def backward(primitive: Primitive, upstream_grad):
    """Run ``primitive``'s backward pass; returns a tuple of input gradients."""
    return primitive.backward(upstream_grad)
