"""Kronecker composition of weight matrices from templates and scalers.

A weight ``W`` of shape ``(t1*s1, t2*s2)`` is built as ``sum_i T_i (x) S_i``
with templates ``T_i`` of shape ``(t1, t2)`` and scalers ``S_i`` of shape
``(s1, s2)``.  Block ``(j, k)`` of ``W`` (an ``s1 x s2`` tile) therefore equals
``sum_i T_i[j, k] * S_i``, which is what the gradients below exploit: they work
on a ``(t1, s1, t2, s2)`` view of the upstream gradient and never build a
Kronecker-expanded intermediate.

Template and scaler lists may be given either as sequences of 2-D arrays or
as one stacked 3-D array ``(n, rows, cols)``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor_core import as_f64


def kron_product(a, b) -> np.ndarray:
    """``a (x) b``: block ``(j, k)`` of the result is ``a[j, k] * b``."""
    a, b = as_f64(a), as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kron_product needs matrices, got {a.shape} and {b.shape}")
    m, n = a.shape
    p, q = b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(m * p, n * q)


def _stack(mats, what: str) -> np.ndarray:
    if isinstance(mats, np.ndarray) and mats.ndim == 3:
        out = as_f64(mats)
    else:
        mats = list(mats)
        if not mats:
            raise ShapeError(f"empty {what} list")
        shapes = {np.shape(m) for m in mats}
        if len(shapes) != 1:
            raise ShapeError(f"{what} have heterogeneous shapes {sorted(shapes)}")
        out = np.stack([as_f64(m) for m in mats])
    if out.ndim != 3 or out.shape[0] == 0:
        raise ShapeError(f"{what} must be a nonempty stack of matrices, got shape {out.shape}")
    return out


def compose_weight(templates: Sequence | np.ndarray, scalers: Sequence | np.ndarray) -> np.ndarray:
    """``W = sum_i templates[i] (x) scalers[i]``, summed in ascending ``i``."""
    T = _stack(templates, "templates")
    S = _stack(scalers, "scalers")
    if T.shape[0] != S.shape[0]:
        raise ShapeError(f"{T.shape[0]} templates but {S.shape[0]} scalers")
    n, t1, t2 = T.shape
    _, s1, s2 = S.shape
    w = np.zeros((t1, s1, t2, s2))
    for i in range(n):
        w += T[i][:, None, :, None] * S[i][None, :, None, :]
    return w.reshape(t1 * s1, t2 * s2)


def _grid_view(upstream, t1: int, t2: int) -> np.ndarray:
    g = as_f64(upstream)
    if g.ndim != 2:
        raise ShapeError(f"upstream gradient must be a matrix, got {g.shape}")
    rows, cols = g.shape
    if rows % t1:
        raise ShapeError(f"rows={rows} not divisible by template rows t1={t1}")
    if cols % t2:
        raise ShapeError(f"cols={cols} not divisible by template cols t2={t2}")
    return g.reshape(t1, rows // t1, t2, cols // t2)


def grad_scalers(upstream, templates) -> np.ndarray:
    """``dS_i = sum_{j,k} T_i[j, k] * G_jk`` for every template ``i``.

    Returns a stacked ``(n, s1, s2)`` array.
    """
    T = _stack(templates, "templates")
    G = _grid_view(upstream, T.shape[1], T.shape[2])
    return np.einsum("njk,jakb->nab", T, G)


def grad_templates(upstream, scalers) -> np.ndarray:
    """``dT_i[j, k] = <S_i, G_jk>`` (Frobenius product with block ``(j, k)``).

    Returns a stacked ``(n, t1, t2)`` array.
    """
    S = _stack(scalers, "scalers")
    g = as_f64(upstream)
    if g.ndim != 2:
        raise ShapeError(f"upstream gradient must be a matrix, got {g.shape}")
    s1, s2 = S.shape[1:]
    if g.shape[0] % s1:
        raise ShapeError(f"rows={g.shape[0]} not divisible by scaler rows s1={s1}")
    if g.shape[1] % s2:
        raise ShapeError(f"cols={g.shape[1]} not divisible by scaler cols s2={s2}")
    G = g.reshape(g.shape[0] // s1, s1, g.shape[1] // s2, s2)
    return np.einsum("nab,jakb->njk", S, G)


def block_partition(w, t1: int, t2: int) -> list[list[np.ndarray]]:
    """Split ``w`` into a ``t1 x t2`` grid of equal blocks (row-major)."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"block_partition needs a matrix, got {w.shape}")
    rows, cols = w.shape
    if t1 < 1 or rows % t1:
        raise ShapeError(f"rows={rows} not divisible into t1={t1} bands")
    if t2 < 1 or cols % t2:
        raise ShapeError(f"cols={cols} not divisible into t2={t2} bands")
    h, v = rows // t1, cols // t2
    return [[w[j * h:(j + 1) * h, k * v:(k + 1) * v] for k in range(t2)] for j in range(t1)]


def assemble_blocks(grid: list[list[np.ndarray]]) -> np.ndarray:
    return np.block(grid)
