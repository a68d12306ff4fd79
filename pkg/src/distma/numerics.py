"""Shared numerical kernels: quadrature rules, Cholesky, log-space sums and
finite-difference derivatives."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.linalg.lapack import dpotrf

MAX_NODES = 256


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive.

    ``pivot`` is the 1-based index of the leading minor that failed.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class NonFiniteError(FloatingPointError):
    def __init__(self, point, value):
        self.point = np.array(point, dtype=float)
        self.value = value
        super().__init__(f"non-finite function value {value!r} at {self.point.tolist()}")


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    def __len__(self):
        return len(self.nodes)


def _check_count(n):
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= MAX_NODES:
        raise ValueError(f"node count must be an integer in [1, {MAX_NODES}], got {n!r}")


def _golub_welsch(offdiag, n, kind):
    if n == 1:
        nodes = np.zeros(1)
        weights = np.ones(1)
    else:
        nodes, vecs = eigh_tridiagonal(np.zeros(n), offdiag)
        weights = vecs[0] ** 2
        # rules are symmetric about the origin; enforce it exactly
        nodes = 0.5 * (nodes - nodes[::-1])
        weights = 0.5 * (weights + weights[::-1])
        weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@lru_cache(maxsize=None)
def gauss_hermite(n: int) -> QuadratureRule:
    """Gauss-Hermite rule for the standard normal weight.

    ``sum(w * f(z))`` approximates ``E[f(Z)]`` for ``Z ~ N(0, 1)`` and is exact
    for polynomials of degree ``2n - 1`` or less.
    """
    _check_count(n)
    k = np.arange(1, n, dtype=float)
    nodes, weights = _golub_welsch(np.sqrt(k), n, "gauss_hermite_prob")
    return QuadratureRule(nodes, weights, "gauss_hermite_prob")


@lru_cache(maxsize=None)
def gauss_legendre_01(n: int) -> QuadratureRule:
    """Gauss-Legendre rule mapped to the unit interval with unit total mass."""
    _check_count(n)
    k = np.arange(1, n, dtype=float)
    nodes, weights = _golub_welsch(k / np.sqrt(4.0 * k * k - 1.0), n, "gauss_legendre_01")
    nodes = 0.5 * (nodes + 1.0)
    nodes.setflags(write=False)
    return QuadratureRule(nodes, weights, "gauss_legendre_01")


def cholesky(A) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got shape {A.shape}")
    scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T)) > 1e-12 * scale:
        raise ValueError("cholesky needs a symmetric matrix")
    L, info = dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info))
    if info < 0:
        raise ValueError(f"dpotrf argument error ({info})")
    return L


def log_sum_exp(xs, axis=None):
    """Overflow-safe ``log(sum(exp(xs)))``; all ``-inf`` inputs give ``-inf``."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    m = np.max(xs, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(xs - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _eval(f, x):
    val = f(x)
    if not np.isfinite(val):
        raise NonFiniteError(x, val)
    return float(val)


def fd_gradient(f: Callable[[np.ndarray], float], x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with step ``rel_step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    h = rel_step * np.maximum(1.0, np.abs(x))
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        g[i] = (_eval(f, xp) - _eval(f, xm)) / (xp[i] - xm[i])
    return g


def fd_hessian(f: Callable[[np.ndarray], float], x, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian, symmetrized."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    f0 = _eval(f, x)
    H = np.empty((n, n))

    def shifted(*moves):
        xs = x.copy()
        for i, s in moves:
            xs[i] += s * h[i]
        return _eval(f, xs)

    for i in range(n):
        H[i, i] = (shifted((i, 1)) - 2.0 * f0 + shifted((i, -1))) / h[i] ** 2
        for j in range(i + 1, n):
            H[i, j] = (
                shifted((i, 1), (j, 1))
                - shifted((i, 1), (j, -1))
                - shifted((i, -1), (j, 1))
                + shifted((i, -1), (j, -1))
            ) / (4.0 * h[i] * h[j])
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)
