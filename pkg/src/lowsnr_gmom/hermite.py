"""Symmetric tensors in compressed coordinates and Hermite tensor features.

An order-``k`` symmetric tensor over ``R^d`` is stored by its distinct
entries, one per sorted multi-index ``(i_1 <= ... <= i_k)`` in lexicographic
order.  The Frobenius inner product of the full tensors is recovered with
multiplicity weights ``k! / prod(alpha_i!)``, where ``alpha`` counts how often
each axis occurs in the multi-index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "SymTensor",
    "FeatureVector",
    "multi_indices",
    "index_counts",
    "multiplicities",
    "sym_dim",
    "feature_dim",
    "block_slices",
    "hermite_1d",
    "hermite_tensor",
    "sym_inner",
    "feature_map",
    "feature_matrix",
    "gaussian_limit_covariance",
]


@lru_cache(maxsize=None)
def multi_indices(d: int, k: int) -> tuple[tuple[int, ...], ...]:
    """Sorted multi-indices of length ``k`` over ``range(d)``, lexicographic."""
    return tuple(itertools.combinations_with_replacement(range(d), k))


@lru_cache(maxsize=None)
def index_counts(d: int, k: int) -> np.ndarray:
    """Axis-occurrence counts ``alpha`` of every multi-index, shape ``(C(d+k-1,k), d)``."""
    idx = multi_indices(d, k)
    C = np.zeros((len(idx), d), dtype=np.int64)
    for row, tup in enumerate(idx):
        for i in tup:
            C[row, i] += 1
    C.setflags(write=False)
    return C


@lru_cache(maxsize=None)
def multiplicities(d: int, k: int) -> np.ndarray:
    C = index_counts(d, k)
    mult = np.array([math.factorial(k) / math.prod(math.factorial(c) for c in row) for row in C])
    mult.setflags(write=False)
    return mult


def sym_dim(d: int, k: int) -> int:
    return math.comb(d + k - 1, k)


def feature_dim(d: int, L: int) -> int:
    """Length ``N_L`` of the stacked feature vector of orders ``1..L``."""
    return sum(sym_dim(d, j) for j in range(1, L + 1))


def block_slices(d: int, L: int) -> list[slice]:
    out, start = [], 0
    for j in range(1, L + 1):
        stop = start + sym_dim(d, j)
        out.append(slice(start, stop))
        start = stop
    return out


@dataclass(frozen=True, eq=False)
class SymTensor:
    order: int
    dim: int
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (sym_dim(self.dim, self.order),):
            raise ValueError(
                f"order-{self.order} tensor over R^{self.dim} needs "
                f"{sym_dim(self.dim, self.order)} coordinates, got shape {c.shape}"
            )
        object.__setattr__(self, "coords", c)

    def __mul__(self, scalar: float) -> "SymTensor":
        return SymTensor(self.order, self.dim, self.coords * scalar)

    __rmul__ = __mul__

    def __add__(self, other: "SymTensor") -> "SymTensor":
        _check_same_shape(self, other)
        return SymTensor(self.order, self.dim, self.coords + other.coords)

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        _check_same_shape(self, other)
        return SymTensor(self.order, self.dim, self.coords - other.coords)

    def orthonormal(self) -> np.ndarray:
        """Coordinates in an orthonormal basis of the symmetric subspace."""
        return self.coords * np.sqrt(multiplicities(self.dim, self.order))

    @classmethod
    def from_orthonormal(cls, order: int, dim: int, values) -> "SymTensor":
        return cls(order, dim, np.asarray(values, dtype=float) / np.sqrt(multiplicities(dim, order)))

    def norm(self) -> float:
        return math.sqrt(max(sym_inner(self, self), 0.0))

    def to_full(self) -> np.ndarray:
        """Dense ``d^k`` array (for small cases and cross-checks)."""
        full = np.empty((self.dim,) * self.order)
        lookup = {idx: v for idx, v in zip(multi_indices(self.dim, self.order), self.coords)}
        for idx in itertools.product(range(self.dim), repeat=self.order):
            full[idx] = lookup[tuple(sorted(idx))]
        return full

    @classmethod
    def from_full(cls, full) -> "SymTensor":
        """Compress a dense tensor after symmetrizing it."""
        full = np.asarray(full, dtype=float)
        k, d = full.ndim, (full.shape[0] if full.ndim else 1)
        if k == 0:
            return cls(0, d, full.reshape(1))
        sym = sum(np.transpose(full, p) for p in itertools.permutations(range(k))) / math.factorial(k)
        return cls(k, d, np.array([sym[idx] for idx in multi_indices(d, k)]))


def _check_same_shape(a: SymTensor, b: SymTensor) -> None:
    if a.order != b.order or a.dim != b.dim:
        raise ValueError(
            f"shape mismatch: order {a.order}/dim {a.dim} vs order {b.order}/dim {b.dim}"
        )


def sym_inner(a: SymTensor, b: SymTensor) -> float:
    """Frobenius inner product of the full symmetric tensors."""
    _check_same_shape(a, b)
    return float(np.dot(multiplicities(a.dim, a.order) * a.coords, b.coords))


def hermite_1d(x, kmax: int) -> np.ndarray:
    """Probabilists' Hermite values ``He_0..He_kmax``; appends a trailing axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (kmax + 1,))
    out[..., 0] = 1.0
    if kmax >= 1:
        out[..., 1] = x
    for j in range(1, kmax):
        out[..., j + 1] = x * out[..., j] - j * out[..., j - 1]
    return out


def _hermite_entries(he: np.ndarray, d: int, k: int) -> np.ndarray:
    """Raw tensor entries ``prod_i He_{alpha_i}(x_i)`` from a ``(n, d, kmax+1)`` table."""
    C = index_counts(d, k)
    gathered = he[:, np.arange(d)[None, :], C]  # (n, n_idx, d)
    return gathered.prod(axis=-1)


def hermite_tensor(k: int, x) -> SymTensor:
    """Multivariate Hermite tensor ``H_k(x)`` for identity covariance."""
    if k < 0:
        raise ValueError("order must be non-negative")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    he = hermite_1d(x[None, :], k)
    return SymTensor(k, d, _hermite_entries(he, d, k)[0])


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Stacked Hermite observables of orders ``1..L`` in orthonormal coordinates."""

    L: int
    dim: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (feature_dim(self.dim, self.L),):
            raise ValueError(f"expected {feature_dim(self.dim, self.L)} values, got {v.shape}")
        object.__setattr__(self, "values", v)

    def block(self, j: int) -> SymTensor:
        if not 1 <= j <= self.L:
            raise IndexError(j)
        return SymTensor.from_orthonormal(j, self.dim, self.values[block_slices(self.dim, self.L)[j - 1]])

    def blocks(self) -> list[SymTensor]:
        return [self.block(j) for j in range(1, self.L + 1)]

    def dot(self, other: "FeatureVector") -> float:
        return float(self.values @ other.values)

    @classmethod
    def from_blocks(cls, blocks: list[SymTensor]) -> "FeatureVector":
        dim = blocks[0].dim
        for j, b in enumerate(blocks, start=1):
            if b.order != j or b.dim != dim:
                raise ValueError("blocks must have orders 1..L and a common dimension")
        return cls(len(blocks), dim, np.concatenate([b.orthonormal() for b in blocks]))


def feature_matrix(Y, sigma: float, L: int) -> np.ndarray:
    """Row-wise stacked features ``psi(y_i)`` for an ``(n, d)`` array, shape ``(n, N_L)``."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    X = np.atleast_2d(np.asarray(Y, dtype=float)) / sigma
    d = X.shape[1]
    he = hermite_1d(X, L)
    cols = [_hermite_entries(he, d, j) * np.sqrt(multiplicities(d, j)) for j in range(1, L + 1)]
    return np.concatenate(cols, axis=1)


def feature_map(y, sigma: float, L: int) -> FeatureVector:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return FeatureVector(L, y.size, feature_matrix(y[None, :], sigma, L)[0])


def gaussian_limit_covariance(d: int, L: int) -> np.ndarray:
    """Pure-noise covariance of the stacked features: ``diag(1! I, 2! I, ..., L! I)``."""
    if L < 1:
        raise ValueError("L must be >= 1")
    return np.diag(np.concatenate([np.full(sym_dim(d, j), float(math.factorial(j)))
                                   for j in range(1, L + 1)]))
