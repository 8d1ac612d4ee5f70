"""Signal moments, their Jacobians, and the moment filtration.

``T_k(theta) = E_z[(A(z) theta)^{(x) k}]`` is a finite sum for the latent
models in :mod:`lowsnr_gmom.models`, so everything here is exact.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .hermite import (
    FeatureVector,
    SymTensor,
    index_counts,
    multiplicities,
)
from .models import LatentModel, NoiseSpec

__all__ = [
    "Filtration",
    "signal_moment",
    "signal_moment_jacobian",
    "moment_map",
    "moment_map_jacobian",
    "population_feature_mean",
    "moment_filtration",
    "restricted_moment_jacobian",
    "orthonormal_complement",
    "stacked_jacobian_blocks",
]


def _monomials(V: np.ndarray, k: int) -> np.ndarray:
    """``prod_i V[z, i]^alpha_i`` for every atom and multi-index, shape (Z, n_idx)."""
    C = index_counts(V.shape[1], k)
    return np.prod(V[:, None, :] ** C[None, :, :], axis=-1)


def _monomial_grads(V: np.ndarray, k: int) -> np.ndarray:
    """Partial derivatives of the monomials in ``V[z, i]``, shape (Z, n_idx, d)."""
    d = V.shape[1]
    C = index_counts(d, k)
    lowered = np.maximum(C - 1, 0)
    out = np.empty((V.shape[0], C.shape[0], d))
    for i in range(d):
        exps = C.copy()
        exps[:, i] = lowered[:, i]
        out[:, :, i] = C[None, :, i] * np.prod(V[:, None, :] ** exps[None, :, :], axis=-1)
    return out


def signal_moment(model: LatentModel, theta, k: int) -> SymTensor:
    if k < 1:
        raise ValueError("k must be >= 1")
    V = model.maps @ np.asarray(theta, dtype=float)
    return SymTensor(k, model.d, model.weights @ _monomials(V, k))


def signal_moment_jacobian(model: LatentModel, theta, k: int) -> np.ndarray:
    """Matrix of ``h -> DT_k(theta)[h]`` in raw symmetric coordinates, shape (n_idx, m)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    V = model.maps @ np.asarray(theta, dtype=float)
    G = _monomial_grads(V, k)
    return np.einsum("z,zai,zim->am", model.weights, G, model.maps)


def moment_map(model: LatentModel, theta, noise: NoiseSpec, L: int) -> np.ndarray:
    """Stacked ``(t^j T_j(theta))_{j<=L}`` in orthonormal coordinates, ``t = beta/sigma``."""
    t = noise.t
    V = model.maps @ np.asarray(theta, dtype=float)
    parts = [t**j * (model.weights @ _monomials(V, j)) * np.sqrt(multiplicities(model.d, j))
             for j in range(1, L + 1)]
    return np.concatenate(parts)


def moment_map_jacobian(model: LatentModel, theta, noise: NoiseSpec, L: int) -> np.ndarray:
    """Jacobian of :func:`moment_map` in ``theta``, shape ``(N_L, m)``."""
    t = noise.t
    parts = [t**j * np.sqrt(multiplicities(model.d, j))[:, None]
             * signal_moment_jacobian(model, theta, j) for j in range(1, L + 1)]
    return np.concatenate(parts, axis=0)


def population_feature_mean(model: LatentModel, theta, noise: NoiseSpec, L: int) -> FeatureVector:
    if L < 1:
        raise ValueError("L must be >= 1")
    return FeatureVector(L, model.d, moment_map(model, theta, noise, L))


def orthonormal_complement(B: np.ndarray, S: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Orthonormal basis of ``span(B) ∩ span(S)^perp`` given ``span(S) ⊆ span(B)``.

    Both inputs have orthonormal columns.
    """
    if S.shape[1] == 0:
        return B.copy()
    coeffs = B.T @ S  # S expressed in the B basis
    U, s, _ = np.linalg.svd(coeffs, full_matrices=True)
    rank = int(np.sum(s > tol))
    return B @ U[:, rank:]


def _null_space(J: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Right null space of ``J`` using the relative threshold ``tol * s_max``."""
    n = J.shape[1]
    if J.size == 0:
        return np.eye(n), np.zeros(0)
    _, s, Vt = np.linalg.svd(J, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol * smax)) if smax > 0 else 0
    return Vt[rank:].T, s


@dataclass
class Filtration:
    """Moment filtration ``W = V_1 ⊇ V_2 ⊇ ...`` and its layers ``U_k``.

    ``Vbases[k-1]`` and ``Ubases[k-1]`` hold ambient (``R^m``) orthonormal
    columns for ``V_k`` and ``U_k``.  ``r_loc`` is ``math.inf`` when the
    filtration has not terminated by ``Lmax``.
    """

    Wbasis: np.ndarray
    Vbases: list[np.ndarray]
    Ubases: list[np.ndarray]
    r_loc: float
    tol: float
    singular_values: list[np.ndarray] = field(default_factory=list)
    complete: bool = True

    @property
    def dims(self) -> list[int]:
        return [U.shape[1] for U in self.Ubases]

    def layer_of(self, h, atol: float = 1e-8) -> int:
        """Index ``k`` of the layer containing ``h`` (raises if it straddles layers)."""
        h = np.asarray(h, dtype=float)
        nrm = np.linalg.norm(h)
        if nrm == 0:
            raise ValueError("zero vector belongs to every layer")
        for k, U in enumerate(self.Ubases, start=1):
            if U.shape[1] and np.linalg.norm(h - U @ (U.T @ h)) <= atol * max(nrm, 1.0):
                return k
        raise ValueError("vector is not contained in a single informative layer")

    def to_dict(self) -> dict:
        return {
            "r_loc": None if math.isinf(self.r_loc) else int(self.r_loc),
            "complete": self.complete,
            "tol": self.tol,
            "layers": [
                {"k": k, "dim": U.shape[1], "basis": U.T.tolist()}
                for k, U in enumerate(self.Ubases, start=1)
            ],
            "V_dims": [V.shape[1] for V in self.Vbases],
            "singular_values": [s.tolist() for s in self.singular_values],
        }


def moment_filtration(model: LatentModel, theta_star, Lmax: int, tol: float = 1e-9,
                      Wbasis: np.ndarray | None = None) -> Filtration:
    """Compute ``V_k`` and ``U_k`` from the stacked moment Jacobians restricted to ``W``.

    Null spaces use the threshold ``tol * s_max`` on the singular values of
    the stacked Jacobian (orthonormal tensor coordinates, so the Frobenius
    norm of ``DT_j[h]`` is the Euclidean norm of its rows).
    """
    if Lmax < 1:
        raise ValueError("Lmax must be >= 1")
    m = model.m
    W = np.eye(m) if Wbasis is None else np.asarray(Wbasis, dtype=float)
    if W.shape[0] != m or not np.allclose(W.T @ W, np.eye(W.shape[1]), atol=1e-10):
        raise ValueError("Wbasis must have orthonormal columns in R^m")

    Vbases = [W]
    Ubases: list[np.ndarray] = []
    svals: list[np.ndarray] = []
    rows = []
    r_loc: float = math.inf
    for k in range(1, Lmax + 1):
        rows.append(np.sqrt(multiplicities(model.d, k))[:, None]
                    * signal_moment_jacobian(model, theta_star, k))
        J = np.concatenate(rows, axis=0) @ W
        null, s = _null_space(J, tol)
        svals.append(s)
        V_next = W @ null
        Ubases.append(orthonormal_complement(Vbases[-1], V_next))
        Vbases.append(V_next)
        if V_next.shape[1] == 0:
            r_loc = k
            break
    complete = not math.isinf(r_loc)
    if not complete:
        warnings.warn(
            f"moment filtration did not terminate by order {Lmax}; "
            f"dim V_{Lmax + 1} = {Vbases[-1].shape[1]}",
            RuntimeWarning,
            stacklevel=2,
        )
    return Filtration(W, Vbases, Ubases, r_loc, tol, svals, complete)


def restricted_moment_jacobian(model: LatentModel, theta_star, noise: NoiseSpec, L: int,
                               filtration: Filtration | np.ndarray | None = None) -> np.ndarray:
    """``D_W M(theta*; beta)``: the moment-map Jacobian composed with the ``W`` basis."""
    if filtration is None:
        W = np.eye(model.m)
    elif isinstance(filtration, Filtration):
        W = filtration.Wbasis
    else:
        W = np.asarray(filtration, dtype=float)
    return moment_map_jacobian(model, theta_star, noise, L) @ W


def stacked_jacobian_blocks(model: LatentModel, theta, L: int) -> list[np.ndarray]:
    """Per-order Jacobians in orthonormal coordinates (``t = 1``)."""
    return [np.sqrt(multiplicities(model.d, j))[:, None] * signal_moment_jacobian(model, theta, j)
            for j in range(1, L + 1)]
