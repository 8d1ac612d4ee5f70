"""Population Fisher and GMoM information operators.

Expectations under ``Y = beta A(z) theta + sigma xi`` are exact sums over
atoms combined with tensor-product Gauss-Hermite quadrature over ``xi``.
Quadrature nodes are processed in fixed-size chunks that are reduced in a
fixed order, so results do not depend on how work is scheduled.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, solve_triangular

from .hermite import SymTensor, feature_matrix, sym_inner
from .models import LatentModel, NoiseSpec, score
from .moments import Filtration, restricted_moment_jacobian, signal_moment_jacobian

__all__ = [
    "QuadratureSpec",
    "InfoReport",
    "SingularCovarianceError",
    "QuadratureBudgetError",
    "gaussian_expectation",
    "observed_fisher",
    "population_feature_covariance",
    "restrict_to_normal",
    "gmom_information",
    "info_discrepancy",
    "layer_bilinear",
]

CHUNK = 4096


class QuadratureBudgetError(ValueError):
    pass


class SingularCovarianceError(np.linalg.LinAlgError):
    def __init__(self, min_eig: float):
        super().__init__(
            f"feature covariance is numerically singular (min eigenvalue {min_eig:.3g}); "
            "reduce beta or the moment cutoff L"
        )
        self.min_eig = min_eig


def default_nodes(d: int) -> int:
    if d <= 2:
        return 40
    if d == 3:
        return 20
    return 12


@lru_cache(maxsize=32)
def _tensor_grid(nodes: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / math.sqrt(2.0 * math.pi)
    pts = np.array(list(itertools.product(x, repeat=d)))
    wts = np.array([math.prod(c) for c in itertools.product(w, repeat=d)])
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


@dataclass(frozen=True)
class QuadratureSpec:
    """Tensor-product probabilists' Gauss-Hermite rule for ``N(0, I_dim)``."""

    dim: int
    nodes_per_axis: int | None = None
    budget: int = 10**7

    def __post_init__(self):
        if self.nodes_per_axis is None:
            object.__setattr__(self, "nodes_per_axis", default_nodes(self.dim))
        if self.nodes_per_axis < 5:
            raise ValueError("nodes_per_axis must be >= 5")
        if self.size > self.budget:
            raise QuadratureBudgetError(
                f"{self.nodes_per_axis}^{self.dim} = {self.size} nodes exceeds the budget "
                f"{self.budget}; use fewer nodes per axis or a smaller dimension"
            )

    @property
    def size(self) -> int:
        return self.nodes_per_axis**self.dim

    def rule(self) -> tuple[np.ndarray, np.ndarray]:
        return _tensor_grid(self.nodes_per_axis, self.dim)


def _resolve_quad(model: LatentModel, quad: QuadratureSpec | None) -> QuadratureSpec:
    if quad is None:
        return QuadratureSpec(model.d)
    if quad.dim != model.d:
        raise ValueError(f"quadrature dimension {quad.dim} does not match model d={model.d}")
    return quad


def gaussian_expectation(model: LatentModel, theta, noise: NoiseSpec, fn, quad=None):
    """``E[fn(Y)]`` for ``fn`` mapping an (n, d) batch to (n, ...) arrays."""
    quad = _resolve_quad(model, quad)
    pts, wts = quad.rule()
    means = model.atom_means(theta, noise.beta)
    total = None
    for mu, mean in zip(model.weights, means):
        for start in range(0, len(pts), CHUNK):
            Y = mean[None, :] + noise.sigma * pts[start:start + CHUNK]
            vals = fn(Y)
            part = mu * np.tensordot(wts[start:start + CHUNK], vals, axes=(0, 0))
            total = part if total is None else total + part
    return total


def _weighted_gram(model, theta, noise, fn, quad):
    """``E[f(Y) f(Y)^T]`` and ``E[f(Y)]`` in a single pass."""
    quad = _resolve_quad(model, quad)
    pts, wts = quad.rule()
    means = model.atom_means(theta, noise.beta)
    gram, mean_acc = None, None
    for mu, mean in zip(model.weights, means):
        for start in range(0, len(pts), CHUNK):
            Y = mean[None, :] + noise.sigma * pts[start:start + CHUNK]
            F = fn(Y)
            w = mu * wts[start:start + CHUNK]
            g = (F * w[:, None]).T @ F
            s = w @ F
            gram = g if gram is None else gram + g
            mean_acc = s if mean_acc is None else mean_acc + s
    return 0.5 * (gram + gram.T), mean_acc


def observed_fisher(model: LatentModel, theta_star, noise: NoiseSpec,
                    quad: QuadratureSpec | None = None) -> np.ndarray:
    """Population score covariance ``E[s s^T]`` at ``theta_star``, shape (m, m)."""
    gram, _ = _weighted_gram(model, theta_star, noise,
                             lambda Y: score(model, theta_star, noise, Y), quad)
    return gram


def population_feature_covariance(model: LatentModel, theta_star, noise: NoiseSpec, L: int,
                                  quad: QuadratureSpec | None = None) -> np.ndarray:
    """``Cov(psi(Y))`` of the stacked Hermite features, shape (N_L, N_L)."""
    second, first = _weighted_gram(model, theta_star, noise,
                                   lambda Y: feature_matrix(Y, noise.sigma, L), quad)
    cov = second - np.outer(first, first)
    return 0.5 * (cov + cov.T)


def restrict_to_normal(M, Wbasis) -> np.ndarray:
    """Compression ``W^T M W`` onto the span of the orthonormal columns of ``Wbasis``."""
    M = np.asarray(M, dtype=float)
    W = np.asarray(Wbasis, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    gram = W.T @ W
    if np.max(np.abs(gram - np.eye(W.shape[1]))) > 1e-10:
        raise ValueError("Wbasis columns are not orthonormal")
    out = W.T @ M @ W
    return 0.5 * (out + out.T)


def _wbasis(model: LatentModel, filtration) -> np.ndarray:
    if filtration is None:
        return np.eye(model.m)
    if isinstance(filtration, Filtration):
        return filtration.Wbasis
    return np.asarray(filtration, dtype=float)


def _whitened_jacobian(model, theta_star, noise, L, filtration, quad):
    """``C^{-1} D_W M`` with ``Sigma_L = C C^T``; also returns ``Sigma_L``."""
    Sigma = population_feature_covariance(model, theta_star, noise, L, quad)
    D = restricted_moment_jacobian(model, theta_star, noise, L, _wbasis(model, filtration))
    try:
        c, lower = cho_factor(Sigma, lower=True)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(float(np.linalg.eigvalsh(Sigma)[0])) from None
    min_eig = float(np.linalg.eigvalsh(Sigma)[0])
    if min_eig <= 1e-12:
        raise SingularCovarianceError(min_eig)
    return solve_triangular(c, D, lower=True), Sigma


def gmom_information(model: LatentModel, theta_star, noise: NoiseSpec, L: int,
                     filtration: Filtration | np.ndarray | None = None,
                     quad: QuadratureSpec | None = None) -> np.ndarray:
    """``D_W M^T Sigma_L^{-1} D_W M`` via a Cholesky factor of ``Sigma_L``."""
    B, _ = _whitened_jacobian(model, theta_star, noise, L, filtration, quad)
    return B.T @ B


@dataclass
class InfoReport:
    I_obs_W: np.ndarray
    I_gmom_W: np.ndarray
    discrepancy_op_norm: float
    R_min_eig: float
    snr: float
    L: int
    fisher_min_eig: float
    cond_sigma: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["I_obs_W"] = self.I_obs_W.tolist()
        out["I_gmom_W"] = self.I_gmom_W.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def info_discrepancy(model: LatentModel, theta_star, noise: NoiseSpec, L: int,
                     filtration: Filtration | np.ndarray | None = None,
                     quad: QuadratureSpec | None = None,
                     fisher: np.ndarray | None = None) -> InfoReport:
    """Compare restricted Fisher and GMoM information at ``theta_star``.

    ``fisher`` may carry a precomputed unrestricted Fisher matrix (it does
    not depend on ``L``).
    """
    W = _wbasis(model, filtration)
    if fisher is None:
        fisher = observed_fisher(model, theta_star, noise, quad)
    I_obs = restrict_to_normal(fisher, W)
    B, Sigma = _whitened_jacobian(model, theta_star, noise, L, W, quad)
    I_gmom = B.T @ B
    I_gmom = 0.5 * (I_gmom + I_gmom.T)
    R = I_obs - I_gmom
    evals = np.linalg.eigvalsh(R)
    s_evals = np.linalg.eigvalsh(Sigma)
    return InfoReport(
        I_obs_W=I_obs,
        I_gmom_W=I_gmom,
        discrepancy_op_norm=float(np.max(np.abs(evals))),
        R_min_eig=float(evals[0]),
        snr=noise.snr,
        L=L,
        fisher_min_eig=float(np.linalg.eigvalsh(I_obs)[0]),
        cond_sigma=float(s_evals[-1] / s_evals[0]),
    )


def _dT(model, theta, k, h) -> SymTensor:
    return SymTensor(k, model.d, signal_moment_jacobian(model, theta, k) @ np.asarray(h, dtype=float))


def layer_bilinear(model: LatentModel, theta_star, noise: NoiseSpec, h, g,
                   filtration: Filtration, quad: QuadratureSpec | None = None,
                   fisher: np.ndarray | None = None) -> tuple[float, float]:
    """Exact ``<h, I_obs g>`` and its leading low-SNR prediction.

    ``h`` and ``g`` are ambient vectors lying in layers ``U_k`` and ``U_l``.
    The prediction is ``SNR^k / k! <DT_k[h], DT_k[g]>`` when ``k == l`` and 0
    otherwise.
    """
    h = np.asarray(h, dtype=float)
    g = np.asarray(g, dtype=float)
    if fisher is None:
        fisher = observed_fisher(model, theta_star, noise, quad)
    value = float(h @ fisher @ g)
    if not np.any(g) or not np.any(h):
        return value, 0.0
    k = filtration.layer_of(h)
    ell = filtration.layer_of(g)
    if k != ell:
        return value, 0.0
    pred = noise.snr**k / math.factorial(k) * sym_inner(_dT(model, theta_star, k, h),
                                                        _dT(model, theta_star, k, g))
    return value, float(pred)
