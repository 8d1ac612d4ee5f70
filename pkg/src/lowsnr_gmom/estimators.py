"""Feasible optimally weighted GMoM and the local maximum-likelihood baseline.

Both estimators are local: they need an initial point and run BFGS from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .hermite import FeatureVector, feature_matrix
from .models import (
    Dataset,
    LatentModel,
    NoiseSpec,
    align,
    equivalence_distance,
    loglik_and_mean_score,
    make_rng,
)
from .moments import moment_map, moment_map_jacobian
from .optim import OptOptions, OptResult, quasi_newton

__all__ = [
    "WeightingChoice",
    "FitResult",
    "default_ridge",
    "empirical_features",
    "weighting_matrix",
    "gmom_objective",
    "gmom_fit",
    "mle_objective",
    "mle_fit",
    "multistart",
]


def default_ridge(n: int) -> float:
    return max(1e-10, 0.01 / math.sqrt(n))


@dataclass(frozen=True)
class WeightingChoice:
    """How the GMoM criterion weights moment residuals.

    ``kind`` is ``"optimal"`` (ridge-regularised inverse of the empirical
    feature covariance), ``"identity"`` or ``"fixed"``.  A ``ridge`` of
    ``None`` selects :func:`default_ridge` for the sample size at hand.
    """

    kind: str = "optimal"
    ridge: float | None = None
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("optimal", "identity", "fixed"):
            raise ValueError(f"unknown weighting kind {self.kind!r}")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.kind == "fixed":
            if self.matrix is None:
                raise ValueError("fixed weighting needs a matrix")
            M = np.asarray(self.matrix, dtype=float)
            if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
                raise ValueError("fixed weighting matrix must be symmetric")
            if np.linalg.eigvalsh(M)[0] < -1e-12:
                raise ValueError("fixed weighting matrix must be positive semidefinite")
            object.__setattr__(self, "matrix", M)

    @classmethod
    def optimal(cls, ridge: float | None = None) -> "WeightingChoice":
        return cls("optimal", ridge=ridge)

    @classmethod
    def identity(cls) -> "WeightingChoice":
        return cls("identity")

    @classmethod
    def fixed(cls, matrix) -> "WeightingChoice":
        return cls("fixed", matrix=matrix)


@dataclass
class FitResult:
    theta_hat: np.ndarray
    objective_final: float
    objective_init: float
    grad_norm_final: float
    iterations: int
    converged: bool
    message: str
    theta_aligned: np.ndarray | None = None
    d_eq_to_ref: float | None = None
    trace: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("theta_hat", "theta_aligned"):
            if out[key] is not None:
                out[key] = np.asarray(out[key]).tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def empirical_features(dataset: Dataset | np.ndarray, sigma: float, L: int,
                       chunk: int = 65536) -> tuple[FeatureVector, np.ndarray]:
    """Empirical feature mean ``M_n`` and covariance ``(1/n) sum (psi_i - M_n)(psi_i - M_n)^T``.

    Rows are processed in fixed chunks; per-chunk sums are combined in order.
    """
    Y = dataset.samples if isinstance(dataset, Dataset) else np.atleast_2d(dataset)
    n, d = Y.shape
    sums, grams = [], []
    # two passes over chunks: mean first, then centred second moments
    for start in range(0, n, chunk):
        sums.append(feature_matrix(Y[start:start + chunk], sigma, L).sum(axis=0))
    mean = np.sum(sums, axis=0) / n
    for start in range(0, n, chunk):
        F = feature_matrix(Y[start:start + chunk], sigma, L) - mean
        grams.append(F.T @ F)
    cov = np.sum(grams, axis=0) / n
    return FeatureVector(L, d, mean), 0.5 * (cov + cov.T)


def weighting_matrix(Sigma_hat, choice: WeightingChoice, n: int | None = None) -> np.ndarray:
    """Weighting matrix for the GMoM criterion.

    For the optimal choice this is ``(Sigma_hat + ridge I)^{-1}``, applied
    through a Cholesky factorisation.
    """
    S = np.asarray(Sigma_hat, dtype=float)
    N = S.shape[0]
    if choice.kind == "identity":
        return np.eye(N)
    if choice.kind == "fixed":
        if choice.matrix.shape != (N, N):
            raise ValueError(f"fixed weighting must be {N}x{N}")
        return choice.matrix
    ridge = choice.ridge if choice.ridge is not None else default_ridge(n or 1)
    A = S + ridge * np.eye(N)
    try:
        c = cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        lam = float(np.linalg.eigvalsh(A)[0])
        raise np.linalg.LinAlgError(
            f"regularised covariance is singular (min eigenvalue {lam:.3g}); increase the ridge"
        ) from None
    Omega = cho_solve(c, np.eye(N))
    return 0.5 * (Omega + Omega.T)


def gmom_objective(model: LatentModel, noise: NoiseSpec, L: int, Mn: np.ndarray, Omega: np.ndarray):
    """Return ``(Q, grad_Q)`` closures for ``Q(theta) = r^T Omega r``, ``r = M_n - M(theta)``."""

    def fun(theta):
        r = Mn - moment_map(model, theta, noise, L)
        return float(r @ Omega @ r)

    def grad(theta):
        r = Mn - moment_map(model, theta, noise, L)
        D = moment_map_jacobian(model, theta, noise, L)
        return -2.0 * D.T @ (Omega @ r)

    return fun, grad


def mle_objective(model: LatentModel, noise: NoiseSpec, Y: np.ndarray):
    """Return closures for the negative mean log-likelihood and its gradient."""

    cache: dict = {}

    def evaluate(theta):
        key = np.asarray(theta, dtype=float).tobytes()
        if cache.get("key") != key:
            ll, g = loglik_and_mean_score(model, theta, noise, Y)
            cache.update(key=key, f=-ll, g=-g)
        return cache["f"], cache["g"]

    def fun(theta):
        return evaluate(theta)[0]

    def grad(theta):
        return evaluate(theta)[1].copy()

    return fun, grad


def _finish(model, res: OptResult, f0: float, reference) -> FitResult:
    out = FitResult(
        theta_hat=res.x,
        objective_final=res.fun,
        objective_init=f0,
        grad_norm_final=res.grad_norm,
        iterations=res.iterations,
        converged=res.converged,
        message=res.message,
        trace=res.trace,
    )
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        out.theta_aligned = align(model, res.x, ref)
        out.d_eq_to_ref = equivalence_distance(model, ref, res.x)
    return out


def gmom_fit(dataset: Dataset, model: LatentModel, noise: NoiseSpec, L: int,
             weighting: WeightingChoice | np.ndarray, init, opts: OptOptions | None = None,
             reference=None, features: tuple[FeatureVector, np.ndarray] | None = None) -> FitResult:
    """Feasible GMoM: minimise the weighted moment criterion from ``init``.

    ``weighting`` is a :class:`WeightingChoice` or a precomputed matrix.
    ``features`` may carry the output of :func:`empirical_features` to share
    it across fits on the same data.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    Mn, Sigma_hat = features if features is not None else empirical_features(dataset, noise.sigma, L)
    if isinstance(weighting, WeightingChoice):
        Omega = weighting_matrix(Sigma_hat, weighting, n=dataset.n)
    else:
        Omega = np.asarray(weighting, dtype=float)
    fun, grad = gmom_objective(model, noise, L, Mn.values, Omega)
    x0 = np.asarray(init, dtype=float)
    f0 = fun(x0)
    res = quasi_newton(fun, grad, x0, opts)
    return _finish(model, res, f0, reference)


def mle_fit(dataset: Dataset, model: LatentModel, noise: NoiseSpec, init,
            opts: OptOptions | None = None, reference=None) -> FitResult:
    """Local maximum-likelihood fit; ``objective_final`` is the negative mean log-likelihood."""
    fun, grad = mle_objective(model, noise, dataset.samples)
    x0 = np.asarray(init, dtype=float)
    f0 = fun(x0)
    res = quasi_newton(fun, grad, x0, opts)
    return _finish(model, res, f0, reference)


def multistart(fit, center, radius: float, n_starts: int, seed: int) -> FitResult:
    """Run ``fit(init)`` from ``center`` and ``n_starts - 1`` random points in a ball.

    Returns the converged fit with the smallest objective (or the smallest
    objective overall when none converged).
    """
    center = np.asarray(center, dtype=float)
    rng = make_rng(seed)
    inits = [center]
    for _ in range(n_starts - 1):
        u = rng.standard_normal(center.size)
        r = radius * rng.uniform() ** (1.0 / center.size)
        inits.append(center + r * u / np.linalg.norm(u))
    fits = [fit(x0) for x0 in inits]
    pool = [f for f in fits if f.converged] or fits
    return min(pool, key=lambda f: f.objective_final)
