"""Mean-scaling Gaussian latent-variable models.

An observation is ``y = beta * A(z) @ theta + sigma * xi`` where the latent
atom ``z`` is drawn from a finite distribution ``mu`` and ``xi`` is standard
normal.  Parameters are identified only up to an explicit finite group of
isometries, which is stored with the model.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "LatentModel",
    "NoiseSpec",
    "Dataset",
    "ModelSpec",
    "GroupTooLargeError",
    "build_model",
    "gmm",
    "cyclic_mra",
    "sign_flip",
    "permutation",
    "dihedral_mra",
    "make_rng",
    "substream_seed",
    "sample",
    "marginal_log_density",
    "score",
    "loglik_and_mean_score",
    "equivalence_distance",
    "align",
    "whiten",
]

DEFAULT_GROUP_CAP = 10**6


class GroupTooLargeError(ValueError):
    """Raised when a group exceeds the enumeration cap."""


@dataclass(frozen=True)
class NoiseSpec:
    beta: float
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")

    @property
    def snr(self) -> float:
        return self.beta**2 / self.sigma**2

    @property
    def t(self) -> float:
        """Signal-to-noise amplitude ``beta / sigma``."""
        return self.beta / self.sigma

    @classmethod
    def from_snr(cls, snr: float, sigma: float = 1.0) -> "NoiseSpec":
        return cls(beta=math.sqrt(snr) * sigma, sigma=sigma)


@dataclass(frozen=True, eq=False)
class LatentModel:
    """Finite latent model.

    ``maps`` has shape ``(Z, d, m)``; ``maps[z]`` maps the parameter to the
    noiseless mean of atom ``z``.  ``group`` has shape ``(G, m, m)`` and is
    enumerated in a fixed order, element 0 being the identity.
    """

    name: str
    weights: np.ndarray
    maps: np.ndarray
    group: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        A = np.asarray(self.maps, dtype=float)
        G = np.asarray(self.group, dtype=float)
        if A.ndim != 3:
            raise ValueError("maps must have shape (Z, d, m)")
        if w.shape != (A.shape[0],):
            raise ValueError("one weight per atom required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        m = A.shape[2]
        if G.ndim != 3 or G.shape[1:] != (m, m):
            raise ValueError(f"group elements must be {m}x{m} matrices")
        if not np.allclose(G[0], np.eye(m)):
            raise ValueError("group element 0 must be the identity")
        info = np.einsum("z,zdi,zdj->ij", w, A, A)
        lam = np.linalg.eigvalsh(info)[0]
        if lam <= 1e-10:
            raise ValueError(
                f"degenerate model: E[A^T A] has smallest eigenvalue {lam:.3g}"
            )
        for arr in (w, A, G):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "maps", A)
        object.__setattr__(self, "group", G)

    @property
    def d(self) -> int:
        return self.maps.shape[1]

    @property
    def m(self) -> int:
        return self.maps.shape[2]

    @property
    def n_atoms(self) -> int:
        return self.maps.shape[0]

    @property
    def a_max(self) -> float:
        return max(np.linalg.norm(a, 2) for a in self.maps)

    def check_group_closed(self, atol: float = 1e-10, cap: int = 10**4) -> bool:
        """Brute-force closure check of the stored group (skipped above ``cap``)."""
        G = self.group
        if len(G) > cap:
            return True
        flat = G.reshape(len(G), -1)
        for a in G:
            prods = np.einsum("ij,gjk->gik", a, G).reshape(len(G), -1)
            dist = np.abs(prods[:, None, :] - flat[None, :, :]).max(axis=2)
            if not np.all(dist.min(axis=1) < atol):
                return False
        return True

    def atom_means(self, theta: np.ndarray, beta: float) -> np.ndarray:
        """Noiseless atom means ``beta * A(z) theta``, shape ``(Z, d)``."""
        return beta * (self.maps @ np.asarray(theta, dtype=float))


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        Y = np.asarray(self.samples, dtype=float)
        if Y.ndim != 2 or Y.shape[0] < 1:
            raise ValueError("samples must be an (n, d) array with n >= 1")
        if not np.all(np.isfinite(Y)):
            raise ValueError("samples contain non-finite values")
        Y.setflags(write=False)
        object.__setattr__(self, "samples", Y)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def to_csv(self, path: str | Path) -> None:
        """Write samples (no header) plus a ``.json`` provenance sidecar."""
        path = Path(path)
        np.savetxt(path, self.samples, delimiter=",", fmt="%.17g")
        side = {"seed": self.seed, **self.provenance}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, default=_jsonable))

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        Y = np.loadtxt(path, delimiter=",", ndmin=2)
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        seed = meta.pop("seed", None)
        return cls(Y, seed=seed, provenance=meta)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------


def _perm_matrix(perm: Sequence[int]) -> np.ndarray:
    # (P @ x)[i] = x[perm[i]]
    n = len(perm)
    P = np.zeros((n, n))
    P[np.arange(n), list(perm)] = 1.0
    return P


def _shift_matrix(d: int, shift: int) -> np.ndarray:
    # P @ x == np.roll(x, shift)
    return np.roll(np.eye(d), shift, axis=0)


def _check_dim(name: str, value: int) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value}")
    return int(value)


def gmm(K: int, d: int) -> LatentModel:
    """Equal-weight mixture of ``K`` spherical Gaussians in ``R^d``.

    The parameter stacks the component centres, ``theta = (theta_1, ..., theta_K)``.
    The equivalence group permutes the blocks.
    """
    K, d = _check_dim("K", K), _check_dim("d", d)
    if math.factorial(K) > DEFAULT_GROUP_CAP:
        raise GroupTooLargeError(f"S_{K} exceeds the enumeration cap")
    m = K * d
    maps = np.zeros((K, d, m))
    for k in range(K):
        maps[k, :, k * d : (k + 1) * d] = np.eye(d)
    group = np.array(
        [np.kron(_perm_matrix(p), np.eye(d)) for p in itertools.permutations(range(K))]
    )
    return LatentModel(f"gmm(K={K},d={d})", np.full(K, 1.0 / K), maps, group,
                       meta={"kind": "gmm", "K": K, "d": d})


def cyclic_mra(d: int) -> LatentModel:
    """Multi-reference alignment over the cyclic group ``Z_d`` (circular shifts)."""
    d = _check_dim("d", d)
    shifts = np.array([_shift_matrix(d, s) for s in range(d)])
    return LatentModel(f"cyclic_mra(d={d})", np.full(d, 1.0 / d), shifts, shifts.copy(),
                       meta={"kind": "cyclic_mra", "d": d})


def sign_flip(d: int) -> LatentModel:
    """Independent uniform sign flips of every coordinate (``2^d`` atoms)."""
    d = _check_dim("d", d)
    if 2**d > DEFAULT_GROUP_CAP:
        raise GroupTooLargeError(f"2^{d} sign patterns exceed the enumeration cap")
    # identity pattern first, then lexicographic with +1 < -1
    patterns = itertools.product((1.0, -1.0), repeat=d)
    flips = np.array([np.diag(s) for s in patterns])
    return LatentModel(f"sign_flip(d={d})", np.full(len(flips), 1.0 / len(flips)),
                       flips, flips.copy(), meta={"kind": "sign_flip", "d": d})


def permutation(d: int) -> LatentModel:
    """Uniformly random coordinate permutation (the full symmetric group ``S_d``)."""
    d = _check_dim("d", d)
    if math.factorial(d) > DEFAULT_GROUP_CAP:
        raise GroupTooLargeError(f"S_{d} exceeds the enumeration cap")
    perms = np.array([_perm_matrix(p) for p in itertools.permutations(range(d))])
    return LatentModel(f"permutation(d={d})", np.full(len(perms), 1.0 / len(perms)),
                       perms, perms.copy(), meta={"kind": "permutation", "d": d})


def dihedral_mra(d: int) -> LatentModel:
    """Multi-reference alignment over the dihedral group ``D_d``.

    Enumeration order: the ``d`` shifts, then the reflection ``x -> x[::-1]``
    composed with each shift.
    """
    d = _check_dim("d", d)
    shifts = [_shift_matrix(d, s) for s in range(d)]
    flip = np.eye(d)[::-1]
    elems = np.array(shifts + [s @ flip for s in shifts])
    # for d <= 2 reflections coincide with shifts; keep unique atoms only
    uniq = []
    for e in elems:
        if not any(np.array_equal(e, u) for u in uniq):
            uniq.append(e)
    elems = np.array(uniq)
    return LatentModel(f"dihedral_mra(d={d})", np.full(len(elems), 1.0 / len(elems)),
                       elems, elems.copy(), meta={"kind": "dihedral_mra", "d": d})


_BUILDERS = {
    "gmm": gmm,
    "cyclic_mra": cyclic_mra,
    "sign_flip": sign_flip,
    "permutation": permutation,
    "dihedral_mra": dihedral_mra,
}


@dataclass
class ModelSpec:
    """JSON-facing model configuration.

    ``theta`` may be omitted, in which case :meth:`theta_array` draws a
    generic parameter of norm ``theta_norm`` from ``theta_seed``.
    """

    model: str
    d: int
    K: int | None = None
    theta: list[float] | None = None
    beta: float = 1.0
    sigma: float = 1.0
    theta_seed: int = 0
    theta_norm: float = 1.0

    @classmethod
    def from_dict(cls, cfg: dict) -> "ModelSpec":
        known = {k: cfg[k] for k in ("model", "d", "K", "theta", "beta", "sigma", "theta_seed",
                                          "theta_norm") if k in cfg}
        return cls(**known)

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"model": self.model, "d": self.d, "K": self.K, "theta": self.theta,
                "beta": self.beta, "sigma": self.sigma, "theta_seed": self.theta_seed,
                "theta_norm": self.theta_norm}

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.beta, self.sigma)

    def theta_array(self, model: LatentModel) -> np.ndarray:
        if self.theta is not None:
            theta = np.asarray(self.theta, dtype=float)
            if theta.shape != (model.m,):
                raise ValueError(f"theta has length {theta.size}, model expects {model.m}")
            return theta
        rng = make_rng(self.theta_seed)
        theta = rng.standard_normal(model.m)
        return self.theta_norm * theta / np.linalg.norm(theta)


def build_model(spec: ModelSpec | dict) -> LatentModel:
    if isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    try:
        builder = _BUILDERS[spec.model]
    except KeyError:
        raise ValueError(f"unknown model {spec.model!r}; choose from {sorted(_BUILDERS)}")
    if spec.model == "gmm":
        if spec.K is None:
            raise ValueError("gmm requires K")
        return builder(spec.K, spec.d)
    return builder(spec.d)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``seed``, optionally split by integer ``key``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def substream_seed(seed: int, *key: int) -> int:
    """Deterministic 63-bit seed for the substream ``(seed, *key)``."""
    ss = np.random.SeedSequence([int(seed), *map(int, key)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def sample(model: LatentModel, theta, noise: NoiseSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    theta = np.asarray(theta, dtype=float)
    rng = make_rng(seed)
    z = rng.choice(model.n_atoms, size=n, p=model.weights)
    xi = rng.standard_normal((n, model.d))
    means = model.atom_means(theta, noise.beta)
    Y = means[z] + noise.sigma * xi
    prov = {"model": model.name, "theta": theta.tolist(), "beta": noise.beta,
            "sigma": noise.sigma}
    return Dataset(Y, seed=int(seed), provenance=prov)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def _component_logpdf(model: LatentModel, theta, noise: NoiseSpec, Y: np.ndarray):
    """Per-atom joint log-densities ``log mu(z) + log phi_sigma(y - mean_z)``, shape (n, Z)."""
    means = model.atom_means(theta, noise.beta)
    s2 = noise.sigma**2
    # ||y - m||^2 expanded keeps this a single matmul
    sq = (np.einsum("nd,nd->n", Y, Y)[:, None] - 2.0 * Y @ means.T
          + np.einsum("zd,zd->z", means, means)[None, :])
    const = -0.5 * model.d * math.log(2.0 * math.pi * s2)
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    return logw[None, :] + const - 0.5 * sq / s2, means


def marginal_log_density(model: LatentModel, theta, noise: NoiseSpec, y) -> np.ndarray | float:
    """``log sum_z mu(z) phi_sigma(y - beta A(z) theta)``; ``y`` may be (d,) or (n, d)."""
    Y = np.asarray(y, dtype=float)
    single = Y.ndim == 1
    Y = np.atleast_2d(Y)
    comp, _ = _component_logpdf(model, theta, noise, Y)
    out = logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def score(model: LatentModel, theta, noise: NoiseSpec, y) -> np.ndarray:
    """Gradient of the marginal log-density in ``theta``; (m,) or (n, m)."""
    Y = np.asarray(y, dtype=float)
    single = Y.ndim == 1
    Y = np.atleast_2d(Y)
    resp, means = _responsibilities(model, theta, noise, Y)
    # sum_z w_z (beta/sigma^2) A_z^T (y - m_z)
    coef = noise.beta / noise.sigma**2
    S = np.zeros((Y.shape[0], model.m))
    for z in range(model.n_atoms):
        S += (resp[:, z, None] * (Y - means[z])) @ model.maps[z]
    S *= coef
    return S[0] if single else S


def _responsibilities(model, theta, noise, Y):
    comp, means = _component_logpdf(model, theta, noise, Y)
    lse = logsumexp(comp, axis=1, keepdims=True)
    return np.exp(comp - lse), means


def loglik_and_mean_score(model: LatentModel, theta, noise: NoiseSpec, Y) -> tuple[float, np.ndarray]:
    """Mean log-likelihood of the rows of ``Y`` and the mean score, sharing one pass."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    comp, means = _component_logpdf(model, theta, noise, Y)
    lse = logsumexp(comp, axis=1, keepdims=True)
    resp = np.exp(comp - lse)
    n = Y.shape[0]
    coef = noise.beta / noise.sigma**2
    ry = resp.T @ Y  # (Z, d)
    rsum = resp.sum(axis=0)
    inner = ry - rsum[:, None] * means
    g = coef * np.einsum("zd,zdm->m", inner, model.maps) / n
    return float(lse.sum() / n), g


# ---------------------------------------------------------------------------
# quotient geometry
# ---------------------------------------------------------------------------


def _check_cap(model: LatentModel, cap: int) -> None:
    if len(model.group) > cap:
        raise GroupTooLargeError(f"group of size {len(model.group)} exceeds cap {cap}")


def equivalence_distance(model: LatentModel, theta0, theta1, cap: int = DEFAULT_GROUP_CAP) -> float:
    """Orbit distance ``min_g ||theta0 - g theta1||``."""
    _check_cap(model, cap)
    t0 = np.asarray(theta0, dtype=float)
    t1 = np.asarray(theta1, dtype=float)
    diffs = t0[None, :] - model.group @ t1
    return float(np.sqrt(np.min(np.einsum("gm,gm->g", diffs, diffs))))


def align(model: LatentModel, theta_hat, theta_ref, cap: int = DEFAULT_GROUP_CAP) -> np.ndarray:
    """Group image of ``theta_hat`` closest to ``theta_ref`` (first minimiser wins)."""
    _check_cap(model, cap)
    images = model.group @ np.asarray(theta_hat, dtype=float)
    diffs = images - np.asarray(theta_ref, dtype=float)[None, :]
    return images[int(np.argmin(np.einsum("gm,gm->g", diffs, diffs)))]


def whiten(dataset: Dataset, Sigma, model: LatentModel) -> tuple[Dataset, LatentModel]:
    """Map correlated noise ``N(0, sigma^2 Sigma)`` to the isotropic case."""
    S = np.asarray(Sigma, dtype=float)
    if S.shape != (model.d, model.d) or not np.allclose(S, S.T, atol=1e-12):
        raise ValueError("Sigma must be a symmetric d x d matrix")
    evals, evecs = np.linalg.eigh(S)
    if evals[0] <= 0:
        raise ValueError("Sigma is not positive definite")
    root_inv = (evecs / np.sqrt(evals)) @ evecs.T
    Y = dataset.samples @ root_inv.T
    new_model = LatentModel(model.name + "+whitened", model.weights,
                            np.einsum("ij,zjm->zim", root_inv, model.maps), model.group,
                            meta=dict(model.meta))
    return Dataset(Y, seed=dataset.seed, provenance=dict(dataset.provenance)), new_model
