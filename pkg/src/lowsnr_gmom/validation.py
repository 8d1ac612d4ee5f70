"""Cross-module invariant checks run by ``lowsnr-gmom validate``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimators import gmom_objective, mle_objective
from .hermite import (
    SymTensor,
    feature_dim,
    feature_matrix,
    gaussian_limit_covariance,
    hermite_tensor,
    multiplicities,
    sym_dim,
    sym_inner,
)
from .information import QuadratureSpec, info_discrepancy, observed_fisher, population_feature_covariance
from .models import (
    NoiseSpec,
    cyclic_mra,
    dihedral_mra,
    gmm,
    make_rng,
    marginal_log_density,
    permutation,
    score,
    sign_flip,
)
from .moments import moment_filtration

__all__ = ["CheckResult", "run_validation", "CHECKS"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        self.passed = bool(self.passed)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def builtin_models():
    return [gmm(2, 2), cyclic_mra(3), sign_flip(2), permutation(3), dihedral_mra(4)]


def _central_diff(f, x, step):
    x = np.asarray(x, dtype=float)
    out = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out.append((f(x + e) - f(x - e)) / (2 * step))
    return np.array(out)


def check_hermite_orthogonality(seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for d in (1, 2, 3):
        pts, wts = QuadratureSpec(d, 12).rule()
        F = {k: np.array([hermite_tensor(k, x).coords for x in pts]) for k in range(1, 5)}
        for k in range(1, 5):
            for ell in range(1, 5):
                a = SymTensor(k, d, rng.standard_normal(sym_dim(d, k)))
                b = SymTensor(ell, d, rng.standard_normal(sym_dim(d, ell)))
                ha = F[k] @ (multiplicities(d, k) * a.coords)
                hb = F[ell] @ (multiplicities(d, ell) * b.coords)
                est = float(wts @ (ha * hb))
                want = math.factorial(k) * sym_inner(a, b) if k == ell else 0.0
                worst = max(worst, abs(est - want))
    return CheckResult("hermite orthogonality", worst <= 1e-8, f"max abs error {worst:.2e}")


def check_limit_covariance() -> CheckResult:
    worst = 0.0
    for d in (1, 2, 3):
        for L in (1, 2, 3, 4):
            S = population_feature_covariance(cyclic_mra(d), np.ones(d), NoiseSpec(0.0), L,
                                              QuadratureSpec(d, 12))
            worst = max(worst, float(np.max(np.abs(S - gaussian_limit_covariance(d, L)))))
    return CheckResult("pure-noise covariance closed form", worst <= 1e-8, f"max abs error {worst:.2e}")


def check_gradients(seed: int = 0, probes: int = 5) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for model in builtin_models():
        noise = NoiseSpec(0.7, 1.1)
        for _ in range(probes):
            theta = rng.standard_normal(model.m)
            y = rng.standard_normal(model.d) * 1.5
            fd = _central_diff(lambda th: marginal_log_density(model, th, noise, y), theta, 1e-5)
            an = score(model, theta, noise, y)
            worst = max(worst, np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-8))

            Y = rng.standard_normal((50, model.d))
            f, g = mle_objective(model, noise, Y)
            fd = _central_diff(f, theta, 1e-5)
            worst = max(worst, np.linalg.norm(g(theta) - fd) / max(np.linalg.norm(fd), 1e-8))

            L = 3
            Mn = feature_matrix(Y, noise.sigma, L).mean(axis=0)
            f, g = gmom_objective(model, noise, L, Mn, np.eye(feature_dim(model.d, L)))
            fd = _central_diff(f, theta, 1e-5)
            worst = max(worst, np.linalg.norm(g(theta) - fd) / max(np.linalg.norm(fd), 1e-8))
    return CheckResult("score / criterion gradients", worst <= 1e-5, f"max relative error {worst:.2e}")


def check_psd_discrepancy(seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    worst = math.inf
    for model in (gmm(2, 2), cyclic_mra(3), permutation(3)):
        theta = rng.standard_normal(model.m)
        theta /= np.linalg.norm(theta)
        for snr in (0.01, 0.1, 0.25):
            noise = NoiseSpec.from_snr(snr)
            F = observed_fisher(model, theta, noise)
            for L in (1, 2, 3):
                worst = min(worst, info_discrepancy(model, theta, noise, L, fisher=F).R_min_eig)
    return CheckResult("PSD Fisher-GMoM discrepancy", worst >= -1e-8, f"min eigenvalue {worst:.2e}")


def check_z3_layers() -> CheckResult:
    filt = moment_filtration(cyclic_mra(3), np.array([1.0, 2.0, -4.0]), 3)
    expected = [np.array([1.0, 1, 1]), np.array([4.0, 7, -11]), np.array([-6.0, 5, 1])]
    ok = filt.r_loc == 3 and filt.dims == [1, 1, 1]
    worst = 1.0
    if ok:
        for U, v in zip(filt.Ubases, expected):
            worst = min(worst, abs(float(U[:, 0] @ v)) / np.linalg.norm(v))
        ok = worst >= 1 - 1e-9
    return CheckResult("Z3 informative layers", ok, f"r_loc={filt.r_loc}, dims={filt.dims}, min |cos|={worst:.12f}")


CHECKS = [
    check_hermite_orthogonality,
    check_limit_covariance,
    check_gradients,
    check_psd_discrepancy,
    check_z3_layers,
]


def run_validation() -> list[CheckResult]:
    out = []
    for check in CHECKS:
        try:
            out.append(check())
        except Exception as exc:  # a crashing check is a failing check
            out.append(CheckResult(check.__name__, False, f"raised {type(exc).__name__}: {exc}"))
    return out
