import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lowsnr_gmom.hermite import SymTensor, feature_matrix, multi_indices, sym_dim
from lowsnr_gmom.information import QuadratureSpec
from lowsnr_gmom.models import (
    LatentModel,
    NoiseSpec,
    cyclic_mra,
    dihedral_mra,
    gmm,
    make_rng,
    permutation,
    sign_flip,
)
from lowsnr_gmom.moments import (
    moment_filtration,
    moment_map,
    moment_map_jacobian,
    population_feature_mean,
    restricted_moment_jacobian,
    signal_moment,
    signal_moment_jacobian,
    stacked_jacobian_blocks,
)

BUILTINS = [gmm(2, 2), gmm(3, 2), cyclic_mra(3), sign_flip(2), permutation(3), dihedral_mra(4)]
Z3_THETA = np.array([1.0, 2.0, -4.0])


def three_atom_line():
    return LatentModel("line", np.full(3, 1 / 3), np.array([1.0, 2.0, -3.0]).reshape(3, 1, 1),
                       np.eye(1)[None])


def full_moment(model, theta, k):
    """Dense E[(A theta)^{(x) k}] summed atom by atom."""
    out = 0.0
    for w, A in zip(model.weights, model.maps):
        v = A @ theta
        t = np.array(1.0)
        for _ in range(k):
            t = np.multiply.outer(t, v)
        out = out + w * t
    return out


def coord(d, k, idx):
    return multi_indices(d, k).index(tuple(idx))


def test_three_atom_moments():
    m, th = three_atom_line(), np.array([1.7])
    assert signal_moment(m, th, 1).coords[0] == pytest.approx(0.0, abs=1e-15)
    assert signal_moment(m, th, 2).coords[0] == pytest.approx(14 / 3 * 1.7**2, rel=1e-14)
    assert signal_moment(m, th, 3).coords[0] == pytest.approx(-6 * 1.7**3, rel=1e-14)
    # DT_2[h] = 28/3 theta h
    assert signal_moment_jacobian(m, th, 2)[0, 0] == pytest.approx(28 / 3 * 1.7, rel=1e-14)


def test_gmm_first_moment_is_component_mean():
    th = make_rng(0).standard_normal(12)
    np.testing.assert_allclose(signal_moment(gmm(3, 4), th, 1).coords, th.reshape(3, 4).mean(axis=0),
                               rtol=1e-14)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_sign_flip_second_moment_is_diagonal(d):
    th = make_rng(d).standard_normal(d)
    want = np.zeros((d, d))
    for s in itertools.product((1, -1), repeat=d):
        v = np.array(s) * th
        want += np.outer(v, v) / 2**d
    np.testing.assert_allclose(want, np.diag(th**2), atol=1e-15)
    np.testing.assert_allclose(signal_moment(sign_flip(d), th, 2).to_full(), want, atol=1e-15)


@pytest.mark.parametrize("model", BUILTINS, ids=lambda m: m.name)
def test_signal_moment_matches_dense_sum(model):
    th = make_rng(1).standard_normal(model.m)
    for k in (1, 2, 3):
        np.testing.assert_allclose(signal_moment(model, th, k).to_full(), full_moment(model, th, k),
                                   rtol=1e-12, atol=1e-14)


def test_population_feature_mean_examples():
    th = np.array([0.4, -1.0])
    assert np.all(population_feature_mean(gmm(2, 1), th, NoiseSpec(0.0), 3).values == 0)
    nz = NoiseSpec(0.6, 1.5)
    fv = population_feature_mean(gmm(1, 2), th, nz, 2)
    np.testing.assert_allclose(fv.block(1).coords, nz.t * th, rtol=1e-14)
    np.testing.assert_allclose(fv.block(2).to_full(), nz.t**2 * np.outer(th, th), rtol=1e-14)
    # cyclic_mra(3): direct three-atom sum
    nz = NoiseSpec(0.1)
    fv = population_feature_mean(cyclic_mra(3), Z3_THETA, nz, 2)
    for k in (1, 2):
        want = sum(nz.t**k * full_moment(gmm(1, 3), np.roll(Z3_THETA, s), k) for s in range(3)) / 3
        np.testing.assert_allclose(fv.block(k).to_full(), want, rtol=1e-14, atol=1e-14)


def test_feature_mean_is_hermite_expectation():
    """E[H_k(Y/sigma)] = t^k T_k, checked by quadrature over the noise."""
    m, th, nz, L = cyclic_mra(2), np.array([0.8, -0.3]), NoiseSpec(0.7, 1.2), 4
    pts, wts = QuadratureSpec(2, 20).rule()
    mean = 0.0
    for w, A in zip(m.weights, m.maps):
        Y = nz.beta * (A @ th) + nz.sigma * pts
        mean = mean + w * (wts @ feature_matrix(Y, nz.sigma, L))
    np.testing.assert_allclose(mean, moment_map(m, th, nz, L), rtol=1e-10, atol=1e-12)


def test_first_jacobian_is_mean_map():
    m = dihedral_mra(4)
    EA = np.einsum("z,zdm->dm", m.weights, m.maps)
    for seed in range(3):
        th = make_rng(seed).standard_normal(4)
        np.testing.assert_allclose(signal_moment_jacobian(m, th, 1), EA, atol=1e-15)


@pytest.mark.parametrize("model", BUILTINS, ids=lambda m: m.name)
def test_jacobians_match_finite_differences(model):
    rng = make_rng(2)
    step = 1e-5
    for _ in range(100 // len(BUILTINS)):
        th = rng.standard_normal(model.m)
        for k in range(1, 5):
            J = signal_moment_jacobian(model, th, k)
            fd = np.column_stack([
                (signal_moment(model, th + step * e, k).coords - signal_moment(model, th - step * e, k).coords)
                / (2 * step) for e in np.eye(model.m)])
            assert np.linalg.norm(J - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)


def test_moment_map_jacobian_finite_differences():
    m, nz = gmm(3, 2), NoiseSpec(0.5, 0.8)
    th = make_rng(3).standard_normal(m.m)
    J = moment_map_jacobian(m, th, nz, 3)
    fd = np.column_stack([(moment_map(m, th + 1e-6 * e, nz, 3) - moment_map(m, th - 1e-6 * e, nz, 3)) / 2e-6
                          for e in np.eye(m.m)])
    np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-9)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_moments_are_group_invariant(seed):
    rng = make_rng(seed)
    for model in BUILTINS:
        th = rng.standard_normal(model.m)
        for g in model.group:
            for k in (1, 2, 3):
                diff = signal_moment(model, th, k) - signal_moment(model, g @ th, k)
                assert diff.norm() <= 1e-10


def test_z3_jacobian_matches_invariant_coordinates():
    J = [signal_moment_jacobian(cyclic_mra(3), Z3_THETA, k) for k in (1, 2, 3)]
    rows = 3 * np.array([
        J[0][0],
        J[1][coord(3, 2, (0, 0))],
        J[1][coord(3, 2, (0, 1))],
        J[2][coord(3, 3, (0, 0, 0))],
        J[2][coord(3, 3, (0, 0, 1))],
        J[2][coord(3, 3, (0, 1, 1))],
    ])
    expected = np.array([[1, 1, 1], [2, 4, -8], [-2, -3, 3], [3, 12, 48], [20, -15, -4], [-4, 20, -15]],
                     dtype=float)
    np.testing.assert_allclose(rows, expected, rtol=1e-13, atol=1e-13)


def test_z3_filtration():
    filt = moment_filtration(cyclic_mra(3), Z3_THETA, 3)
    assert filt.r_loc == 3 and filt.dims == [1, 1, 1] and filt.complete
    for U, v in zip(filt.Ubases, ([1, 1, 1], [4, 7, -11], [-6, 5, 1])):
        v = np.asarray(v, float) / np.linalg.norm(v)
        assert abs(U[:, 0] @ v) >= 1 - 1e-9
    J = np.concatenate(stacked_jacobian_blocks(cyclic_mra(3), Z3_THETA, 3))
    s = np.linalg.svd(J, compute_uv=False)
    assert np.sum(s > 1e-9 * s[0]) == 3
    assert np.linalg.matrix_rank(restricted_moment_jacobian(cyclic_mra(3), Z3_THETA, NoiseSpec(1.0), 3),
                                 tol=1e-9) == 3


def test_single_gaussian_filtration():
    filt = moment_filtration(gmm(1, 3), np.array([0.2, -1.0, 0.5]), 4)
    assert filt.r_loc == 1 and filt.dims == [3]


def test_sign_flip_filtration():
    filt = moment_filtration(sign_flip(2), np.array([1.0, 2.0]), 4)
    assert filt.r_loc == 2 and filt.dims == [0, 2]


def test_degenerate_theta_returns_sentinel():
    with pytest.warns(RuntimeWarning):
        filt = moment_filtration(sign_flip(2), np.array([1.0, 0.0]), 3)
    assert math.isinf(filt.r_loc) and not filt.complete
    assert filt.to_dict()["r_loc"] is None


@pytest.mark.parametrize("model", BUILTINS, ids=lambda m: m.name)
def test_filtration_invariants(model):
    th = make_rng(7).standard_normal(model.m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        filt = moment_filtration(model, th, 6)
    assert filt.complete
    for k, U in enumerate(filt.Ubases):
        assert filt.Vbases[k].shape[1] == U.shape[1] + filt.Vbases[k + 1].shape[1]
    U_all = np.concatenate(filt.Ubases, axis=1)
    assert U_all.shape[1] == model.m
    np.testing.assert_allclose(U_all.T @ U_all, np.eye(model.m), atol=1e-9)
    blocks = stacked_jacobian_blocks(model, th, len(filt.Ubases))
    for k, U in enumerate(filt.Ubases, start=1):
        for h in U.T:
            assert filt.layer_of(h) == k
            for j in range(1, k):
                assert np.linalg.norm(blocks[j - 1] @ h) <= filt.tol * 10 * np.linalg.norm(np.concatenate(blocks), 2)
            assert np.linalg.norm(blocks[k - 1] @ h) > 10 * filt.tol


def test_generic_cyclic_rloc_at_most_three():
    rng = make_rng(9)
    for _ in range(10):
        assert moment_filtration(cyclic_mra(3), rng.standard_normal(3), 4).r_loc <= 3


def test_restricted_jacobian_examples():
    th = np.array([0.3, -0.2])
    nz = NoiseSpec(0.4, 2.0)
    np.testing.assert_allclose(restricted_moment_jacobian(gmm(1, 2), th, nz, 1), nz.t * np.eye(2),
                               rtol=1e-15)
    assert np.all(restricted_moment_jacobian(cyclic_mra(3), Z3_THETA, NoiseSpec(0.0), 3) == 0)
    W = np.eye(3)[:, :2]
    assert restricted_moment_jacobian(cyclic_mra(3), Z3_THETA, nz, 2, W).shape == (3 + 6, 2)


def test_sym_dims_of_stacked_blocks():
    blocks = stacked_jacobian_blocks(gmm(2, 3), np.ones(6), 3)
    assert [b.shape[0] for b in blocks] == [sym_dim(3, k) for k in (1, 2, 3)]
    assert isinstance(signal_moment(gmm(2, 3), np.ones(6), 2), SymTensor)
