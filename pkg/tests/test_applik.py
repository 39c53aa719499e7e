import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from longseg.applik import (
    BiasField,
    GaussianParams,
    eval_basis,
    n_basis,
    read_params,
    responsibilities,
    update_bias_field,
    update_gaussians_ml,
    voxel_log_likelihoods,
    write_params,
)
from longseg.errors import DegenerateVoxelError, EmptyClassError, NotSPDError, ValidationError
from longseg.volio import MultiContrastVolume, VoxelGrid

import oracles


def _vol(data, mask=None):
    data = np.asarray(data, dtype=np.float64)
    return MultiContrastVolume(VoxelGrid(data.shape[:3]), data, mask, log_transformed=True)


def test_basis_counts():
    grid = VoxelGrid((5, 4, 3))
    assert eval_basis(grid, (0, 0, 0)).shape == (5, 4, 3, 1)
    assert np.all(eval_basis(grid, (0, 0, 0)) == 1.0)
    assert n_basis((2, 1, 0)) == 6
    assert eval_basis(grid, (2, 1, 0)).shape[-1] == 6


def test_basis_matches_direct_dct_and_index_order():
    grid = VoxelGrid((6, 5, 4))
    order = (2, 1, 2)
    B = eval_basis(grid, order)
    for w in range(order[2] + 1):
        for v in range(order[1] + 1):
            for u in range(order[0] + 1):
                p = u + (order[0] + 1) * (v + (order[1] + 1) * w)
                direct = np.einsum(
                    "i,j,k->ijk", oracles.dct_axis(6, u), oracles.dct_axis(5, v), oracles.dct_axis(4, w)
                )
                assert np.max(np.abs(B[..., p] - direct)) < 1e-14


def test_basis_discrete_orthogonality():
    grid = VoxelGrid((7, 6, 5))
    B = eval_basis(grid, (3, 3, 3)).reshape(-1, 64)
    G = B.T @ B
    norms = np.sqrt(np.diag(G))
    off = G / np.outer(norms, norms) - np.eye(64)
    assert np.max(np.abs(off)) < 1e-10


def test_loglik_scalar_values():
    bias = BiasField.zeros(1, (0, 0, 0))
    ll = voxel_log_likelihoods(_vol(np.zeros((1, 1, 1))), GaussianParams([[0.0]], [1.0]), bias)
    assert abs(ll[0, 0, 0, 0] + 0.5 * math.log(2 * math.pi)) < 1e-15
    ll = voxel_log_likelihoods(_vol(np.full((1, 1, 1), 3.0)), GaussianParams([[1.0]], [4.0]), bias)
    assert abs(ll[0, 0, 0, 0] - (-0.5 * math.log(8 * math.pi) - 0.5)) < 1e-14


def test_loglik_matches_scipy_multivariate():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(3, 3, 2, 2))
    A = rng.normal(size=(3, 2, 2))
    covs = A @ A.transpose(0, 2, 1) + 0.5 * np.eye(2)
    gauss = GaussianParams(rng.normal(size=(3, 2)), covs)
    bias = BiasField(rng.normal(size=(2, 8)) * 0.1, (1, 1, 1))
    vol = _vol(d)
    ll = voxel_log_likelihoods(vol, gauss, bias)
    phi = eval_basis(vol.grid, (1, 1, 1))
    for idx in np.ndindex(3, 3, 2):
        shift = bias.coeffs @ phi[idx]
        for k in range(3):
            ref = oracles.gaussian_logpdf(d[idx], gauss.means[k] + shift, covs[k])
            assert abs(ll[idx][k] - ref) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_dc_shift_cancels(c, seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(3, 2, 2, 1))
    gauss = GaussianParams([[0.0], [1.0]], [1.0, 2.0])
    coeffs = rng.normal(size=(1, 8)) * 0.1
    base = voxel_log_likelihoods(_vol(d), gauss, BiasField(coeffs, (1, 1, 1)))
    shifted = coeffs.copy()
    shifted[0, 0] += c
    moved = voxel_log_likelihoods(_vol(d + c), gauss, BiasField(shifted, (1, 1, 1)))
    assert np.allclose(base, moved, atol=1e-9)


def test_non_spd_rejected():
    with pytest.raises(NotSPDError):
        voxel_log_likelihoods(
            _vol(np.zeros((1, 1, 1, 2))),
            GaussianParams([[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]]),
            BiasField.zeros(2, (0, 0, 0)),
        )


def test_requires_log_volume():
    vol = MultiContrastVolume(VoxelGrid((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(ValidationError):
        voxel_log_likelihoods(vol, GaussianParams([[0.0]], [1.0]), BiasField.zeros(1, (0, 0, 0)))


def test_responsibilities_equal_likelihoods_follow_prior():
    vol = _vol(np.zeros((2, 1, 1)))
    gauss = GaussianParams([[0.0], [0.0]], [1.0, 1.0])
    prior = np.broadcast_to([0.8, 0.2], (2, 1, 1, 2))
    r = responsibilities(vol, gauss, BiasField.zeros(1, (0, 0, 0)), prior)
    assert np.allclose(r, [0.8, 0.2], atol=1e-15)
    prior = np.broadcast_to([1.0, 0.0], (2, 1, 1, 2))
    r = responsibilities(vol, gauss, BiasField.zeros(1, (0, 0, 0)), prior)
    assert np.all(r[..., 1] == 0.0)


def test_responsibilities_brute_force():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(4, 3, 2, 1))
    gauss = GaussianParams([[-1.0], [0.0], [1.5]], [0.5, 1.0, 2.0])
    prior = rng.dirichlet(np.ones(3), size=(4, 3, 2))
    r = responsibilities(_vol(d), gauss, BiasField.zeros(1, (0, 0, 0)), prior)
    for idx in np.ndindex(4, 3, 2):
        w = [
            math.exp(oracles.gaussian_logpdf(d[idx], gauss.means[k], gauss.covs[k])) * prior[idx][k]
            for k in range(3)
        ]
        assert np.allclose(r[idx], np.array(w) / sum(w), atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_responsibility_rows_are_simplexes(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(3, 3, 1, 2)) * 3
    A = rng.normal(size=(3, 2, 2))
    gauss = GaussianParams(rng.normal(size=(3, 2)), A @ A.transpose(0, 2, 1) + 0.1 * np.eye(2))
    prior = rng.dirichlet(np.ones(3), size=(3, 3, 1))
    r = responsibilities(_vol(d), gauss, BiasField.zeros(2, (0, 0, 0)), prior)
    assert np.all(r >= 0) and np.allclose(r.sum(axis=3), 1.0, atol=1e-12)


def test_zero_posterior_mass_reports_voxel():
    vol = _vol(np.zeros((2, 1, 1)))
    prior = np.zeros((2, 1, 1, 1))
    prior[0] = 1.0
    with pytest.raises(DegenerateVoxelError) as exc:
        responsibilities(vol, GaussianParams([[0.0]], [1.0]), BiasField.zeros(1, (0, 0, 0)), prior)
    assert exc.value.voxels[0] == (1, 0, 0)


def test_ml_single_class_sample_moments():
    rng = np.random.default_rng(3)
    d = rng.normal(size=(5, 4, 3, 2))
    vol = _vol(d)
    g = update_gaussians_ml(vol, np.ones((5, 4, 3, 1)), BiasField.zeros(2, (0, 0, 0)))
    flat = d.reshape(-1, 2)
    assert np.allclose(g.means[0], flat.mean(axis=0), atol=1e-13)
    floor = 1e-6 * np.mean(np.var(flat, axis=0))
    assert np.allclose(g.covs[0], np.cov(flat.T, bias=True) + floor * np.eye(2), atol=1e-13)


def test_ml_two_clusters_and_floor():
    d = np.zeros((6, 1, 1))
    d[:3] = [[[1.0]], [[1.2]], [[0.8]]]
    d[3:5] = 10.0
    d[5] = 20.0
    resp = np.zeros((6, 1, 1, 3))
    resp[:3, ..., 0] = 1
    resp[3:5, ..., 1] = 1
    resp[5, ..., 2] = 1
    g = update_gaussians_ml(_vol(d), resp, BiasField.zeros(1, (0, 0, 0)))
    assert np.allclose(g.means[:, 0], [1.0, 10.0, 20.0])
    floor = 1e-6 * np.var(d.ravel())
    assert abs(g.covs[2, 0, 0] - floor) < 1e-18


def test_ml_empty_class_raises():
    resp = np.zeros((2, 1, 1, 2))
    resp[..., 0] = 1
    with pytest.raises(EmptyClassError):
        update_gaussians_ml(_vol(np.zeros((2, 1, 1))), resp, BiasField.zeros(1, (0, 0, 0)))


def _planted(order, coeffs, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    grid = VoxelGrid((12, 10, 8))
    labels = (np.indices(grid.dims).sum(axis=0) % 2).astype(int)
    means = np.array([[1.0, 2.0], [3.0, -1.0]])
    B = eval_basis(grid, order)
    field = np.einsum("ijkp,np->ijkn", B, coeffs)
    d = means[labels] + field + noise * rng.normal(size=field.shape)
    resp = np.stack([labels == 0, labels == 1], axis=-1).astype(float)
    gauss = GaussianParams(means, np.array([np.eye(2) * 0.01] * 2))
    return _vol(d), resp, gauss, B, field


def test_bias_recovers_planted_field():
    order = (2, 2, 2)
    rng = np.random.default_rng(5)
    coeffs = rng.normal(size=(2, 27)) * 0.1
    vol, resp, gauss, B, field = _planted(order, coeffs, noise=1e-6)
    bias = update_bias_field(vol, resp, gauss, B, order)
    est = np.einsum("ijkp,np->ijkn", B, bias.coeffs)
    assert np.max(np.abs(est - field)) < 1e-3 * np.ptp(field)


def test_bias_free_data_gives_zero_field():
    order = (2, 2, 2)
    vol, resp, gauss, B, _ = _planted(order, np.zeros((2, 27)))
    bias = update_bias_field(vol, resp, gauss, B, order)
    assert np.linalg.norm(bias.coeffs) < 1e-6 * 3.0


def test_constant_shift_moves_only_that_dc():
    order = (1, 1, 1)
    rng = np.random.default_rng(6)
    coeffs = rng.normal(size=(2, 8)) * 0.1
    vol, resp, gauss, B, _ = _planted(order, coeffs)
    before = update_bias_field(vol, resp, gauss, B, order).coeffs
    shifted = np.array(vol.data)
    shifted[..., 1] += 0.7
    after = update_bias_field(_vol(shifted), resp, gauss, B, order).coeffs
    delta = after - before
    assert abs(delta[1, 0] - 0.7) < 1e-9
    delta[1, 0] = 0.0
    assert np.max(np.abs(delta)) < 1e-9


def test_params_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    A = rng.normal(size=(3, 2, 2))
    gauss = GaussianParams(rng.normal(size=(3, 2)), A @ A.transpose(0, 2, 1) + np.eye(2))
    bias = BiasField(rng.normal(size=(2, 8)), (1, 1, 1))
    write_params(tmp_path / "p.params", gauss, bias, extra=[("KAPPA", 1.5)])
    g2, b2, extra = read_params(tmp_path / "p.params")
    assert g2.means.tobytes() == gauss.means.tobytes()
    assert g2.covs.tobytes() == gauss.covs.tobytes()
    assert b2.coeffs.tobytes() == bias.coeffs.tobytes() and b2.order == (1, 1, 1)
    assert extra["KAPPA"] == [["1.5"]]
