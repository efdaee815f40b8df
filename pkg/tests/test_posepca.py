import numpy as np
import pytest

from gsavatar.errors import ContractError
from gsavatar.posepca import (
    clip_coefficients,
    fit_pca,
    fit_pca_matrix,
    project,
    project_position_maps,
    reconstruct,
)
from gsavatar.parammaps import render_position_maps
from gsavatar.synthetic import make_pose_sequence


@pytest.fixture(scope="module")
def frames(ct_small):
    poses = make_pose_sequence(ct_small.skeleton, 16, seed=3)
    return np.stack([render_position_maps(ct_small, p) for p in poses])


def test_full_rank_round_trip(frames, ct_small):
    model = fit_pca(frames, ct_small, n_components=15)  # T-1 caps the rank
    X = _to_matrix(frames, ct_small)
    rec = reconstruct(model, project(model, X))
    err = np.linalg.norm(rec - X) / np.linalg.norm(X - X.mean(0))
    assert err < 1e-6


def _to_matrix(frames, ct):
    T = frames.shape[0]
    return np.stack([ct.gather(frames[t]).reshape(-1) for t in range(T)])


def test_components_are_orthonormal(frames, ct_small):
    model = fit_pca(frames, ct_small, n_components=10)
    gram = model.components.T @ model.components
    assert np.abs(gram - np.eye(10)).max() <= 1e-6


def test_sigmas_descend(frames, ct_small):
    model = fit_pca(frames, ct_small, n_components=10)
    assert np.all(np.diff(model.sigmas) <= 1e-12)


def test_clip_box(frames, ct_small, rng):
    model = fit_pca(frames, ct_small, n_components=8)
    beta = rng.normal(size=(40, 8)) * model.sigmas * 5
    clipped = clip_coefficients(model, beta)
    assert np.all(clipped <= 2 * model.sigmas + 1e-12)
    assert np.all(clipped >= -2 * model.sigmas - 1e-12)


def test_clip_reproject_fixed_point(frames, ct_small, rng):
    model = fit_pca(frames, ct_small, n_components=8)
    beta = clip_coefficients(model, rng.normal(size=(5, 8)) * model.sigmas * 3)
    again = clip_coefficients(model, project(model, reconstruct(model, beta)))
    # orthonormal basis: the round trip is exact to accumulated fp rounding
    atol = 1e-9 * (1.0 + float(model.sigmas.max()))
    np.testing.assert_allclose(again, beta, atol=atol)


def test_component_cap_warns(frames, ct_small):
    with pytest.warns(UserWarning):
        model = fit_pca(frames, ct_small, n_components=100)
    assert model.n_components == 15  # T - 1


def test_identical_frames_give_zero_sigma(ct_small):
    pose = make_pose_sequence(ct_small.skeleton, 1, seed=9)[0]
    maps = render_position_maps(ct_small, pose)
    frames = np.stack([maps] * 5)
    model = fit_pca(frames, ct_small, n_components=4)
    np.testing.assert_allclose(model.sigmas, 0.0, atol=1e-12)
    beta = project(model, _to_matrix(frames, ct_small))
    np.testing.assert_allclose(clip_coefficients(model, beta), 0.0, atol=1e-12)


def test_project_position_maps_checks_masks(frames, ct_small, template):
    from gsavatar.parammaps import build_canonical_template

    model = fit_pca(frames, ct_small, n_components=4)
    beta, rec = project_position_maps(model, frames[0], ct_small)
    assert beta.shape == (4,)
    assert rec.shape == frames[0].shape
    other = build_canonical_template(template, 48)
    pose = make_pose_sequence(other.skeleton, 1, seed=3)[0]
    with pytest.raises(ContractError):
        project_position_maps(model, render_position_maps(other, pose), other)


def test_projection_centers_training_mean(frames, ct_small):
    model = fit_pca(frames, ct_small, n_components=6)
    X = _to_matrix(frames, ct_small)
    beta = project(model, X)
    np.testing.assert_allclose(beta.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(beta.std(axis=0, ddof=1), model.sigmas, rtol=1e-6)
