import numpy as np
import pytest

from gsavatar.errors import ConfigurationError
from gsavatar.kinematics import forward_kinematics, lbs_points
from gsavatar.parammaps import (
    ATTR_CHANNELS,
    SL_OFFSET,
    build_canonical_template,
    extract_gaussians,
    posed_anchor_positions,
    render_position_maps,
    view_directions,
)
from gsavatar.synthetic import make_pose_sequence


def test_front_back_maps_cover_pixels(ct_small):
    assert ct_small.masks.shape == (2, 64, 64)
    assert ct_small.masks[0].sum() > 200  # front view sees most of the body
    assert ct_small.masks[1].sum() > 200
    assert ct_small.n_pixels == int(ct_small.masks.sum())
    assert ct_small.anchor_positions.shape == (ct_small.n_pixels, 3)
    assert ct_small.anchor_weights.shape == (ct_small.n_pixels, ct_small.skeleton.n_joints)


def test_anchors_lie_in_template_bounds(ct_small, template):
    lo = template.vertices.min(0) - 1e-6
    hi = template.vertices.max(0) + 1e-6
    assert np.all(ct_small.anchor_positions >= lo)
    assert np.all(ct_small.anchor_positions <= hi)


def test_anchor_weights_form_a_simplex(ct_small):
    w = ct_small.anchor_weights
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_gather_scatter_round_trip(ct_small, rng):
    vals = rng.normal(size=(ct_small.n_pixels, 5))
    maps = ct_small.scatter(vals)
    assert maps.shape == (2, 64, 64, 5)
    np.testing.assert_array_equal(ct_small.gather(maps), vals)
    # pixels outside the mask stay zero
    assert np.all(maps[~ct_small.masks.astype(bool)] == 0)


def test_posed_anchors_equal_lbs_of_base(ct_small):
    pose = make_pose_sequence(ct_small.skeleton, 4, seed=2)[3]
    tf = forward_kinematics(ct_small.skeleton, pose)
    got = posed_anchor_positions(ct_small, tf)
    want = lbs_points(ct_small.anchor_positions, ct_small.anchor_weights, tf)
    np.testing.assert_array_equal(got, want)


def test_position_maps_exclude_global_motion(ct_small):
    seq = make_pose_sequence(ct_small.skeleton, 6, seed=4, with_global=True)
    pose = seq[5]
    assert np.any(pose.global_translation != 0)
    stripped = type(pose)(pose.joint_rotations)
    np.testing.assert_allclose(
        render_position_maps(ct_small, pose), render_position_maps(ct_small, stripped)
    )


def test_extract_gaussians_applies_offsets(ct_small, rng):
    attrs = np.zeros((ct_small.n_pixels, ATTR_CHANNELS))
    attrs[:, 3] = 1.0  # identity quaternion
    attrs[:, 7:10] = -3.0
    offs = rng.normal(size=(ct_small.n_pixels, 3)) * 0.01
    attrs[:, SL_OFFSET] = offs
    g = extract_gaussians(ct_small, attrs)
    np.testing.assert_allclose(g.positions, ct_small.anchor_positions + offs, atol=1e-12)
    assert len(g) == ct_small.n_pixels


def test_build_rejects_too_tight_extent(template):
    span = float(np.max(template.vertices.max(0)[:2] - template.vertices.min(0)[:2]))
    with pytest.raises(ConfigurationError):
        build_canonical_template(template, 32, extent=span * 1.01)


def test_view_directions_are_unit_and_pose_consistent(ct_small):
    from gsavatar.synthetic import make_cameras

    pose = make_pose_sequence(ct_small.skeleton, 3, seed=6)[2]
    tf = forward_kinematics(ct_small.skeleton, pose)
    cam = make_cameras(2, 64, np.array([0.0, 0.3, 0.0]))[0]
    d = view_directions(ct_small, pose, tf, cam)
    assert d.shape == (ct_small.n_pixels, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)
