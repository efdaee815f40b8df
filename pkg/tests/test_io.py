import numpy as np
import pytest

import gsavatar.io as gio
from gsavatar.errors import ContractError
from gsavatar.kinematics import Pose
from gsavatar.predictor import LinearGaussianPredictor
from gsavatar.posepca import PcaModel
from gsavatar.training import LossReport
from tests.test_gaussians import random_gaussians


def test_gaussians_round_trip(tmp_path, rng):
    g = random_gaussians(rng, 33)
    path = tmp_path / "g.bin"
    gio.write_gaussians(path, g, seed=7)
    g2, seed = gio.read_gaussians(path)
    assert seed == 7
    np.testing.assert_array_equal(
        g.as_records().astype(np.float32), g2.as_records().astype(np.float32)
    )


def test_gaussians_rejects_wrong_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ContractError):
        gio.read_gaussians(p)


def test_mesh_round_trip(tmp_path, rng):
    verts = rng.normal(size=(12, 3))
    faces = rng.integers(0, 12, size=(20, 3)).astype(np.int64)
    path = tmp_path / "m.obj"
    gio.write_mesh(path, verts, faces)
    v2, f2 = gio.read_mesh(path)
    np.testing.assert_allclose(v2, verts, atol=1e-6)
    np.testing.assert_array_equal(f2, faces)


def test_vertex_weights_round_trip(tmp_path, rng):
    w = rng.uniform(size=(9, 5))
    w /= w.sum(axis=1, keepdims=True)
    path = tmp_path / "w.txt"
    gio.write_vertex_weights(path, w)
    w2 = gio.read_vertex_weights(path, 5)
    np.testing.assert_allclose(w2, w, atol=1e-6)
    np.testing.assert_allclose(w2.sum(axis=1), 1.0, atol=1e-12)


def test_vertex_weights_bad_joint_index(tmp_path):
    path = tmp_path / "w.txt"
    path.write_text("0:0.5 9:0.5\n")
    with pytest.raises(ContractError):
        gio.read_vertex_weights(path, 4)


def test_skeleton_round_trip(tmp_path, skeleton):
    path = tmp_path / "s.txt"
    gio.write_skeleton(path, skeleton)
    s2 = gio.read_skeleton(path)
    np.testing.assert_array_equal(s2.parents, skeleton.parents)
    np.testing.assert_allclose(s2.offsets, skeleton.offsets, atol=1e-9)


def test_pose_sequence_round_trip(tmp_path, rng):
    poses = [
        Pose(rng.normal(size=(4, 3)) * 0.3,
             global_rotation=rng.normal(size=3) * 0.1,
             global_translation=rng.normal(size=3) * 0.05)
        for _ in range(6)
    ]
    path = tmp_path / "p.txt"
    gio.write_pose_sequence(path, poses)
    poses2 = gio.read_pose_sequence(path, 4)
    assert len(poses2) == 6
    for a, b in zip(poses, poses2):
        np.testing.assert_allclose(b.joint_rotations, a.joint_rotations, atol=1e-9)
        np.testing.assert_allclose(b.global_rotation, a.global_rotation, atol=1e-9)
        np.testing.assert_allclose(b.global_translation, a.global_translation, atol=1e-9)


def test_pose_sequence_without_global(tmp_path, rng):
    poses = [Pose(rng.normal(size=(3, 3)))]
    path = tmp_path / "p.txt"
    gio.write_pose_sequence(path, poses, with_global=False)
    back = gio.read_pose_sequence(path, 3)
    np.testing.assert_array_equal(back[0].global_rotation, 0.0)


def test_pose_sequence_wrong_joint_count(tmp_path, rng):
    poses = [Pose(rng.normal(size=(4, 3)))]
    path = tmp_path / "p.txt"
    gio.write_pose_sequence(path, poses)
    with pytest.raises(ContractError):
        gio.read_pose_sequence(path, 7)


def test_map_round_trip(tmp_path, rng):
    m = rng.normal(size=(17, 13, 3)).astype(np.float32)
    path = tmp_path / "m.bin"
    gio.write_map(path, m)
    np.testing.assert_array_equal(gio.read_map(path), m.astype(np.float64))


def test_png_round_trip(tmp_path, rng):
    img = rng.uniform(size=(24, 24, 3))
    path = tmp_path / "i.png"
    gio.write_png(path, img)
    back = gio.read_png(path)
    assert back.dtype == np.uint8
    np.testing.assert_allclose(back / 255.0, img, atol=1 / 255.0)


def test_pca_round_trip(tmp_path, rng, ct_small):
    D = 3 * ct_small.n_pixels
    comps, _ = np.linalg.qr(rng.normal(size=(D, 4)))
    model = PcaModel(
        mean=rng.normal(size=D),
        components=comps,
        sigmas=np.ascontiguousarray(np.sort(rng.uniform(0.1, 2.0, 4))[::-1]),
        valid_indices=ct_small.valid_indices,
        resolution=ct_small.resolution,
    )
    path = tmp_path / "pca.bin"
    gio.write_pca(path, model, n_frames=16, seed=3)
    m2, n_frames, seed = gio.read_pca(path)
    assert (n_frames, seed) == (16, 3)
    np.testing.assert_allclose(m2.mean, model.mean, atol=1e-6)
    np.testing.assert_allclose(m2.components, model.components, atol=1e-7)
    np.testing.assert_allclose(m2.sigmas, model.sigmas, atol=1e-6)
    np.testing.assert_array_equal(m2.valid_indices, model.valid_indices)
    assert m2.resolution == ct_small.resolution


def test_predictor_round_trip(tmp_path, rng):
    p = LinearGaussianPredictor(
        base=rng.normal(size=(21, 14)).astype(np.float32),
        coeff_beta=rng.normal(size=(21, 14, 5)).astype(np.float32),
        coeff_view=rng.normal(size=(21, 3, 3)).astype(np.float32),
        template_hash="a" * 64,
        pca_hash="b" * 64,
    )
    path = tmp_path / "pred.bin"
    gio.write_predictor(path, p, seed=9)
    p2, seed = gio.read_predictor(path)
    assert seed == 9
    np.testing.assert_array_equal(p2.base, p.base)
    np.testing.assert_array_equal(p2.coeff_beta, p.coeff_beta)
    np.testing.assert_array_equal(p2.coeff_view, p.coeff_view)
    assert p2.template_hash == p.template_hash
    assert p2.pca_hash == p.pca_hash


def test_predictor_rejects_short_hash(tmp_path, rng):
    p = LinearGaussianPredictor(
        base=np.zeros((2, 14), np.float32),
        coeff_beta=np.zeros((2, 14, 1), np.float32),
        coeff_view=np.zeros((2, 3, 3), np.float32),
        template_hash="abc",
    )
    with pytest.raises(ContractError):
        gio.write_predictor(tmp_path / "p.bin", p)


def test_loss_csv_round_trip(tmp_path):
    hist = [
        LossReport(total=0.5 - i * 0.01, l1=0.4 - i * 0.01, reg=0.1, psnr=20.0 + i)
        for i in range(5)
    ]
    path = tmp_path / "loss.csv"
    gio.write_loss_csv(path, hist, seed=2)
    arr = gio.read_loss_csv(path)
    assert arr.shape == (5, 5)
    np.testing.assert_allclose(arr[:, 0], np.arange(5))
    np.testing.assert_allclose(arr[:, 1], [h.l1 for h in hist], rtol=1e-6)
    np.testing.assert_allclose(arr[:, 3], [h.total for h in hist], rtol=1e-6)
    np.testing.assert_allclose(arr[:, 4], [h.psnr for h in hist], rtol=1e-6)
    assert path.read_text().startswith("# seed=2")


def test_config_round_trip(tmp_path):
    cfg = {"iterations": 100, "learning_rate": 5e-4, "use_pca": True, "name": "run_a"}
    path = tmp_path / "c.txt"
    gio.write_config(path, cfg)
    back = gio.read_config(path)
    assert back["iterations"] == 100
    assert back["learning_rate"] == pytest.approx(5e-4)
    assert back["use_pca"] is True
    assert back["name"] == "run_a"


def test_parse_config_rejects_bad_line():
    from gsavatar.errors import ConfigurationError

    with pytest.raises(ConfigurationError):
        gio.parse_config_text("no equals sign here\n")


def test_cameras_round_trip(tmp_path):
    from gsavatar.synthetic import make_cameras

    cams = make_cameras(3, 64, np.array([0.0, 0.3, 0.0]))
    path = tmp_path / "cams.txt"
    gio.write_cameras(path, cams)
    cams2 = gio.read_cameras(path)
    assert len(cams2) == len(cams)
    for a, b in zip(cams, cams2):
        np.testing.assert_allclose(b.rotation, a.rotation, atol=1e-8)
        np.testing.assert_allclose(b.translation, a.translation, atol=1e-8)
        assert (b.width, b.height) == (a.width, a.height)
        assert b.fx == pytest.approx(a.fx)


def test_content_hash_is_stable(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"hello world")
    h1 = gio.content_hash(p)
    h2 = gio.content_hash(b"hello world")
    assert h1 == h2
    assert len(h1) == 64
    assert h1 != gio.content_hash(b"hello worlds")
