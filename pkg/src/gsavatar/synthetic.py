"""Synthetic desk-scale avatar data: template, motions, cameras, renders.

The figure is a 13-joint capsule humanoid about 0.55 m tall, y up, facing +z.
Ground-truth appearance is a per-pixel Gaussian avatar built on the same
front/back parameterization the fit uses: static positional texture, fixed
scales/opacity, and pose-dependent offsets that are exactly linear in the
frame's clipped PCA coefficients. The fit therefore has a reachable optimum,
and any gap to it is attributable to the pipeline, not the data.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as gio
from .cameras import PerspectiveCamera
from .errors import ConfigurationError
from .kinematics import Pose, Skeleton, forward_kinematics
from .parammaps import (
    SL_COLOR,
    SL_LOG_SCALE,
    SL_OPACITY,
    SL_QUAT,
    ATTR_CHANNELS,
    SkinnedTemplate,
    build_canonical_template,
    posed_anchor_positions,
)
from .posepca import clip_coefficients, fit_pca_matrix, project
from .training import FrameContext, build_pose_skinning, render_frame

JOINT_NAMES = (
    "pelvis", "spine", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee",
    "r_hip", "r_knee",
)


def build_skeleton() -> Skeleton:
    parents = [-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 0, 11]
    offsets = [
        (0.0, 0.28, 0.0),     # pelvis (root, world position)
        (0.0, 0.10, 0.0),     # spine
        (0.0, 0.10, 0.0),     # head
        (-0.07, 0.08, 0.0),   # l_shoulder
        (-0.09, 0.0, 0.0),    # l_elbow
        (-0.08, 0.0, 0.0),    # l_wrist
        (0.07, 0.08, 0.0),    # r_shoulder
        (0.09, 0.0, 0.0),     # r_elbow
        (0.08, 0.0, 0.0),     # r_wrist
        (-0.05, -0.02, 0.0),  # l_hip
        (0.0, -0.12, 0.0),    # l_knee
        (0.05, -0.02, 0.0),   # r_hip
        (0.0, -0.12, 0.0),    # r_knee
    ]
    return Skeleton(np.asarray(parents), np.asarray(offsets), JOINT_NAMES)


def _bone_segments(skeleton: Skeleton) -> list[tuple[int, np.ndarray, np.ndarray, float]]:
    """(joint, start, end, radius) for every capsule of the figure."""
    r = skeleton.rest_positions()
    tips = {
        2: r[2] + np.array([0.0, 0.07, 0.0]),    # head
        5: r[5] + np.array([-0.06, 0.0, 0.0]),   # l hand
        8: r[8] + np.array([0.06, 0.0, 0.0]),    # r hand
        10: r[10] + np.array([0.0, -0.12, 0.0]),  # l shin/foot
        12: r[12] + np.array([0.0, -0.12, 0.0]),  # r shin/foot
    }
    radii = {
        0: 0.050, 1: 0.050, 2: 0.055,
        3: 0.022, 4: 0.020, 5: 0.017,
        6: 0.022, 7: 0.020, 8: 0.017,
        9: 0.032, 10: 0.028, 11: 0.032, 12: 0.028,
    }
    child = {0: 1, 1: 2, 3: 4, 4: 5, 6: 7, 7: 8, 9: 10, 11: 12}
    bones = []
    for j in range(skeleton.n_joints):
        end = r[child[j]] if j in child else tips[j]
        bones.append((j, r[j], end, radii[j]))
    return bones


def capsule_mesh(p0, p1, radius, segments: int = 12, cap_stacks: int = 3):
    """Triangulated capsule around the segment p0..p1."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    axis = p1 - p0
    L = np.linalg.norm(axis)
    if L < 1e-9:
        axis = np.array([0.0, 1.0, 0.0])
        L = 0.0
        w = axis
    else:
        w = axis / L
    # orthonormal frame around w
    ref = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(w, ref)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)

    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    circle = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)

    rows = []
    # bottom hemisphere rings (around p0), then top (around p1)
    for phi in np.linspace(-np.pi / 2, 0.0, cap_stacks + 1)[1:]:
        rows.append(p0 + radius * np.sin(phi) * w + radius * np.cos(phi) * circle)
    for phi in np.linspace(0.0, np.pi / 2, cap_stacks + 1)[:-1]:
        rows.append(p1 + radius * np.sin(phi) * w + radius * np.cos(phi) * circle)

    verts = [p0 - radius * w, p1 + radius * w]  # poles first
    for row in rows:
        verts.extend(row)
    verts = np.asarray(verts)

    faces = []
    n_rows = len(rows)
    def rid(row, s):
        return 2 + row * segments + (s % segments)
    for s in range(segments):  # bottom fan
        faces.append([0, rid(0, s + 1), rid(0, s)])
    for row in range(n_rows - 1):
        for s in range(segments):
            a, b = rid(row, s), rid(row, s + 1)
            c, d = rid(row + 1, s), rid(row + 1, s + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    for s in range(segments):  # top fan
        faces.append([1, rid(n_rows - 1, s), rid(n_rows - 1, s + 1)])
    return verts, np.asarray(faces, dtype=np.int64)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def paint_weights(points: np.ndarray, skeleton: Skeleton, falloff: float = 0.025,
                  support: int = 4) -> np.ndarray:
    """Smooth skinning weights from proximity to the bone capsule axes."""
    bones = _bone_segments(skeleton)
    J = skeleton.n_joints
    d = np.empty((points.shape[0], J))
    for j, a, b, radius in bones:
        # distance to the capsule surface, not the axis, so thick bones win
        d[:, j] = np.maximum(_segment_distances(points, a, b) - radius, 0.0)
    w = np.exp(-((d / falloff) ** 2))
    # keep only the strongest few joints per vertex
    if support < J:
        thresh = np.sort(w, axis=1)[:, -support][:, None]
        w = np.where(w >= thresh, w, 0.0)
    w = np.maximum(w, 1e-12)
    keep = w.max(axis=1, keepdims=True)
    w = np.where(w >= 1e-6 * keep, w, 0.0)
    return w / w.sum(axis=1, keepdims=True)


def build_template(skeleton: Skeleton | None = None, segments: int = 14) -> SkinnedTemplate:
    if skeleton is None:
        skeleton = build_skeleton()
    all_v, all_f = [], []
    base = 0
    for _, a, b, radius in _bone_segments(skeleton):
        v, f = capsule_mesh(a, b, radius, segments=segments)
        all_v.append(v)
        all_f.append(f + base)
        base += v.shape[0]
    verts = np.concatenate(all_v)
    faces = np.concatenate(all_f)
    weights = paint_weights(verts, skeleton)
    return SkinnedTemplate(verts, faces, weights, skeleton)


def texture_colors(points: np.ndarray) -> np.ndarray:
    """Smooth high-contrast positional texture in [0.05, 0.95]."""
    p = np.asarray(points, dtype=float)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = 0.5 + 0.32 * np.sin(55.0 * x) * np.cos(47.0 * y) + 0.10 * np.sin(23.0 * z)
    g = 0.5 + 0.30 * np.sin(51.0 * y + 1.3) * np.cos(39.0 * z) + 0.10 * np.cos(29.0 * x)
    b = 0.5 + 0.30 * np.sin(43.0 * z + 2.1) * np.cos(53.0 * x) + 0.10 * np.sin(31.0 * y)
    return np.clip(np.stack([r, g, b], axis=1), 0.05, 0.95)


# per-joint motion drivers: (amplitude rad, axis, one_sided)
_DRIVERS = {
    "pelvis": (0.08, (0, 0, 1), False),
    "spine": (0.12, (1, 0, 0), False),
    "head": (0.20, (0, 1, 0), False),
    "l_shoulder": (0.45, (0, 0, 1), False),
    "l_elbow": (0.55, (0, 0, 1), True),
    "l_wrist": (0.25, (0, 1, 0), False),
    "r_shoulder": (0.45, (0, 0, 1), False),
    "r_elbow": (0.55, (0, 0, -1), True),
    "r_wrist": (0.25, (0, 1, 0), False),
    "l_hip": (0.30, (1, 0, 0), False),
    "l_knee": (0.45, (1, 0, 0), True),
    "r_hip": (0.30, (-1, 0, 0), False),
    "r_knee": (0.45, (1, 0, 0), True),
}


def make_pose_sequence(
    skeleton: Skeleton,
    n_frames: int,
    amplitude: float = 1.0,
    seed: int = 0,
    with_global: bool = True,
) -> list[Pose]:
    """Smooth sinusoidal joint motion with incommensurate frequencies, plus a
    gentle global yaw/sway when requested. amplitude scales all joint angles
    (2.0 gives the out-of-distribution variant)."""
    rng = np.random.default_rng(seed)
    J = skeleton.n_joints
    freqs = rng.uniform(0.7, 2.9, size=J)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=J)
    names = skeleton.names or tuple(f"joint{i}" for i in range(J))

    poses = []
    for t in range(n_frames):
        tau = t / max(n_frames, 1)
        aa = np.zeros((J, 3))
        for j, name in enumerate(names):
            amp, axis, one_sided = _DRIVERS[name]
            s = np.sin(2.0 * np.pi * freqs[j] * tau + phases[j])
            ang = amp * (0.5 + 0.5 * s) if one_sided else amp * s
            axis_v = np.asarray(axis, dtype=float)
            aa[j] = amplitude * ang * axis_v / np.linalg.norm(axis_v)
        if with_global:
            g_rot = np.array([0.0, 0.30 * np.sin(2.0 * np.pi * 0.9 * tau + 0.4), 0.0])
            g_trans = 0.012 * np.array(
                [
                    np.sin(2.0 * np.pi * 1.1 * tau),
                    0.6 * np.sin(2.0 * np.pi * 0.7 * tau + 1.0),
                    np.sin(2.0 * np.pi * 1.7 * tau + 2.0),
                ]
            )
            poses.append(Pose(aa, g_rot, g_trans))
        else:
            poses.append(Pose(aa))
    return poses


def make_random_poses(
    skeleton: Skeleton, n: int, max_angle: float, seed: int = 0
) -> list[Pose]:
    """Independent random axis-angle per joint, |angle| <= max_angle radians."""
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n):
        axes = rng.normal(size=(skeleton.n_joints, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = rng.uniform(-max_angle, max_angle, size=skeleton.n_joints)
        poses.append(Pose(axes * angles[:, None]))
    return poses


def make_cameras(
    n_cameras: int,
    image_size: int,
    center,
    radius: float = 1.1,
    focal_scale: float = 1.6,
    holdout: bool = True,
) -> list[PerspectiveCamera]:
    """Ring of cameras around the figure; if holdout, one extra camera sits
    half a step off the ring grid (appended last)."""
    center = np.asarray(center, dtype=float)
    f = focal_scale * image_size
    cams = []
    azimuths = [2.0 * np.pi * i / n_cameras for i in range(n_cameras)]
    if holdout:
        azimuths.append(2.0 * np.pi * 0.5 / n_cameras)
    for k, az in enumerate(azimuths):
        elev = np.deg2rad(12.0 if k % 2 == 0 else -8.0)
        eye = center + radius * np.array(
            [np.sin(az) * np.cos(elev), np.sin(elev), np.cos(az) * np.cos(elev)]
        )
        cams.append(
            PerspectiveCamera.from_lookat(
                eye, center, fx=f, fy=f, width=image_size, height=image_size,
                up=(0.0, 1.0, 0.0),
            )
        )
    return cams


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_frames: int = 200
    n_cameras: int = 8          # training ring; one held-out camera is added
    image_size: int = 256
    map_resolution: int = 512
    n_components: int = 20
    n_ood_poses: int = 20
    offset_scale: float = 0.004  # meters, typical GT offset magnitude
    gt_opacity_logit: float = 3.0
    gt_sigma_scale: float = 0.6  # gaussian sigma as a fraction of pixel size

    def __post_init__(self):
        if self.n_frames < 2 * self.n_components:
            raise ConfigurationError("need n_frames comfortably above n_components")


def gt_attribute_maps(ct, betas: np.ndarray, spec: SyntheticSpec, rng) -> tuple:
    """(static attrs (P, 14), offset basis (P, 3, N)); per-frame offsets are
    offset_basis @ beta, so ground truth is exactly representable by the
    linear predictor."""
    P = ct.n_pixels
    attrs = np.zeros((P, ATTR_CHANNELS), dtype=np.float64)
    attrs[:, SL_QUAT.start] = 1.0
    px_world = ct.extent / ct.resolution
    attrs[:, SL_LOG_SCALE] = np.log(spec.gt_sigma_scale * px_world)
    attrs[:, SL_OPACITY.start] = spec.gt_opacity_logit
    attrs[:, SL_COLOR] = texture_colors(ct.anchor_positions)

    N = betas.shape[1]
    sig = np.std(betas, axis=0)
    sig = np.maximum(sig, 0.1 * max(sig.max(), 1e-12))
    scale = spec.offset_scale / (np.sqrt(3.0 * N) * sig)
    basis = rng.normal(size=(P, 3, N)) * scale[None, None, :]
    return attrs, basis


def generate_dataset(out_dir, spec: SyntheticSpec, progress: bool = False) -> Path:
    """Write a complete training dataset under out_dir and return its path."""
    out = Path(out_dir)
    (out / "template").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    skeleton = build_skeleton()
    template = build_template(skeleton)
    gio.write_skeleton(out / "template" / "skeleton.txt", skeleton)
    gio.write_mesh(out / "template" / "mesh.obj", template.vertices, template.faces)
    gio.write_vertex_weights(out / "template" / "weights.txt", template.vertex_weights)

    poses = make_pose_sequence(skeleton, spec.n_frames, amplitude=1.0, seed=spec.seed)
    poses_ood = make_pose_sequence(
        skeleton, spec.n_ood_poses, amplitude=2.0, seed=spec.seed + 1
    )
    gio.write_pose_sequence(out / "poses_train.txt", poses)
    gio.write_pose_sequence(out / "poses_ood.txt", poses_ood)

    v = template.vertices
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    cameras = make_cameras(spec.n_cameras, spec.image_size, center)
    gio.write_cameras(out / "cameras.txt", cameras)

    gio.write_config(
        out / "meta.txt",
        {
            "seed": spec.seed,
            "n_frames": spec.n_frames,
            "n_cameras": len(cameras),
            "holdout_camera": len(cameras) - 1,
            "image_size": spec.image_size,
            "map_resolution": spec.map_resolution,
            "n_components": spec.n_components,
            "offset_scale": spec.offset_scale,
            "n_joints": skeleton.n_joints,
        },
    )

    # ground truth lives on the same parameterization the fit will use
    ct = build_canonical_template(template, spec.map_resolution)
    fks = [forward_kinematics(skeleton, p) for p in poses]
    X = np.empty((spec.n_frames, 3 * ct.n_pixels))
    for t, tf in enumerate(fks):
        X[t] = posed_anchor_positions(ct, tf).reshape(-1)
    pca = fit_pca_matrix(X, ct, spec.n_components)
    betas = clip_coefficients(pca, project(pca, X))

    static_attrs, offset_basis = gt_attribute_maps(ct, betas, spec, rng)

    img_root = out / "images"
    for c in range(len(cameras)):
        (img_root / f"cam{c:02d}").mkdir(parents=True, exist_ok=True)

    attrs32 = static_attrs.astype(np.float32)
    for t in range(spec.n_frames):
        skin = build_pose_skinning(ct, poses[t], fks[t])
        frame_attrs = attrs32.copy()
        frame_attrs[:, 0:3] = (offset_basis @ betas[t]).astype(np.float32)
        for c, cam in enumerate(cameras):
            fctx = FrameContext(camera=cam, skin=skin,
                                beta=np.zeros(1, np.float32),
                                view_dir=np.zeros(3, np.float32))
            image, _ = render_frame(ct, fctx, frame_attrs)
            gio.write_png(img_root / f"cam{c:02d}" / f"frame{t:04d}.png", image)
        if progress and t % 20 == 0:
            print(f"[gen] frame {t}/{spec.n_frames}")
    return out
