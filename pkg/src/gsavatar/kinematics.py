"""Skeletal kinematics: FK, linear blend skinning, volumetric weight
diffusion, and canonical-space correspondence by Gauss-Newton.

Skinning transforms are expressed relative to the rest pose, so the rest pose
maps every point to itself. The global (root body) rotation/translation is
not part of forward kinematics; it is applied separately at render time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .errors import ConfigurationError, ContractError, DegenerateSkinningError
from .gaussians import (
    Gaussians,
    RigidTransform,
    matrix_to_quaternion,
    quaternion_multiply,
)


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula, shape (..., 3) -> (..., 3, 3); small angles via series."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-8
    axis = np.where(theta > 1e-30, aa / np.where(theta == 0, 1.0, theta), 0.0)
    x, y, z = np.moveaxis(axis, -1, 0)
    zero = np.zeros_like(x)
    K = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    th = theta[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)
    if np.any(small):
        # first-order fallback keeps gradients finite near zero
        aax, aay, aaz = np.moveaxis(aa, -1, 0)
        Ks = np.stack(
            [
                np.stack([zero, -aaz, aay], axis=-1),
                np.stack([aaz, zero, -aax], axis=-1),
                np.stack([-aay, aax, zero], axis=-1),
            ],
            axis=-2,
        )
        R = np.where(small[..., None, None], eye + Ks, R)
    return R


@dataclass(frozen=True)
class Skeleton:
    """Joint tree in topological order: parents[i] < i, root parent is -1.

    offsets[j] is the rest-pose offset from the parent joint (for the root,
    its world rest position).
    """

    parents: np.ndarray
    offsets: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=float)
        if parents.ndim != 1 or offsets.shape != (parents.shape[0], 3):
            raise ContractError("parents must be (J,), offsets (J, 3)")
        if parents[0] != -1 or np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, len(parents))):
            raise ContractError("joints must be topologically ordered with a single root")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        pos[0] = self.offsets[0]
        for j in range(1, self.n_joints):
            pos[j] = pos[self.parents[j]] + self.offsets[j]
        return pos


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus an optional global rigid motion."""

    joint_rotations: np.ndarray
    global_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=float)
        self.global_rotation = np.asarray(self.global_rotation, dtype=float)
        self.global_translation = np.asarray(self.global_translation, dtype=float)
        if self.joint_rotations.ndim != 2 or self.joint_rotations.shape[1] != 3:
            raise ContractError("joint_rotations must be (J, 3) axis-angle")

    @property
    def n_joints(self) -> int:
        return self.joint_rotations.shape[0]

    def global_transform(self) -> RigidTransform:
        return RigidTransform(axis_angle_to_matrix(self.global_rotation), self.global_translation)

    @staticmethod
    def rest(n_joints: int) -> "Pose":
        return Pose(np.zeros((n_joints, 3)))

    def flat(self, with_global: bool = True) -> np.ndarray:
        parts = [self.joint_rotations.reshape(-1)]
        if with_global:
            parts += [self.global_rotation, self.global_translation]
        return np.concatenate(parts)


@dataclass
class JointTransforms:
    """Skinning transforms per joint: x_world = rotations[j] @ x + translations[j]
    for a point rigidly attached to joint j. Identity at rest pose."""

    rotations: np.ndarray
    translations: np.ndarray
    joint_positions: np.ndarray

    @property
    def n_joints(self) -> int:
        return self.rotations.shape[0]

    def as_rigid_transforms(self) -> list[RigidTransform]:
        return [RigidTransform(r, t) for r, t in zip(self.rotations, self.translations)]


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> JointTransforms:
    """Compose joint rotations down the tree; returns rest-relative skinning
    transforms. The pose's global motion is deliberately not applied here."""
    if pose.n_joints != skeleton.n_joints:
        raise ContractError("pose joint count does not match skeleton")
    J = skeleton.n_joints
    local_R = axis_angle_to_matrix(pose.joint_rotations)
    rest = skeleton.rest_positions()

    world_R = np.zeros((J, 3, 3))
    world_t = np.zeros((J, 3))
    for j in range(J):
        p = skeleton.parents[j]
        if p < 0:
            world_R[j] = local_R[j]
            world_t[j] = skeleton.offsets[j]
        else:
            world_R[j] = world_R[p] @ local_R[j]
            world_t[j] = world_R[p] @ skeleton.offsets[j] + world_t[p]

    # rest-relative: M_j(x) = G_j(x - rest_j), so rest pose is the identity
    skin_t = world_t - np.einsum("jab,jb->ja", world_R, rest)
    return JointTransforms(rotations=world_R, translations=skin_t, joint_positions=world_t)


def blend_transforms(weights: np.ndarray, tf: JointTransforms) -> tuple[np.ndarray, np.ndarray]:
    """Per-point blended affine (A, t): x -> A x + t."""
    weights = np.asarray(weights)
    if weights.shape[-1] != tf.n_joints:
        raise ContractError("weight dimension does not match joint count")
    A = np.einsum("...j,jab->...ab", weights, tf.rotations)
    t = weights @ tf.translations
    return A, t


def lbs_points(points: np.ndarray, weights: np.ndarray, tf: JointTransforms) -> np.ndarray:
    A, t = blend_transforms(weights, tf)
    return np.einsum("...ab,...b->...a", A, np.asarray(points)) + t


def polar_rotations(A: np.ndarray, max_iter: int = 30, tol: float = 1e-12) -> np.ndarray:
    """Orthogonal polar factor of each 3x3 matrix via scaled Newton iteration.

    Requires det(A) > 0: a reflecting or singular blended transform cannot be
    turned into a rotation and raises DegenerateSkinningError.
    """
    X = np.asarray(A, dtype=float).copy()
    if X.shape[-2:] != (3, 3):
        raise ContractError("polar_rotations expects (..., 3, 3)")
    det = np.linalg.det(X)
    if np.any(~np.isfinite(det)) or np.any(det <= 1e-12):
        raise DegenerateSkinningError("blended transform is singular or reflecting")
    for _ in range(max_iter):
        det = np.linalg.det(X)
        gamma = np.abs(det) ** (-1.0 / 3.0)
        X_new = 0.5 * (gamma[..., None, None] * X + np.linalg.inv(X).swapaxes(-1, -2) / gamma[..., None, None])
        delta = np.max(np.abs(X_new - X))
        X = X_new
        if delta < tol:
            break
    return X


@njit(cache=True, parallel=True)
def _polar_kernel(A, out):
    P = A.shape[0]
    for p in prange(P):
        x00, x01, x02 = A[p, 0, 0], A[p, 0, 1], A[p, 0, 2]
        x10, x11, x12 = A[p, 1, 0], A[p, 1, 1], A[p, 1, 2]
        x20, x21, x22 = A[p, 2, 0], A[p, 2, 1], A[p, 2, 2]
        ok = True
        for _ in range(30):
            c00 = x11 * x22 - x12 * x21
            c01 = x12 * x20 - x10 * x22
            c02 = x10 * x21 - x11 * x20
            det = x00 * c00 + x01 * c01 + x02 * c02
            if det <= 1e-12:
                ok = False
                break
            g = det ** (-1.0 / 3.0)
            # inverse-transpose via the cofactor matrix
            c10 = x02 * x21 - x01 * x22
            c11 = x00 * x22 - x02 * x20
            c12 = x01 * x20 - x00 * x21
            c20 = x01 * x12 - x02 * x11
            c21 = x02 * x10 - x00 * x12
            c22 = x00 * x11 - x01 * x10
            h = 0.5 / (g * det)
            g = 0.5 * g
            n00 = g * x00 + h * c00
            n01 = g * x01 + h * c01
            n02 = g * x02 + h * c02
            n10 = g * x10 + h * c10
            n11 = g * x11 + h * c11
            n12 = g * x12 + h * c12
            n20 = g * x20 + h * c20
            n21 = g * x21 + h * c21
            n22 = g * x22 + h * c22
            delta = max(
                abs(n00 - x00), abs(n01 - x01), abs(n02 - x02),
                abs(n10 - x10), abs(n11 - x11), abs(n12 - x12),
                abs(n20 - x20), abs(n21 - x21), abs(n22 - x22),
            )
            x00, x01, x02 = n00, n01, n02
            x10, x11, x12 = n10, n11, n12
            x20, x21, x22 = n20, n21, n22
            if delta < 1e-10:
                break
        if ok:
            out[p, 0, 0], out[p, 0, 1], out[p, 0, 2] = x00, x01, x02
            out[p, 1, 0], out[p, 1, 1], out[p, 1, 2] = x10, x11, x12
            out[p, 2, 0], out[p, 2, 1], out[p, 2, 2] = x20, x21, x22
        else:
            out[p, 0, 0] = np.nan


def polar_rotations_fast(A: np.ndarray) -> np.ndarray:
    """Kernel version of polar_rotations for large batches; same math."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 3 or A.shape[-2:] != (3, 3):
        raise ContractError("polar_rotations_fast expects (P, 3, 3)")
    out = np.empty_like(A)
    _polar_kernel(A, out)
    if np.any(np.isnan(out[:, 0, 0])):
        raise DegenerateSkinningError("blended transform is singular or reflecting")
    return out


@dataclass
class VolumeGrid:
    """Axis-aligned voxel grid; origin is the center of voxel (0, 0, 0)."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0 or any(d < 2 for d in self.dims):
            raise ConfigurationError("voxel grid needs positive size and >= 2 voxels per axis")

    def voxel_centers(self) -> np.ndarray:
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.origin + idx * self.voxel_size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin - 0.5 * self.voxel_size
        hi = self.origin + (np.asarray(self.dims) - 0.5) * self.voxel_size
        return lo, hi


@dataclass
class WeightVolume:
    """Dense skinning-weight field; trilinear samples are renormalized."""

    grid: VolumeGrid
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.shape[:3] != self.grid.dims:
            raise ContractError("weight volume shape does not match grid dims")
        self.weights = w

    @property
    def n_joints(self) -> int:
        return self.weights.shape[3]

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation with border clamping, rows renormalized."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        g = (pts - self.grid.origin) / self.grid.voxel_size
        dims = np.asarray(self.grid.dims)
        g = np.clip(g, 0.0, dims - 1.000001)
        i0 = np.floor(g).astype(np.int64)
        i0 = np.minimum(i0, dims - 2)
        f = g - i0

        w = self.weights
        out = np.zeros((pts.shape[0], w.shape[3]), dtype=np.float64)
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    corner = w[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                    out += (wx * wy * wz)[:, None] * corner
        s = out.sum(axis=1, keepdims=True)
        if np.any(s <= 1e-9):
            raise DegenerateSkinningError("sampled skinning weights sum to zero")
        return out / s


def _sample_surface(vertices, faces, vertex_weights, spacing):
    """Barycentric point samples over each triangle, dense w.r.t. spacing."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    e = np.maximum(
        np.linalg.norm(v1 - v0, axis=1),
        np.maximum(np.linalg.norm(v2 - v0, axis=1), np.linalg.norm(v2 - v1, axis=1)),
    )
    levels = np.maximum(1, np.ceil(e / spacing).astype(np.int64))

    pts_parts = []
    wts_parts = []
    for n in np.unique(levels):
        sel = levels == n
        ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = (ii + jj) <= n
        u = (ii[keep] / n).astype(float)
        v = (jj[keep] / n).astype(float)
        bary = np.stack([1.0 - u - v, u, v], axis=1)  # (B, 3)
        tri_v = np.stack([v0[sel], v1[sel], v2[sel]], axis=1)  # (F, 3, 3)
        pts = np.einsum("bk,fkd->fbd", bary, tri_v).reshape(-1, 3)
        wv = vertex_weights[faces[sel]]  # (F, 3, J)
        wts = np.einsum("bk,fkj->fbj", bary, wv).reshape(-1, wv.shape[2])
        pts_parts.append(pts)
        wts_parts.append(wts)
    return np.concatenate(pts_parts), np.concatenate(wts_parts)


@njit(cache=True)
def _diffuse_iterations(weights, fixed, max_iter, tol):
    nx, ny, nz, J = weights.shape
    cur = weights
    nxt = weights.copy()
    it = 0
    for it in range(max_iter):
        max_delta = 0.0
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if fixed[i, j, k]:
                        continue
                    for c in range(J):
                        acc = 0.0
                        cntn = 0
                        if i > 0:
                            acc += cur[i - 1, j, k, c]; cntn += 1
                        if i < nx - 1:
                            acc += cur[i + 1, j, k, c]; cntn += 1
                        if j > 0:
                            acc += cur[i, j - 1, k, c]; cntn += 1
                        if j < ny - 1:
                            acc += cur[i, j + 1, k, c]; cntn += 1
                        if k > 0:
                            acc += cur[i, j, k - 1, c]; cntn += 1
                        if k < nz - 1:
                            acc += cur[i, j, k + 1, c]; cntn += 1
                        val = acc / cntn
                        d = abs(val - cur[i, j, k, c])
                        if d > max_delta:
                            max_delta = d
                        nxt[i, j, k, c] = val
        tmp = cur
        cur = nxt
        nxt = tmp
        if max_delta < tol:
            break
    return cur, it + 1


def diffuse_weights(
    vertices: np.ndarray,
    faces: np.ndarray,
    vertex_weights: np.ndarray,
    grid: VolumeGrid,
    max_iter: int = 500,
    tol: float = 1e-4,
) -> WeightVolume:
    """Propagate surface skinning weights into a volume.

    Voxels within one voxel of the surface copy their nearest surface
    sample's weights and stay fixed; the interior relaxes under a 6-neighbor
    Laplacian (warm-started from nearest weights) until the largest per-entry
    change drops below tol. All voxels are renormalized at the end.
    """
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    vertex_weights = np.asarray(vertex_weights, dtype=float)
    lo, hi = grid.bounds()
    if np.any(vertices.min(axis=0) - grid.voxel_size < lo) or np.any(
        vertices.max(axis=0) + grid.voxel_size > hi
    ):
        raise ConfigurationError("voxel grid does not enclose the template with margin")

    pts, wts = _sample_surface(vertices, faces, vertex_weights, grid.voxel_size / 2.0)
    tree = cKDTree(pts)
    centers = grid.voxel_centers()
    dist, idx = tree.query(centers, workers=1)

    nx, ny, nz = grid.dims
    J = vertex_weights.shape[1]
    vol = wts[idx].reshape(nx, ny, nz, J).astype(np.float32)
    fixed = (dist < grid.voxel_size).reshape(nx, ny, nz)

    vol, _ = _diffuse_iterations(vol, fixed, max_iter, tol)
    vol = np.maximum(vol, 0.0)  # cancellation in the relaxation can leave -1e-18
    s = vol.sum(axis=3, keepdims=True)
    vol = vol / np.maximum(s, 1e-12)
    return WeightVolume(grid=grid, weights=vol)


def inverse_skinning_init(
    x_posed: np.ndarray,
    posed_vertices: np.ndarray,
    vertex_weights: np.ndarray,
    tf: JointTransforms,
) -> np.ndarray:
    """Initial canonical guess: borrow the nearest posed vertex's weights and
    invert that blended affine."""
    tree = cKDTree(np.asarray(posed_vertices, dtype=float))
    _, idx = tree.query(np.atleast_2d(x_posed), workers=1)
    w = np.asarray(vertex_weights, dtype=float)[idx]
    A, t = blend_transforms(w, tf)
    rhs = np.atleast_2d(x_posed) - t
    det = np.linalg.det(A)
    if np.any(np.abs(det) < 1e-12):
        raise DegenerateSkinningError("singular blended transform in inverse-skinning init")
    return np.linalg.solve(A, rhs[..., None])[..., 0]


def root_find_canonical(
    x_posed: np.ndarray,
    tf: JointTransforms,
    volume: WeightVolume,
    x_init: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 20,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Find canonical points x with LBS(x) = x_posed by Gauss-Newton.

    Weights come from the volume at the current iterate and are treated as
    locally constant, so the Jacobian is the blended linear part. Points that
    fail to reach tol within max_iter steps fall back to their initial guess
    with converged=False. Returns (x_canonical, converged, iterations).
    """
    x_posed = np.atleast_2d(np.asarray(x_posed, dtype=float))
    x = np.atleast_2d(np.asarray(x_init, dtype=float)).copy()
    if x.shape != x_posed.shape:
        raise ContractError("x_init must match x_posed shape")
    P = x.shape[0]
    converged = np.zeros(P, dtype=bool)
    iterations = np.zeros(P, dtype=np.int64)
    active = np.ones(P, dtype=bool)
    lo, hi = volume.grid.bounds()

    for it in range(max_iter + 1):
        ids = np.flatnonzero(active)
        if ids.size == 0:
            break
        w = volume.sample(x[ids])
        A, t = blend_transforms(w, tf)
        r = np.einsum("pab,pb->pa", A, x[ids]) + t - x_posed[ids]
        ok = np.linalg.norm(r, axis=1) < tol
        if np.any(ok):
            hit = ids[ok]
            converged[hit] = True
            iterations[hit] = it
            active[hit] = False
        if it == max_iter:
            break
        ids = ids[~ok]
        if ids.size == 0:
            continue
        A = A[~ok]
        r = r[~ok]
        det = np.linalg.det(A)
        bad = np.abs(det) < 1e-12
        if np.any(bad):
            active[ids[bad]] = False  # stuck on a singular blend: give up
            ids, A, r = ids[~bad], A[~bad], r[~bad]
        if ids.size == 0:
            continue
        step = np.linalg.solve(A, -r[..., None])[..., 0]
        x[ids] = np.clip(x[ids] + step, lo, hi)

    x_out = np.where(converged[:, None], x, np.atleast_2d(np.asarray(x_init, dtype=float)))
    return x_out, converged, iterations


@dataclass
class SkinningAux:
    """Cached per-point pose quantities for the render chain and its adjoint."""

    A_lin: np.ndarray
    A_t: np.ndarray
    rot_quat: np.ndarray  # polar rotation of A_lin as quaternions


def skinning_for_points(weights: np.ndarray, tf: JointTransforms) -> SkinningAux:
    A, t = blend_transforms(weights, tf)
    R = polar_rotations_fast(A.reshape(-1, 3, 3)).reshape(A.shape)
    return SkinningAux(A_lin=A, A_t=t, rot_quat=matrix_to_quaternion(R))


def lbs_gaussians(gaussians: Gaussians, weights: np.ndarray, tf: JointTransforms) -> Gaussians:
    """Pose canonical Gaussians: positions through the blended affine,
    orientations through its polar rotation, scales and opacity unchanged."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(gaussians), tf.n_joints):
        raise ContractError("weights must be (n_gaussians, n_joints)")
    aux = skinning_for_points(weights, tf)
    pos = np.einsum("pab,pb->pa", aux.A_lin, gaussians.positions) + aux.A_t
    quat = quaternion_multiply(aux.rot_quat, gaussians.quaternions)
    return Gaussians(
        positions=pos,
        quaternions=quat,
        log_scales=gaussians.log_scales.copy(),
        opacity_logits=gaussians.opacity_logits.copy(),
        colors=gaussians.colors.copy(),
    )
