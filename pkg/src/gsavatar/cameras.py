"""Cameras and the projection of 3D Gaussians to screen-space splats.

Camera frame convention: x right, y down, z forward (depth is camera-frame z).
Pixel centers sit on integer coordinates; the default principal point is the
image center (width-1)/2, (height-1)/2.

Projected 2D covariances are stored raw (no blur dilation); the rasterizer
adds its dilation when inverting to a conic, so projection gradients stay
exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .gaussians import Gaussians, RigidTransform, build_covariance, covariance_backward


@dataclass
class Splats2D:
    """Screen-space splats: pixel means, packed 2x2 covariance, depth order key.

    covs packs the symmetric covariance as [xx, xy, yy] per splat.
    """

    means: np.ndarray
    covs: np.ndarray
    depths: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = len(np.asarray(self.means))
        shapes = {
            "means": (n, 2),
            "covs": (n, 3),
            "depths": (n,),
            "opacities": (n,),
            "colors": (n, 3),
        }
        for name, want in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name))
            if arr.shape != want:
                raise ContractError(f"{name} must have shape {want}, got {arr.shape}")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self.means.shape[0]

    def take(self, order: np.ndarray) -> "Splats2D":
        return Splats2D(
            self.means[order],
            self.covs[order],
            self.depths[order],
            self.opacities[order],
            self.colors[order],
        )


@dataclass
class SplatGrads:
    """Adjoints w.r.t. Splats2D fields. cov xy slot holds the combined
    off-diagonal sensitivity (counted once)."""

    d_means: np.ndarray
    d_covs: np.ndarray
    d_opacities: np.ndarray
    d_colors: np.ndarray


@dataclass
class GaussianGrads:
    d_positions: np.ndarray
    d_quaternions: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_colors: np.ndarray

    @staticmethod
    def zeros(n: int, dtype=np.float64) -> "GaussianGrads":
        return GaussianGrads(
            np.zeros((n, 3), dtype),
            np.zeros((n, 4), dtype),
            np.zeros((n, 3), dtype),
            np.zeros(n, dtype),
            np.zeros((n, 3), dtype),
        )


def _validate_rotation(R):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
        raise ContractError("camera rotation must be orthonormal 3x3")
    if np.linalg.det(R) < 0:
        raise ContractError("camera rotation must not reflect")
    return R


@dataclass(frozen=True)
class OrthoCamera:
    """Orthographic camera; pixels_per_meter scales camera-frame xy to pixels."""

    rotation: np.ndarray
    translation: np.ndarray
    pixels_per_meter: float
    width: int
    height: int
    cx: float = field(default=None)  # type: ignore[assignment]
    cy: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "rotation", _validate_rotation(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        if self.cx is None:
            object.__setattr__(self, "cx", (self.width - 1) / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", (self.height - 1) / 2.0)
        if self.pixels_per_meter <= 0:
            raise ContractError("pixels_per_meter must be positive")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def view_direction(self) -> np.ndarray:
        """Unit direction from scene toward the camera, in world frame."""
        return -self.rotation[2]


@dataclass(frozen=True)
class PerspectiveCamera:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    width: int
    height: int
    cx: float = field(default=None)  # type: ignore[assignment]
    cy: float = field(default=None)  # type: ignore[assignment]
    near: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "rotation", _validate_rotation(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        if self.cx is None:
            object.__setattr__(self, "cx", (self.width - 1) / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", (self.height - 1) / 2.0)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @staticmethod
    def from_lookat(
        eye, target, fx: float, fy: float, width: int, height: int, up=(0.0, 0.0, 1.0)
    ) -> "PerspectiveCamera":
        R = lookat_rotation(eye, target, up)
        t = -R @ np.asarray(eye, dtype=float)
        return PerspectiveCamera(R, t, fx=fx, fy=fy, width=width, height=height)


def lookat_rotation(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation with +z toward target, +y down."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ContractError("lookat eye and target coincide")
    fwd = fwd / n
    upv = np.asarray(up, dtype=float)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ContractError("lookat up direction is parallel to the view axis")
    right = right / rn
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=0)


def project_orthographic(gaussians: Gaussians, camera: OrthoCamera) -> Splats2D:
    """All splats project; depth is camera-frame z (used only for ordering)."""
    s = camera.pixels_per_meter
    q = camera.world_to_camera(gaussians.positions)
    means = np.stack([s * q[:, 0] + camera.cx, s * q[:, 1] + camera.cy], axis=1)
    cov3 = build_covariance(gaussians.quaternions, gaussians.log_scales)
    cov_cam = np.einsum("ij,njk,lk->nil", camera.rotation, cov3, camera.rotation)
    covs = (s * s) * np.stack(
        [cov_cam[:, 0, 0], cov_cam[:, 0, 1], cov_cam[:, 1, 1]], axis=1
    )
    dt = gaussians.positions.dtype
    return Splats2D(
        means.astype(dt),
        covs.astype(dt),
        q[:, 2].astype(dt),
        gaussians.opacities().astype(dt),
        gaussians.colors.astype(dt, copy=True),
    )


def project_orthographic_backward(
    gaussians: Gaussians, camera: OrthoCamera, grads: SplatGrads
) -> GaussianGrads:
    s = camera.pixels_per_meter
    R = camera.rotation
    n = len(gaussians)
    dm = np.asarray(grads.d_means, dtype=float)
    # mean path: d q_xy = s * d_mean, then back through the rotation
    dq = np.zeros((n, 3))
    dq[:, 0] = s * dm[:, 0]
    dq[:, 1] = s * dm[:, 1]
    d_pos = dq @ R

    # cov path: cov2d = s^2 * M Sigma M^T with M = R[:2]
    M = R[:2]
    g = np.asarray(grads.d_covs, dtype=float)
    G2 = np.empty((n, 2, 2))
    G2[:, 0, 0] = g[:, 0]
    G2[:, 0, 1] = G2[:, 1, 0] = 0.5 * g[:, 1]
    G2[:, 1, 1] = g[:, 2]
    d_sigma = (s * s) * np.einsum("ai,nab,bj->nij", M, G2, M)
    d_quat, d_ls = covariance_backward(gaussians.quaternions, gaussians.log_scales, d_sigma)

    alpha = gaussians.opacities()
    d_logit = np.asarray(grads.d_opacities, dtype=float) * alpha * (1.0 - alpha)
    return GaussianGrads(d_pos, d_quat, d_ls, d_logit, np.asarray(grads.d_colors, dtype=float).copy())


def project_perspective(
    gaussians: Gaussians, camera: PerspectiveCamera
) -> tuple[Splats2D, np.ndarray]:
    """EWA-style first-order projection.

    Splats behind the near plane stay in the output (row alignment for
    gradients) but with opacity zeroed and depth +inf so they never bin or
    blend. Returns (splats, valid_mask).
    """
    q = camera.world_to_camera(gaussians.positions)
    valid = q[:, 2] > camera.near
    qz = np.where(valid, q[:, 2], 1.0)

    mx = camera.fx * q[:, 0] / qz + camera.cx
    my = camera.fy * q[:, 1] / qz + camera.cy
    means = np.stack([np.where(valid, mx, 0.0), np.where(valid, my, 0.0)], axis=1)

    cov3 = build_covariance(gaussians.quaternions, gaussians.log_scales)
    cov_cam = np.einsum("ij,njk,lk->nil", camera.rotation, cov3, camera.rotation)
    fx, fy = camera.fx, camera.fy
    j00 = fx / qz
    j02 = -fx * q[:, 0] / (qz * qz)
    j11 = fy / qz
    j12 = -fy * q[:, 1] / (qz * qz)
    # rows of J: (j00, 0, j02) and (0, j11, j12)
    a = (
        j00 * j00 * cov_cam[:, 0, 0]
        + 2 * j00 * j02 * cov_cam[:, 0, 2]
        + j02 * j02 * cov_cam[:, 2, 2]
    )
    b = (
        j00 * j11 * cov_cam[:, 0, 1]
        + j00 * j12 * cov_cam[:, 0, 2]
        + j02 * j11 * cov_cam[:, 1, 2]
        + j02 * j12 * cov_cam[:, 2, 2]
    )
    c = (
        j11 * j11 * cov_cam[:, 1, 1]
        + 2 * j11 * j12 * cov_cam[:, 1, 2]
        + j12 * j12 * cov_cam[:, 2, 2]
    )
    covs = np.stack([np.where(valid, a, 1.0), np.where(valid, b, 0.0), np.where(valid, c, 1.0)], axis=1)

    opac = np.where(valid, gaussians.opacities(), 0.0)
    depths = np.where(valid, q[:, 2], np.inf)
    dt = gaussians.positions.dtype
    splats = Splats2D(
        means.astype(dt),
        covs.astype(dt),
        depths.astype(dt),
        opac.astype(dt),
        gaussians.colors.astype(dt, copy=True),
    )
    return splats, valid


def project_perspective_backward(
    gaussians: Gaussians,
    camera: PerspectiveCamera,
    valid: np.ndarray,
    grads: SplatGrads,
) -> GaussianGrads:
    """Exact adjoint of project_perspective, including the d cov2d / d position
    terms that flow through the Jacobian J(q). Culled rows get zero gradients."""
    n = len(gaussians)
    q = camera.world_to_camera(gaussians.positions)
    qz = np.where(valid, q[:, 2], 1.0)
    qx, qy = q[:, 0], q[:, 1]
    fx, fy = camera.fx, camera.fy
    R = camera.rotation

    cov3 = build_covariance(gaussians.quaternions, gaussians.log_scales)
    cov_cam = np.einsum("ij,njk,lk->nil", R, cov3, R)

    g = np.asarray(grads.d_covs, dtype=float) * np.asarray(valid, dtype=float)[:, None]
    G2 = np.empty((n, 2, 2))
    G2[:, 0, 0] = g[:, 0]
    G2[:, 0, 1] = G2[:, 1, 0] = 0.5 * g[:, 1]
    G2[:, 1, 1] = g[:, 2]

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / qz
    J[:, 0, 2] = -fx * qx / (qz * qz)
    J[:, 1, 1] = fy / qz
    J[:, 1, 2] = -fy * qy / (qz * qz)

    # cov2d = (J R) Sigma (J R)^T
    M = np.einsum("nab,bc->nac", J, R)
    d_sigma = np.einsum("nai,nab,nbj->nij", M, G2, M)
    d_quat, d_ls = covariance_backward(gaussians.quaternions, gaussians.log_scales, d_sigma)

    # dL/dJ = 2 G2 J Sigma_cam, then contract with dJ/dq
    dJ = 2.0 * np.einsum("nab,nbc,ncd->nad", G2, J, cov_cam)
    inv_z2 = 1.0 / (qz * qz)
    inv_z3 = inv_z2 / qz
    dq_cov = np.zeros((n, 3))
    dq_cov[:, 0] = dJ[:, 0, 2] * (-fx * inv_z2)
    dq_cov[:, 1] = dJ[:, 1, 2] * (-fy * inv_z2)
    dq_cov[:, 2] = (
        dJ[:, 0, 0] * (-fx * inv_z2)
        + dJ[:, 1, 1] * (-fy * inv_z2)
        + dJ[:, 0, 2] * (2 * fx * qx * inv_z3)
        + dJ[:, 1, 2] * (2 * fy * qy * inv_z3)
    )

    # mean path: d mean / d q is exactly J
    dm = np.asarray(grads.d_means, dtype=float) * np.asarray(valid, dtype=float)[:, None]
    dq_mean = np.einsum("nab,na->nb", J, dm)

    d_pos = (dq_cov + dq_mean) @ R

    alpha = gaussians.opacities()
    d_logit = np.asarray(grads.d_opacities, dtype=float) * alpha * (1.0 - alpha)
    vmask = np.asarray(valid, dtype=float)
    return GaussianGrads(
        d_pos,
        d_quat * vmask[:, None],
        d_ls * vmask[:, None],
        d_logit * vmask,
        np.asarray(grads.d_colors, dtype=float) * vmask[:, None],
    )
