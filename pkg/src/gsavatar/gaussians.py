"""3D Gaussian primitives: quaternion math, covariance assembly, rigid motion.

Conventions used everywhere downstream:
  * quaternions are (w, x, y, z), stored unnormalized, normalized at use sites
  * per-axis scales live in log space, sigma_k = exp(log_scale_k)
  * opacity is stored as a logit, sigmoid applied at use sites
  * covariance is R(q_hat) diag(exp(2 ls)) R(q_hat)^T, always symmetric PD
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateCovarianceError

QUAT_EPS = 1e-12


def sigmoid(x):
    # numerically stable on both tails
    out = np.empty_like(x, dtype=np.asarray(x).dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def normalize_quaternions(quats: np.ndarray) -> np.ndarray:
    """Return unit quaternions; raises on (near-)zero norm."""
    quats = np.asarray(quats)
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    if np.any(norms < QUAT_EPS):
        raise ContractError("zero-norm quaternion cannot be normalized")
    return quats / norms


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, wxyz layout, broadcasting over leading dims."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quaternion_left_matrix(q: np.ndarray) -> np.ndarray:
    """Matrix L(q) with L(q) @ p == quaternion_multiply(q, p). Shape (..., 4, 4)."""
    w, x, y, z = np.moveaxis(np.asarray(q), -1, 0)
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quaternion_to_matrix(quats: np.ndarray) -> np.ndarray:
    """Unit-normalize then convert to rotation matrices, shape (..., 3, 3)."""
    q = normalize_quaternions(quats)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        np.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], axis=-1),
        np.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], axis=-1),
        np.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to unit quaternions (..., 4) wxyz, w >= 0."""
    R = np.asarray(R)
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    n = Rf.shape[0]
    q = np.empty((n, 4), dtype=Rf.dtype)
    # branch on the largest of (trace, R00, R11, R22) for stability
    tr = Rf[:, 0, 0] + Rf[:, 1, 1] + Rf[:, 2, 2]
    cand = np.stack([tr, Rf[:, 0, 0], Rf[:, 1, 1], Rf[:, 2, 2]], axis=1)
    case = np.argmax(cand, axis=1)

    m = case == 0
    if np.any(m):
        s = np.sqrt(tr[m] + 1.0) * 2.0
        q[m, 0] = 0.25 * s
        q[m, 1] = (Rf[m, 2, 1] - Rf[m, 1, 2]) / s
        q[m, 2] = (Rf[m, 0, 2] - Rf[m, 2, 0]) / s
        q[m, 3] = (Rf[m, 1, 0] - Rf[m, 0, 1]) / s
    for axis, idx in ((0, 1), (1, 2), (2, 3)):
        m = case == idx
        if not np.any(m):
            continue
        i, j, k = axis, (axis + 1) % 3, (axis + 2) % 3
        s = np.sqrt(1.0 + Rf[m, i, i] - Rf[m, j, j] - Rf[m, k, k]) * 2.0
        q[m, 0] = (Rf[m, k, j] - Rf[m, j, k]) / s
        q[m, 1 + i] = 0.25 * s
        q[m, 1 + j] = (Rf[m, j, i] + Rf[m, i, j]) / s
        q[m, 1 + k] = (Rf[m, k, i] + Rf[m, i, k]) / s

    sign = np.where(q[:, 0] < 0, -1.0, 1.0)
    q = q * sign[:, None]
    return normalize_quaternions(q).reshape(*batch, 4)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ContractError("rigid transform needs a 3x3 rotation and 3-vector")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ContractError("rotation block is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ContractError("rotation block has negative determinant")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(x) == self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def as_quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)


@dataclass
class Gaussians:
    """A batch of anisotropic 3D Gaussians, structure-of-arrays layout.

    Attribute records are interchangeable with the flat 14-float layout used
    in checkpoints: position(3), quaternion wxyz(4), log_scale(3),
    opacity_logit(1), color rgb(3).
    """

    positions: np.ndarray
    quaternions: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = len(np.asarray(self.positions))
        shapes = {
            "positions": (n, 3),
            "quaternions": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "colors": (n, 3),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != want:
                raise ContractError(f"{name} must have shape {want}, got {arr.shape}")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.quaternions, self.log_scales)

    def as_records(self) -> np.ndarray:
        """Flat (N, 14) attribute records."""
        return np.concatenate(
            [
                self.positions,
                self.quaternions,
                self.log_scales,
                self.opacity_logits[:, None],
                self.colors,
            ],
            axis=1,
        )

    @staticmethod
    def from_records(records: np.ndarray) -> "Gaussians":
        records = np.asarray(records)
        if records.ndim != 2 or records.shape[1] != 14:
            raise ContractError("gaussian records must be (N, 14)")
        return Gaussians(
            positions=records[:, 0:3].copy(),
            quaternions=records[:, 3:7].copy(),
            log_scales=records[:, 7:10].copy(),
            opacity_logits=records[:, 10].copy(),
            colors=records[:, 11:14].copy(),
        )


def build_covariance(quaternions: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2 ls)) R^T for each Gaussian, shape (..., 3, 3)."""
    R = quaternion_to_matrix(quaternions)
    var = np.exp(2.0 * np.asarray(log_scales))
    return np.einsum("...ik,...k,...jk->...ij", R, var, R)


def covariance_backward(
    quaternions: np.ndarray, log_scales: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull dL/dSigma back to raw quaternion and log-scale gradients.

    d_cov may be an unsymmetrized adjoint; only its symmetric part matters
    because Sigma is symmetric in its parameters.
    """
    q = np.asarray(quaternions, dtype=float)
    ls = np.asarray(log_scales, dtype=float)
    d_cov = np.asarray(d_cov, dtype=float)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms < QUAT_EPS):
        raise ContractError("zero-norm quaternion in covariance backward")
    qh = q / norms
    R = quaternion_to_matrix(qh)
    var = np.exp(2.0 * ls)

    G = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
    # dL/dR = 2 G R D
    dR = 2.0 * np.einsum("...ij,...jk,...k->...ik", G, R, var)
    # dL/dvar_k = (R^T G R)_kk, then var_k = exp(2 ls_k)
    RtGR_diag = np.einsum("...ji,...jk,...ki->...i", R, G, R)
    d_ls = 2.0 * var * RtGR_diag

    d_qh = _rotation_quaternion_backward(qh, dR)
    # normalization backward: project out the radial component, divide by norm
    d_q = (d_qh - np.sum(d_qh * qh, axis=-1, keepdims=True) * qh) / norms
    return d_q, d_ls


def _rotation_quaternion_backward(q_hat: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """<dL/dR, dR/dq_hat> for unit quaternions; returns (..., 4)."""
    w, x, y, z = np.moveaxis(q_hat, -1, 0)
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dRdw = 2.0 * mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dRdx = 2.0 * mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRdy = 2.0 * mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dRdz = 2.0 * mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    parts = [np.sum(dR * d, axis=(-2, -1)) for d in (dRdw, dRdx, dRdy, dRdz)]
    return np.stack(parts, axis=-1)


def eval_pdf(gaussians: Gaussians, points: np.ndarray) -> np.ndarray:
    """Unnormalized density exp(-0.5 d^T Sigma^-1 d) of each Gaussian.

    points: (3,) evaluated for every Gaussian, or (N, 3) paired per Gaussian.
    Peak value is exactly 1 at the mean; no normalization constant.
    """
    points = np.asarray(points, dtype=float)
    d = points - gaussians.positions
    cov = gaussians.covariances()
    det = np.linalg.det(cov)
    if np.any(~np.isfinite(det)) or np.any(det <= 0):
        raise DegenerateCovarianceError("covariance is singular or non-finite")
    try:
        sol = np.linalg.solve(cov, d[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("covariance is singular") from exc
    md2 = np.sum(d * sol, axis=-1)
    return np.exp(-0.5 * md2)


def transform_gaussians(gaussians: Gaussians, transform: RigidTransform) -> Gaussians:
    """Rigidly move a batch of Gaussians; covariances rotate, scales unchanged."""
    q_rot = transform.as_quaternion()
    return Gaussians(
        positions=transform.apply(gaussians.positions),
        quaternions=quaternion_multiply(q_rot[None, :], gaussians.quaternions),
        log_scales=gaussians.log_scales.copy(),
        opacity_logits=gaussians.opacity_logits.copy(),
        colors=gaussians.colors.copy(),
    )
