"""Pose-conditioned linear predictor of per-pixel Gaussian attributes.

Every valid map pixel owns a 14-channel attribute row (offset, quaternion,
log scale, opacity logit, color). The row is an affine function of the
frame's clipped PCA coefficients; the three color channels additionally get
a linear term in the mean view direction, which lets the fit absorb simple
view-dependent shading.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .parammaps import ATTR_CHANNELS, SL_COLOR, SL_LOG_SCALE, SL_OPACITY, SL_QUAT, CanonicalTemplate


@dataclass
class LinearGaussianPredictor:
    """attrs = base + coeff_beta @ beta, colors += coeff_view @ v_bar."""

    base: np.ndarray        # (P, 14)
    coeff_beta: np.ndarray  # (P, 14, N)
    coeff_view: np.ndarray  # (P, 3, 3)
    template_hash: str = ""
    pca_hash: str = ""

    def __post_init__(self):
        self.base = np.ascontiguousarray(self.base, dtype=np.float32)
        self.coeff_beta = np.ascontiguousarray(self.coeff_beta, dtype=np.float32)
        self.coeff_view = np.ascontiguousarray(self.coeff_view, dtype=np.float32)
        P = self.base.shape[0]
        if self.base.shape != (P, ATTR_CHANNELS):
            raise ContractError(f"base must be (P, {ATTR_CHANNELS})")
        if self.coeff_beta.shape[:2] != (P, ATTR_CHANNELS) or self.coeff_beta.ndim != 3:
            raise ContractError("coeff_beta must be (P, 14, N)")
        if self.coeff_view.shape != (P, 3, 3):
            raise ContractError("coeff_view must be (P, 3, 3)")

    @property
    def n_pixels(self) -> int:
        return self.base.shape[0]

    @property
    def n_components(self) -> int:
        return self.coeff_beta.shape[2]

    def predict(self, beta: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
        """Attribute rows (P, 14) for one frame.

        beta: (N,) clipped PCA coefficients. view_dir: (3,) mean unit view
        direction in the canonical frame.
        """
        beta = np.asarray(beta, dtype=np.float32)
        view_dir = np.asarray(view_dir, dtype=np.float32)
        if beta.shape != (self.n_components,):
            raise ContractError("beta length does not match the predictor")
        if view_dir.shape != (3,):
            raise ContractError("view_dir must be a 3-vector")
        attrs = self.base + self.coeff_beta @ beta
        attrs[:, SL_COLOR] += self.coeff_view @ view_dir
        return attrs

    def parameters(self) -> dict[str, np.ndarray]:
        return {"base": self.base, "coeff_beta": self.coeff_beta, "coeff_view": self.coeff_view}


@dataclass
class PredictorGrads:
    d_base: np.ndarray
    d_coeff_beta: np.ndarray
    d_coeff_view: np.ndarray


def predict_backward(
    predictor: LinearGaussianPredictor,
    beta: np.ndarray,
    view_dir: np.ndarray,
    d_attrs: np.ndarray,
) -> PredictorGrads:
    """Adjoint of predict; the coefficient gradients are rank-1 outer products."""
    d_attrs = np.asarray(d_attrs, dtype=np.float32)
    if d_attrs.shape != predictor.base.shape:
        raise ContractError("d_attrs shape mismatch")
    beta = np.asarray(beta, dtype=np.float32)
    view_dir = np.asarray(view_dir, dtype=np.float32)
    return PredictorGrads(
        d_base=d_attrs.copy(),
        d_coeff_beta=d_attrs[:, :, None] * beta[None, None, :],
        d_coeff_view=d_attrs[:, SL_COLOR, None] * view_dir[None, None, :],
    )


def init_predictor(
    ct: CanonicalTemplate,
    n_components: int,
    sigma_scale: float = 0.7,
    opacity_logit: float = 2.0,
    color: float = 0.5,
    template_hash: str = "",
    pca_hash: str = "",
) -> LinearGaussianPredictor:
    """Flat start: identity rotations, per-pixel-sized isotropic scales,
    mid-gray color, zero offsets and zero pose/view coefficients."""
    P = ct.n_pixels
    base = np.zeros((P, ATTR_CHANNELS), dtype=np.float32)
    base[:, SL_QUAT.start] = 1.0
    px_world = ct.extent / ct.resolution
    base[:, SL_LOG_SCALE] = np.log(sigma_scale * px_world)
    base[:, SL_OPACITY.start] = opacity_logit
    base[:, SL_COLOR] = color
    return LinearGaussianPredictor(
        base=base,
        coeff_beta=np.zeros((P, ATTR_CHANNELS, n_components), dtype=np.float32),
        coeff_view=np.zeros((P, 3, 3), dtype=np.float32),
        template_hash=template_hash,
        pca_hash=pca_hash,
    )
