"""Low-rank model of posed position maps.

Training poses produce per-pixel posed-position maps; stacking the valid
pixels of each frame gives one observation vector per frame. A thin SVD of
the centered stack yields an orthonormal basis. At inference, an arbitrary
posed map is projected onto the basis and its coefficients are clipped to
plus/minus two standard deviations before reconstruction, which pulls
out-of-distribution poses back toward the training manifold.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .parammaps import CanonicalTemplate


@dataclass
class PcaModel:
    """mean (D,), components (D, N) orthonormal columns, sigmas (N,) non-increasing.

    D = 3 * (number of valid pixels); valid_indices pins the pixel set the
    model was fit on so later projections can verify they match.
    """

    mean: np.ndarray
    components: np.ndarray
    sigmas: np.ndarray
    valid_indices: np.ndarray
    resolution: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.components = np.asarray(self.components, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.valid_indices = np.asarray(self.valid_indices, dtype=np.int64)
        D = self.mean.shape[0]
        if self.components.shape[0] != D or self.sigmas.shape[0] != self.components.shape[1]:
            raise ContractError("inconsistent PCA model shapes")
        if D != 3 * self.valid_indices.shape[0]:
            raise ContractError("mean length must be 3 * n_valid_pixels")

    @property
    def n_components(self) -> int:
        return self.components.shape[1]


def _frames_to_matrix(maps: np.ndarray, ct: CanonicalTemplate) -> np.ndarray:
    """(T, 2, H, W, 3) position maps -> (T, D) observation matrix."""
    maps = np.asarray(maps)
    if maps.ndim != 5 or maps.shape[1] != 2 or maps.shape[4] != 3:
        raise ContractError("expected stacked maps of shape (T, 2, H, W, 3)")
    T = maps.shape[0]
    flat = maps.reshape(T, -1, 3)
    return flat[:, ct.valid_indices, :].reshape(T, -1)


def fit_pca(maps: np.ndarray, ct: CanonicalTemplate, n_components: int) -> PcaModel:
    """Thin SVD of the centered frame stack of (T, 2, H, W, 3) position maps."""
    return fit_pca_matrix(_frames_to_matrix(maps, ct), ct, n_components)


def fit_pca_matrix(X: np.ndarray, ct: CanonicalTemplate, n_components: int) -> PcaModel:
    """Fit from pre-gathered observations X of shape (T, 3 * n_valid_pixels).

    sigmas are singular values scaled by 1/sqrt(T-1), i.e. standard
    deviations of the training coefficients. If n_components exceeds the
    dimension the data can support (min(T-1, D)), it is shrunk with a
    warning. Component signs are fixed so each column's largest-magnitude
    entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 * ct.n_pixels:
        raise ContractError("X must be (T, 3 * n_valid_pixels)")
    T, D = X.shape
    if n_components < 1:
        raise ContractError("n_components must be >= 1")
    cap = min(T - 1, D)
    if n_components > cap:
        warnings.warn(
            f"requested {n_components} components but the {T}-frame stack supports {cap}; shrinking",
            stacklevel=2,
        )
        n_components = cap
    mean = X.mean(axis=0)
    Xc = X - mean
    # thin SVD: Vt rows are principal directions
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    comps = Vt[:n_components].T.copy()
    sig = s[:n_components] / np.sqrt(T - 1)
    # deterministic sign convention
    peak = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[peak, np.arange(comps.shape[1])])
    signs[signs == 0] = 1.0
    comps *= signs
    return PcaModel(
        mean=mean,
        components=comps,
        sigmas=sig,
        valid_indices=ct.valid_indices.copy(),
        resolution=ct.resolution,
    )


def project(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Coefficients beta = U^T (x - mean); x is (D,) or (T, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise ContractError("vector length does not match the PCA model")
    return (x - model.mean) @ model.components


def reconstruct(model: PcaModel, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-1] != model.n_components:
        raise ContractError("coefficient length does not match the PCA model")
    return model.mean + beta @ model.components.T


def clip_coefficients(model: PcaModel, beta: np.ndarray) -> np.ndarray:
    """Clamp each coefficient to [-2 sigma_i, 2 sigma_i]."""
    beta = np.asarray(beta, dtype=np.float64)
    lim = 2.0 * model.sigmas
    return np.clip(beta, -lim, lim)


def project_position_maps(
    model: PcaModel, maps: np.ndarray, ct: CanonicalTemplate
) -> tuple[np.ndarray, np.ndarray]:
    """Project one frame's (2, H, W, 3) posed maps through the model.

    Returns (clipped beta, reconstructed maps). The maps' valid-pixel set
    must be the one the model was fit on.
    """
    if not np.array_equal(model.valid_indices, ct.valid_indices):
        raise ContractError("canonical template mask differs from the PCA fit mask")
    x = _frames_to_matrix(np.asarray(maps)[None], ct)[0]
    beta = clip_coefficients(model, project(model, x))
    rec = reconstruct(model, beta).reshape(-1, 3)
    return beta, ct.scatter(rec)
