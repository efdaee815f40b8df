"""Fitting the pose-conditioned predictor against multi-view renders.

One iteration: sample a (frame, camera) pair, predict per-pixel attribute
maps from the frame's clipped PCA coefficients and mean view direction, skin
the resulting Gaussians into world space, splat them through the camera,
score L1 against the ground-truth image plus an offset-magnitude penalty,
backpropagate through the whole chain analytically, and take one Adam step.

The optimizer applies the coefficient updates through fused rank-1 kernels
(the coefficient gradients are outer products with beta / the view
direction), which avoids materializing per-iteration gradient tensors the
size of the model. `adam_step` is the reference optimizer semantics; the
fused path matches it to float32 rounding.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .cameras import PerspectiveCamera
from .errors import ConfigurationError, ContractError
from .gaussians import Gaussians, matrix_to_quaternion, quaternion_multiply
from .kinematics import (
    JointTransforms,
    Pose,
    blend_transforms,
    forward_kinematics,
    polar_rotations_fast,
)
from .metrics import psnr
from .parammaps import (
    ATTR_CHANNELS,
    SL_COLOR,
    SL_OFFSET,
    CanonicalTemplate,
)
from .predictor import LinearGaussianPredictor, init_predictor
from .render import render_gaussians, render_gaussians_backward


@dataclass
class TrainingConfig:
    iterations: int = 5000
    learning_rate: float = 5e-4
    lr_decay: float = 0.05  # final-lr multiplier, reached exponentially by the last iteration
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_reg: float = 0.005
    lambda_perceptual: float = 0.01  # recorded for config parity; term not computed
    batch_size: int = 1
    use_pca: bool = True
    seed: int = 0
    log_every: int = 50
    early_stop_psnr: float | None = None
    early_stop_window: int = 100

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size != 1:
            raise ConfigurationError("iterations must be >= 1 and batch_size is fixed at 1")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ConfigurationError("learning rate and eps must be positive")
        if not (0 < self.lr_decay <= 1):
            raise ConfigurationError("lr_decay must lie in (0, 1]")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("adam betas must lie in [0, 1)")
        if self.lambda_reg < 0 or self.lambda_perceptual < 0:
            raise ConfigurationError("loss weights must be nonnegative")

    def lr_at(self, iteration: int) -> float:
        """Exponential interpolation from learning_rate to learning_rate * lr_decay."""
        if self.iterations <= 1:
            return self.learning_rate
        frac = iteration / (self.iterations - 1)
        return self.learning_rate * self.lr_decay**frac


@dataclass
class LossReport:
    total: float
    l1: float
    reg: float
    psnr: float


def compute_loss(
    image: np.ndarray, gt: np.ndarray, offsets: np.ndarray, lambda_reg: float
) -> LossReport:
    """L1 image term plus mean squared offset magnitude."""
    if image.shape != gt.shape:
        raise ContractError("image and ground truth shapes differ")
    diff = np.asarray(image, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    l1 = float(np.mean(np.abs(diff)))
    # reg holds the weighted contribution, so total == l1 + reg in every report
    reg = lambda_reg * float(np.mean(np.sum(np.asarray(offsets, dtype=np.float64) ** 2, axis=-1)))
    total = l1 + reg
    mse = float(np.mean(diff**2))
    p = float("inf") if mse == 0 else float(10.0 * np.log10(1.0 / mse))
    return LossReport(total=total, l1=l1, reg=reg, psnr=p)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    skipped: int = 0


def init_adam(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainingConfig,
              lr: float | None = None):
    """One Adam update, in place. eps sits outside the square root, so the
    first step moves each weight by -lr * g / (|g| + eps).

    Any non-finite gradient skips the whole step (state untouched) with a
    warning.
    """
    if set(params) != set(grads):
        raise ContractError("params and grads must share keys")
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            warnings.warn("non-finite gradient: skipping optimizer step", stacklevel=2)
            return params, state
    state.step += 1
    t = state.step
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 / (1.0 - b1**t)
    c2 = 1.0 / (1.0 - b2**t)
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m * c1) / (np.sqrt(v * c2) + config.adam_eps)
    return params, state


@njit(cache=True, parallel=True)
def _adam_flat_kernel(p, m, v, g, lr, b1, b2, eps, c1, c2):
    for i in prange(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi * c1) / (np.sqrt(vi * c2) + eps)


@njit(cache=True, parallel=True)
def _adam_rank1_kernel(p, m, v, d_rows, vec, lr, b1, b2, eps, c1, c2):
    # p, m, v: (P, C, N); gradient is the outer product d_rows[p, c] * vec[n]
    P, C, N = p.shape
    for i in prange(P):
        for c in range(C):
            g0 = d_rows[i, c]
            for n in range(N):
                gi = g0 * vec[n]
                mi = b1 * m[i, c, n] + (1.0 - b1) * gi
                vi = b2 * v[i, c, n] + (1.0 - b2) * gi * gi
                m[i, c, n] = mi
                v[i, c, n] = vi
                p[i, c, n] -= lr * (mi * c1) / (np.sqrt(vi * c2) + eps)


def _fused_adam_update(
    predictor: LinearGaussianPredictor,
    state: AdamState,
    d_attrs: np.ndarray,
    beta: np.ndarray,
    view_dir: np.ndarray,
    config: TrainingConfig,
    lr: float | None = None,
):
    """Rank-1 Adam step over all predictor parameters without materializing
    the coefficient gradients. Same update rule as adam_step, evaluated in
    float32 (the reference promotes intermediates to float64, so agreement
    is to rounding, not bitwise)."""
    if not np.all(np.isfinite(d_attrs)):
        state.skipped += 1
        warnings.warn("non-finite gradient: skipping optimizer step", stacklevel=2)
        return
    state.step += 1
    t = state.step
    b1, b2 = np.float32(config.adam_beta1), np.float32(config.adam_beta2)
    c1 = np.float32(1.0 / (1.0 - config.adam_beta1**t))
    c2 = np.float32(1.0 / (1.0 - config.adam_beta2**t))
    lr = np.float32(config.learning_rate if lr is None else lr)
    eps = np.float32(config.adam_eps)

    _adam_flat_kernel(
        predictor.base.reshape(-1),
        state.m["base"].reshape(-1),
        state.v["base"].reshape(-1),
        np.ascontiguousarray(d_attrs, dtype=np.float32).reshape(-1),
        lr, b1, b2, eps, c1, c2,
    )
    _adam_rank1_kernel(
        predictor.coeff_beta,
        state.m["coeff_beta"],
        state.v["coeff_beta"],
        np.ascontiguousarray(d_attrs, dtype=np.float32),
        np.ascontiguousarray(beta, dtype=np.float32),
        lr, b1, b2, eps, c1, c2,
    )
    _adam_rank1_kernel(
        predictor.coeff_view,
        state.m["coeff_view"],
        state.v["coeff_view"],
        np.ascontiguousarray(d_attrs[:, SL_COLOR], dtype=np.float32),
        np.ascontiguousarray(view_dir, dtype=np.float32),
        lr, b1, b2, eps, c1, c2,
    )


# ---------------------------------------------------------------------------
# Frame rendering chain


@dataclass
class PoseSkinning:
    """Per-pixel pose quantities for one frame: the blended affine, the
    composed (global * polar) rotation quaternion, and the global motion.
    Constant w.r.t. the predictor parameters."""

    A_lin: np.ndarray   # (P, 3, 3)
    A_t: np.ndarray     # (P, 3)
    q_tot: np.ndarray   # (P, 4)
    R_global: np.ndarray
    t_global: np.ndarray


def build_pose_skinning(ct: CanonicalTemplate, pose: Pose, tf: JointTransforms) -> PoseSkinning:
    A, t = blend_transforms(ct.anchor_weights, tf)
    R_polar = polar_rotations_fast(A)
    q_polar = matrix_to_quaternion(R_polar)
    g = pose.global_transform()
    q_g = g.as_quaternion()
    return PoseSkinning(
        A_lin=A,
        A_t=t,
        q_tot=quaternion_multiply(q_g[None, :], q_polar),
        R_global=g.rotation,
        t_global=g.translation,
    )


@dataclass
class FrameContext:
    """One training step's inputs: a frame's skinning plus one camera view."""

    camera: PerspectiveCamera
    skin: PoseSkinning
    beta: np.ndarray
    view_dir: np.ndarray
    gt: np.ndarray | None = None


def build_frame_context(
    ct: CanonicalTemplate,
    pose: Pose,
    tf: JointTransforms,
    camera: PerspectiveCamera,
    gt: np.ndarray | None,
    beta: np.ndarray,
    view_dir: np.ndarray,
) -> FrameContext:
    return FrameContext(
        camera=camera,
        skin=build_pose_skinning(ct, pose, tf),
        beta=np.asarray(beta, dtype=np.float32),
        view_dir=np.asarray(view_dir, dtype=np.float32),
        gt=None if gt is None else np.asarray(gt, dtype=np.float32),
    )


def pose_gaussians(ct: CanonicalTemplate, skin: PoseSkinning, attrs: np.ndarray) -> Gaussians:
    """Canonical per-pixel attributes -> world-space Gaussians for a frame."""
    pos_c = ct.anchor_positions + attrs[:, SL_OFFSET].astype(np.float64)
    pos_p = np.einsum("pab,pb->pa", skin.A_lin, pos_c) + skin.A_t
    pos_w = pos_p @ skin.R_global.T + skin.t_global
    quat_w = quaternion_multiply(skin.q_tot, attrs[:, 3:7].astype(np.float64))
    return Gaussians(
        positions=pos_w,
        quaternions=quat_w,
        log_scales=attrs[:, 7:10].astype(np.float64),
        opacity_logits=attrs[:, 10].astype(np.float64),
        colors=attrs[:, 11:14].astype(np.float64),
    )


def render_frame(
    ct: CanonicalTemplate, fctx: FrameContext, attrs: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Forward render for one frame; returns (image, intermediates for backward)."""
    gaussians = pose_gaussians(ct, fctx.skin, attrs)
    image, raux = render_gaussians(gaussians, fctx.camera)
    return image, {"gaussians": gaussians, "raux": raux}


def frame_loss_and_grads(
    ct: CanonicalTemplate,
    fctx: FrameContext,
    attrs: np.ndarray,
    lambda_reg: float,
) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """Loss and its gradient w.r.t. the attribute rows for one frame.

    Returns (report, image, d_attrs). d_attrs is the seed for the predictor's
    rank-1 parameter updates.
    """
    if fctx.gt is None:
        raise ContractError("frame context has no ground-truth image")
    image, inter = render_frame(ct, fctx, attrs)
    offsets = attrs[:, SL_OFFSET]
    report = compute_loss(image, fctx.gt, offsets, lambda_reg)

    npix = image.size
    d_image = (np.sign(image - fctx.gt.astype(image.dtype)) / npix).astype(image.dtype)

    gg, _ = render_gaussians_backward(inter["gaussians"], fctx.camera, inter["raux"], d_image)

    # chain world -> canonical: positions through (R_g A)^T, quaternions
    # through left-multiplication by conj(q_tot)
    skin = fctx.skin
    d_pos_p = gg.d_positions @ skin.R_global
    d_pos_c = np.einsum("pab,pa->pb", skin.A_lin, d_pos_p)
    conj = skin.q_tot * np.array([1.0, -1.0, -1.0, -1.0])
    d_quat_c = quaternion_multiply(conj, gg.d_quaternions)

    d_attrs = np.empty((ct.n_pixels, ATTR_CHANNELS), dtype=np.float32)
    d_attrs[:, 0:3] = d_pos_c
    d_attrs[:, 3:7] = d_quat_c
    d_attrs[:, 7:10] = gg.d_log_scales
    d_attrs[:, 10] = gg.d_opacity_logits
    d_attrs[:, 11:14] = gg.d_colors
    # offset penalty: d/do of lambda * mean ||o||^2
    d_attrs[:, 0:3] += (2.0 * lambda_reg / ct.n_pixels) * offsets
    return report, image, d_attrs


# ---------------------------------------------------------------------------
# Training data and loop


@dataclass
class TrainingData:
    """Everything train() consumes. Conditioning inputs (clipped PCA
    coefficients, mean view directions) are precomputed per frame/camera."""

    ct: CanonicalTemplate
    poses: list
    cameras: list
    images: np.ndarray        # (T, C, H, W, 3) uint8
    train_pairs: list         # (frame, camera) index pairs
    betas: np.ndarray         # (T, N) float32
    view_dirs: np.ndarray     # (T, C, 3) float32

    def __post_init__(self):
        T, C = len(self.poses), len(self.cameras)
        if self.images.shape[:2] != (T, C) or self.images.dtype != np.uint8:
            raise ContractError("images must be (T, C, H, W, 3) uint8")
        if self.betas.shape[0] != T or self.view_dirs.shape[:2] != (T, C):
            raise ContractError("betas/view_dirs do not match frame and camera counts")
        if not self.train_pairs:
            raise ContractError("no training pairs")

    def gt_image(self, t: int, c: int) -> np.ndarray:
        return self.images[t, c].astype(np.float32) / 255.0


def train(
    data: TrainingData,
    config: TrainingConfig,
    predictor: LinearGaussianPredictor | None = None,
    progress: bool = False,
) -> tuple[LinearGaussianPredictor, list[LossReport]]:
    """Fit the predictor; returns it with the per-iteration loss history."""
    if config.lambda_perceptual > 0:
        warnings.warn(
            "perceptual loss weight is recorded for config parity but the term "
            "is not computed by this trainer",
            stacklevel=2,
        )
    ct = data.ct
    if predictor is None:
        predictor = init_predictor(ct, int(data.betas.shape[1]))
    state = init_adam(predictor.parameters())
    rng = np.random.default_rng(config.seed)

    fk_cache = [forward_kinematics(ct.skeleton, p) for p in data.poses]
    pairs = list(data.train_pairs)
    history: list[LossReport] = []
    recent_psnr: list[float] = []
    t_start = time.time()

    for it in range(config.iterations):
        t, c = pairs[int(rng.integers(len(pairs)))]
        fctx = build_frame_context(
            ct, data.poses[t], fk_cache[t], data.cameras[c],
            data.gt_image(t, c), data.betas[t], data.view_dirs[t, c],
        )
        attrs = predictor.predict(fctx.beta, fctx.view_dir)
        report, _, d_attrs = frame_loss_and_grads(ct, fctx, attrs, config.lambda_reg)
        if not np.isfinite(report.total):
            raise RuntimeError(
                f"non-finite loss at iteration {it}: l1={report.l1} reg={report.reg}"
            )
        _fused_adam_update(predictor, state, d_attrs, fctx.beta, fctx.view_dir, config,
                           lr=config.lr_at(it))
        history.append(report)

        if config.early_stop_psnr is not None:
            recent_psnr.append(report.psnr)
            if len(recent_psnr) >= config.early_stop_window:
                window = recent_psnr[-config.early_stop_window:]
                if float(np.mean(window)) >= config.early_stop_psnr:
                    if progress:
                        print(f"[train] early stop at iter {it}: train psnr "
                              f"{np.mean(window):.2f}dB")
                    break
        if progress and (it % config.log_every == 0 or it == config.iterations - 1):
            el = time.time() - t_start
            print(
                f"[train] iter {it:5d} loss {report.total:.5f} l1 {report.l1:.5f} "
                f"psnr {report.psnr:.2f}dB ({el:.0f}s)"
            )
    return predictor, history
