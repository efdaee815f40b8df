"""End-to-end orchestration: load a dataset, fit, render, evaluate.

A dataset directory looks like

    template/{mesh.obj, weights.txt, skeleton.txt}
    cameras.txt  poses_train.txt  poses_ood.txt  meta.txt
    images/cam{c:02d}/frame{t:04d}.png

A fit run directory receives predictor.bin, pca.bin, loss.csv, a canonical
Gaussian checkpoint, map exports with PNG previews, and eval.txt.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as gio
from .errors import ConfigurationError
from .kinematics import Pose, forward_kinematics
from .metrics import psnr, ssim
from .parammaps import (
    CanonicalTemplate,
    SkinnedTemplate,
    build_canonical_template,
    extract_gaussians,
    posed_anchor_positions,
    view_directions,
)
from .posepca import PcaModel, clip_coefficients, fit_pca_matrix, project
from .predictor import LinearGaussianPredictor, init_predictor
from .training import (
    FrameContext,
    TrainingConfig,
    TrainingData,
    build_pose_skinning,
    render_frame,
    train,
)


@dataclass
class Dataset:
    root: Path
    meta: dict
    template: SkinnedTemplate
    poses: list
    poses_ood: list
    cameras: list
    holdout_camera: int

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def train_camera_indices(self) -> list[int]:
        return [c for c in range(len(self.cameras)) if c != self.holdout_camera]

    def image_path(self, t: int, c: int) -> Path:
        return self.root / "images" / f"cam{c:02d}" / f"frame{t:04d}.png"

    def load_images(self) -> np.ndarray:
        """(T, C, H, W, 3) uint8 stack of every ground-truth view."""
        T, C = self.n_frames, len(self.cameras)
        size = int(self.meta["image_size"])
        out = np.empty((T, C, size, size, 3), dtype=np.uint8)
        for t in range(T):
            for c in range(C):
                out[t, c] = gio.read_png(self.image_path(t, c))
        return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "meta.txt").exists():
        raise ConfigurationError(f"{root}: not a dataset (missing meta.txt)")
    meta = gio.read_config(root / "meta.txt")
    skeleton = gio.read_skeleton(root / "template" / "skeleton.txt")
    verts, faces = gio.read_mesh(root / "template" / "mesh.obj")
    weights = gio.read_vertex_weights(root / "template" / "weights.txt", skeleton.n_joints)
    template = SkinnedTemplate(verts, faces, weights, skeleton)
    poses = gio.read_pose_sequence(root / "poses_train.txt", skeleton.n_joints)
    ood_path = root / "poses_ood.txt"
    poses_ood = (
        gio.read_pose_sequence(ood_path, skeleton.n_joints) if ood_path.exists() else []
    )
    cameras = gio.read_cameras(root / "cameras.txt")
    return Dataset(
        root=root,
        meta=meta,
        template=template,
        poses=poses,
        poses_ood=poses_ood,
        cameras=cameras,
        holdout_camera=int(meta.get("holdout_camera", len(cameras) - 1)),
    )


@dataclass
class Conditioning:
    """Per-frame inputs to the predictor, plus the PCA model behind them."""

    pca: PcaModel
    betas: np.ndarray      # (T, N) float32, clipped unless use_pca is False
    view_dirs: np.ndarray  # (T, C, 3) float32 mean unit view direction


def prepare_conditioning(
    ct: CanonicalTemplate,
    poses: list,
    cameras: list,
    n_components: int,
    use_pca: bool = True,
    pca: PcaModel | None = None,
) -> Conditioning:
    """Posed anchor maps -> PCA -> per-frame coefficients and view means.

    With use_pca False the coefficients are the raw (unclipped) projections;
    the basis still serves as the pose feature extractor, the projection step
    back onto the training box is what gets ablated.
    """
    T, C = len(poses), len(cameras)
    fks = [forward_kinematics(ct.skeleton, p) for p in poses]
    X = np.empty((T, 3 * ct.n_pixels))
    vdirs = np.empty((T, C, 3), dtype=np.float32)
    for t, (pose, tf) in enumerate(zip(poses, fks)):
        X[t] = posed_anchor_positions(ct, tf).reshape(-1)
        for c, cam in enumerate(cameras):
            d = view_directions(ct, pose, tf, cam).mean(axis=0)
            n = np.linalg.norm(d)
            vdirs[t, c] = (d / n if n > 1e-12 else d).astype(np.float32)
    if pca is None:
        pca = fit_pca_matrix(X, ct, n_components)
    betas = project(pca, X)
    if use_pca:
        betas = clip_coefficients(pca, betas)
    return Conditioning(pca=pca, betas=betas.astype(np.float32), view_dirs=vdirs)


def conditioning_for_poses(
    ct: CanonicalTemplate, pca: PcaModel, poses: list, cameras: list, use_pca: bool = True
) -> Conditioning:
    """Coefficients/view means for new poses under an existing PCA model."""
    return prepare_conditioning(
        ct, poses, cameras, pca.n_components, use_pca=use_pca, pca=pca
    )


@dataclass
class FitResult:
    run_dir: Path
    predictor: LinearGaussianPredictor
    pca: PcaModel
    ct: CanonicalTemplate
    history: list
    eval_psnr: float
    eval_ssim: float


def fit(
    dataset_dir,
    run_dir,
    config: TrainingConfig | None = None,
    n_components: int | None = None,
    map_resolution: int | None = None,
    eval_stride: int = 1,
    progress: bool = False,
) -> FitResult:
    """Full fit: parameterize, condition, train, export artifacts, evaluate."""
    t0 = time.time()
    ds = load_dataset(dataset_dir)
    run = Path(run_dir)
    (run / "maps").mkdir(parents=True, exist_ok=True)
    config = config or TrainingConfig()
    n_components = int(n_components or ds.meta.get("n_components", 20))
    map_resolution = int(map_resolution or ds.meta.get("map_resolution", 512))

    if progress:
        print(f"[fit] template -> canonical maps at {map_resolution}")
    ct = build_canonical_template(ds.template, map_resolution)
    cond = prepare_conditioning(
        ct, ds.poses, ds.cameras, n_components, use_pca=config.use_pca
    )
    if progress:
        print(f"[fit] {ct.n_pixels} map pixels, {n_components} pose components")

    images = ds.load_images()
    train_pairs = [
        (t, c) for t in range(ds.n_frames) for c in ds.train_camera_indices
    ]
    data = TrainingData(
        ct=ct,
        poses=ds.poses,
        cameras=ds.cameras,
        images=images,
        train_pairs=train_pairs,
        betas=cond.betas,
        view_dirs=cond.view_dirs,
    )
    template_hash = gio.content_hash(ds.root / "template" / "mesh.obj")
    predictor = init_predictor(
        ct, n_components, template_hash=template_hash, pca_hash=""
    )
    predictor, history = train(data, config, predictor=predictor, progress=progress)

    # artifacts
    gio.write_pca(run / "pca.bin", cond.pca, n_frames=ds.n_frames, seed=config.seed)
    predictor.pca_hash = gio.content_hash(run / "pca.bin")
    gio.write_predictor(run / "predictor.bin", predictor, seed=config.seed)
    gio.write_loss_csv(run / "loss.csv", history, seed=config.seed)

    base_attrs = predictor.predict(
        np.zeros(predictor.n_components, np.float32), np.zeros(3, np.float32)
    )
    gio.write_gaussians(
        run / "gaussians_canonical.bin", extract_gaussians(ct, base_attrs), seed=config.seed
    )
    base_map = ct.scatter(ct.anchor_positions.astype(np.float32))
    offs_map = ct.scatter(base_attrs[:, 0:3])
    for name, m in (("base_position", base_map), ("offsets_rest", offs_map)):
        gio.write_map(run / "maps" / f"{name}_front.bin", m[0])
        gio.write_map(run / "maps" / f"{name}_back.bin", m[1])
        gio.write_map_preview(run / "maps" / f"{name}_front.png", m[0], ct.masks[0])
        gio.write_map_preview(run / "maps" / f"{name}_back.png", m[1], ct.masks[1])
    gio.write_config(
        run / "config.txt",
        {
            "iterations": config.iterations,
            "learning_rate": config.learning_rate,
            "lambda_reg": config.lambda_reg,
            "lambda_perceptual": config.lambda_perceptual,
            "n_components": n_components,
            "map_resolution": map_resolution,
            "use_pca": config.use_pca,
            "seed": config.seed,
        },
    )

    mean_psnr, mean_ssim, _ = evaluate(
        ds, ct, cond, predictor, camera=ds.holdout_camera,
        images=images, stride=eval_stride,
    )
    gio.write_config(
        run / "eval.txt",
        {
            "holdout_camera": ds.holdout_camera,
            "mean_psnr": mean_psnr,
            "mean_ssim": mean_ssim,
            "iterations_run": len(history),
            "wall_seconds": round(time.time() - t0, 1),
        },
    )
    if progress:
        print(f"[fit] holdout psnr {mean_psnr:.2f}dB ssim {mean_ssim:.4f} "
              f"({time.time() - t0:.0f}s total)")
    return FitResult(
        run_dir=run, predictor=predictor, pca=cond.pca, ct=ct,
        history=history, eval_psnr=mean_psnr, eval_ssim=mean_ssim,
    )


def render_predictor_frame(
    ct: CanonicalTemplate,
    predictor: LinearGaussianPredictor,
    pose: Pose,
    camera,
    beta: np.ndarray,
    view_dir: np.ndarray,
) -> np.ndarray:
    tf = forward_kinematics(ct.skeleton, pose)
    skin = build_pose_skinning(ct, pose, tf)
    fctx = FrameContext(camera=camera, skin=skin,
                        beta=np.asarray(beta, np.float32),
                        view_dir=np.asarray(view_dir, np.float32))
    attrs = predictor.predict(fctx.beta, fctx.view_dir)
    image, _ = render_frame(ct, fctx, attrs)
    return image


def evaluate(
    ds: Dataset,
    ct: CanonicalTemplate,
    cond: Conditioning,
    predictor: LinearGaussianPredictor,
    camera: int,
    images: np.ndarray | None = None,
    stride: int = 1,
) -> tuple[float, float, list]:
    """Mean PSNR/SSIM of predictor renders against one camera's ground truth."""
    cam = ds.cameras[camera]
    rows = []
    for t in range(0, ds.n_frames, stride):
        img = render_predictor_frame(
            ct, predictor, ds.poses[t], cam, cond.betas[t], cond.view_dirs[t, camera]
        )
        if images is not None:
            gt = images[t, camera].astype(np.float64) / 255.0
        else:
            gt = gio.read_png(ds.image_path(t, camera)).astype(np.float64) / 255.0
        rows.append((t, psnr(img, gt), ssim(img, gt)))
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    return mean_psnr, mean_ssim, rows
