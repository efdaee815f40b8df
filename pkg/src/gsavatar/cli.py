"""Command line entry points.

    gsavatar gen-synthetic --out data/demo --seed 0
    gsavatar fit --dataset data/demo --out runs/demo
    gsavatar render --dataset data/demo --run runs/demo --poses ood --camera 0
    gsavatar eval --dataset data/demo --run runs/demo
    gsavatar inspect-pca --run runs/demo

Relative --out paths resolve under $GSAVATAR_OUTPUT_ROOT when that is set.
Failures print the stage they happened in and exit nonzero.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import output_root, set_threads
from . import io as gio
from .errors import ConfigurationError
from .training import TrainingConfig


def _resolve_out(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(output_root()) / p


def _stage(name: str):
    """Context manager labelling which pipeline stage a failure belongs to."""

    class _Stage:
        def __enter__(self):
            return self

        def __exit__(self, etype, err, tb):
            if err is not None and not isinstance(err, SystemExit):
                print(f"error [{name}]: {err}", file=sys.stderr)
                raise SystemExit(1)
            return False

    return _Stage()


def cmd_gen_synthetic(args) -> int:
    from .synthetic import SyntheticSpec, generate_dataset

    out = _resolve_out(args.out)
    with _stage("gen-synthetic"):
        spec = SyntheticSpec(
            seed=args.seed,
            n_frames=args.frames,
            n_cameras=args.cameras,
            image_size=args.image_size,
            map_resolution=args.resolution,
            n_components=args.components,
        )
        generate_dataset(out, spec, progress=not args.quiet)
    print(f"dataset written to {out}")
    return 0


def cmd_fit(args) -> int:
    from . import pipeline

    out = _resolve_out(args.out)
    with _stage("fit"):
        config = TrainingConfig(
            iterations=args.iterations,
            learning_rate=args.learning_rate,
            lambda_reg=args.lambda_reg,
            use_pca=not args.no_pca,
            seed=args.seed,
            early_stop_psnr=args.early_stop_psnr,
        )
        result = pipeline.fit(
            args.dataset,
            out,
            config=config,
            n_components=args.components,
            map_resolution=args.resolution,
            eval_stride=args.eval_stride,
            progress=not args.quiet,
        )
    print(f"run written to {out}")
    print(f"holdout psnr {result.eval_psnr:.2f}dB ssim {result.eval_ssim:.4f}")
    return 0


def _load_run(args):
    """Shared render/eval setup: dataset + run artifacts -> ready-to-render state."""
    from . import pipeline
    from .parammaps import build_canonical_template

    with _stage("load-dataset"):
        ds = pipeline.load_dataset(args.dataset)
    run = Path(args.run)
    with _stage("load-run"):
        predictor, _ = gio.read_predictor(run / "predictor.bin")
        pca, _, _ = gio.read_pca(run / "pca.bin")
        run_cfg = gio.read_config(run / "config.txt")
    with _stage("parameterize"):
        ct = build_canonical_template(ds.template, int(run_cfg["map_resolution"]))
        if ct.n_pixels != predictor.n_pixels:
            raise ConfigurationError(
                f"run predicts {predictor.n_pixels} Gaussians but template "
                f"maps have {ct.n_pixels} pixels"
            )
    return ds, run_cfg, predictor, pca, ct


def cmd_render(args) -> int:
    from . import pipeline

    ds, run_cfg, predictor, pca, ct = _load_run(args)
    if args.poses == "train":
        poses = ds.poses
    elif args.poses == "ood":
        poses = ds.poses_ood
    else:
        with _stage("load-poses"):
            poses = gio.read_pose_sequence(args.poses, ds.template.skeleton.n_joints)
    if not poses:
        print("error [load-poses]: empty pose sequence", file=sys.stderr)
        return 1
    frames = range(len(poses)) if args.frames is None else _parse_range(args.frames, len(poses))
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _stage("condition"):
        cond = pipeline.conditioning_for_poses(
            ct, pca, poses, ds.cameras, use_pca=bool(run_cfg.get("use_pca", True))
        )
    cam = ds.cameras[args.camera]
    with _stage("render"):
        for t in frames:
            img = pipeline.render_predictor_frame(
                ct, predictor, poses[t], cam, cond.betas[t], cond.view_dirs[t, args.camera]
            )
            gio.write_png(out / f"frame{t:04d}.png", img)
    print(f"{len(list(frames))} frames -> {out}")
    return 0


def cmd_eval(args) -> int:
    from . import pipeline

    ds, run_cfg, predictor, pca, ct = _load_run(args)
    camera = ds.holdout_camera if args.camera is None else args.camera
    with _stage("condition"):
        cond = pipeline.conditioning_for_poses(
            ct, pca, ds.poses, ds.cameras, use_pca=bool(run_cfg.get("use_pca", True))
        )
    with _stage("eval"):
        mean_psnr, mean_ssim, rows = pipeline.evaluate(
            ds, ct, cond, predictor, camera=camera, stride=args.stride
        )
    for t, p, s in rows:
        print(f"frame {t:4d}  psnr {p:6.2f}  ssim {s:.4f}")
    print(f"mean over {len(rows)} frames: psnr {mean_psnr:.2f}dB ssim {mean_ssim:.4f}")
    return 0


def cmd_inspect_pca(args) -> int:
    path = Path(args.pca) if args.pca else Path(args.run) / "pca.bin"
    with _stage("load-pca"):
        pca, n_frames, _ = gio.read_pca(path)
    comps = pca.components
    gram = comps.T @ comps
    ortho_err = float(np.abs(gram - np.eye(pca.n_components)).max())
    print(f"components: {pca.n_components} (fit on {n_frames} frames)")
    print(f"map resolution: {pca.resolution}, valid pixels: {len(pca.valid_indices)}")
    print(f"orthonormality error: {ortho_err:.2e}")
    total = float((pca.sigmas ** 2).sum())
    running = 0.0
    for i, s in enumerate(pca.sigmas):
        running += float(s * s)
        share = running / total if total > 0 else 0.0
        print(f"  sigma[{i:2d}] = {s:10.6f}  cumulative variance {share:6.1%}")
    return 0


def _parse_range(text: str, n: int) -> range:
    parts = [int(p) if p else None for p in text.split(":")]
    if len(parts) == 1:
        return range(parts[0], parts[0] + 1)
    start = parts[0] or 0
    stop = parts[1] if len(parts) > 1 and parts[1] is not None else n
    step = parts[2] if len(parts) > 2 and parts[2] is not None else 1
    return range(start, min(stop, n), step)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsavatar")
    parser.add_argument("--threads", type=int, default=None,
                        help="rasterizer thread cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--components", type=int, default=20)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("fit", help="fit a pose-conditioned predictor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--learning-rate", type=float, default=5e-4)
    p.add_argument("--lambda-reg", type=float, default=0.005)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None,
                   help="override the dataset's map resolution")
    p.add_argument("--no-pca", action="store_true",
                   help="skip coefficient clipping (ablation)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--early-stop-psnr", type=float, default=None)
    p.add_argument("--eval-stride", type=int, default=1)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render poses through a fitted run")
    p.add_argument("--dataset", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--poses", default="train",
                   help="'train', 'ood', or a pose sequence file")
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--frames", default=None, help="python-style slice, e.g. 0:200:10")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of a run against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--camera", type=int, default=None,
                   help="camera index (default: the held-out one)")
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-pca", help="summarize a fitted pose basis")
    p.add_argument("--run", default=None)
    p.add_argument("--pca", default=None, help="direct path to pca.bin")
    p.set_defaults(func=cmd_inspect_pca)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        set_threads(args.threads)
    if args.command == "inspect-pca" and not (args.run or args.pca):
        print("error [load-pca]: pass --run or --pca", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except SystemExit as e:  # stage failures carry their exit code
        return int(e.code or 0)


if __name__ == "__main__":
    raise SystemExit(main())
