"""Small end-to-end demo: synthesize a dataset, fit a predictor, render.

Sized to finish in a few minutes on one core. Artifacts land under --out
(dataset/, run/, renders/). Pass --frames/--image-size/--resolution to grow
it toward the full-scale configuration.

    python3 scripts/fit_demo.py --out /tmp/demo
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gsavatar import pipeline
from gsavatar.io import write_png
from gsavatar.synthetic import SyntheticSpec, generate_dataset
from gsavatar.training import TrainingConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--frames", type=int, default=24)
    ap.add_argument("--cameras", type=int, default=3)
    ap.add_argument("--image-size", type=int, default=96)
    ap.add_argument("--resolution", type=int, default=128)
    ap.add_argument("--components", type=int, default=6)
    ap.add_argument("--iterations", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    ds_dir = out / "dataset"
    if not (ds_dir / "meta.txt").exists():
        print("generating dataset ...")
        generate_dataset(ds_dir, SyntheticSpec(
            seed=args.seed,
            n_frames=args.frames,
            n_cameras=args.cameras,
            image_size=args.image_size,
            map_resolution=args.resolution,
            n_components=args.components,
        ), progress=True)

    print("fitting ...")
    config = TrainingConfig(iterations=args.iterations, seed=args.seed, log_every=50)
    result = pipeline.fit(ds_dir, out / "run", config=config, progress=True)
    print(f"holdout psnr {result.eval_psnr:.2f}dB ssim {result.eval_ssim:.4f}")

    ds = pipeline.load_dataset(ds_dir)
    cond = pipeline.conditioning_for_poses(result.ct, result.pca, ds.poses_ood, ds.cameras)
    renders = out / "renders"
    renders.mkdir(exist_ok=True)
    cam = ds.cameras[0]
    for t in range(min(4, len(ds.poses_ood))):
        img = pipeline.render_predictor_frame(
            result.ct, result.predictor, ds.poses_ood[t], cam,
            cond.betas[t], cond.view_dirs[t, 0],
        )
        write_png(renders / f"ood{t:02d}.png", img)
    print(f"novel-pose renders in {renders}")


if __name__ == "__main__":
    main()
