"""Compare novel-pose conditioning with and without coefficient clipping.

Loads a fitted run, conditions the out-of-distribution pose set both ways,
and reports how far the raw projections leave the +-2 sigma training box
versus the clipped ones, plus the resulting predicted offset magnitudes.
Optionally renders a side pair of images for one pose.

    python3 scripts/pose_projection_ablation.py --dataset /tmp/demo/dataset \
        --run /tmp/demo/run --render-frame 0 --out /tmp/demo/ablation
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gsavatar import io as gio
from gsavatar import pipeline
from gsavatar.parammaps import build_canonical_template


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--run", required=True)
    ap.add_argument("--camera", type=int, default=0)
    ap.add_argument("--render-frame", type=int, default=None)
    ap.add_argument("--out", default=None, help="directory for rendered pairs")
    args = ap.parse_args()

    ds = pipeline.load_dataset(args.dataset)
    run = Path(args.run)
    predictor, _ = gio.read_predictor(run / "predictor.bin")
    pca, _, _ = gio.read_pca(run / "pca.bin")
    cfg = gio.read_config(run / "config.txt")
    ct = build_canonical_template(ds.template, int(cfg["map_resolution"]))

    clipped = pipeline.conditioning_for_poses(ct, pca, ds.poses_ood, ds.cameras)
    raw = pipeline.conditioning_for_poses(ct, pca, ds.poses_ood, ds.cameras, use_pca=False)

    box = 2.0 * pca.sigmas
    print(f"{len(ds.poses_ood)} out-of-distribution poses, {pca.n_components} components")
    print(f"clipped |beta|/box max: {float((np.abs(clipped.betas) / box).max()):.3f}")
    print(f"raw     |beta|/box max: {float((np.abs(raw.betas) / box).max()):.3f}")
    over = (np.abs(raw.betas) > box).mean()
    print(f"raw coefficients outside the box: {over:.1%}")

    view = clipped.view_dirs[0, args.camera]
    for label, cond in (("clipped", clipped), ("raw", raw)):
        mags = []
        for t in range(len(ds.poses_ood)):
            off = predictor.predict(cond.betas[t], view)[:, 0:3]
            mags.append(float(np.linalg.norm(off, axis=1).max()))
        print(f"{label:8s} max offset per pose: min {min(mags):.4f}  max {max(mags):.4f} m")

    if args.render_frame is not None:
        out = Path(args.out or run / "ablation")
        out.mkdir(parents=True, exist_ok=True)
        t = args.render_frame
        cam = ds.cameras[args.camera]
        for label, cond in (("clipped", clipped), ("raw", raw)):
            img = pipeline.render_predictor_frame(
                ct, predictor, ds.poses_ood[t], cam, cond.betas[t],
                cond.view_dirs[t, args.camera],
            )
            gio.write_png(out / f"pose{t:02d}_{label}.png", img)
        print(f"renders in {out}")


if __name__ == "__main__":
    main()
