"""Audit analytic gradients of the 3D-to-image chain against finite differences.

Renders a random cloud of Gaussians through projection and tiled compositing,
scores a random linear image loss, and compares every analytic partial with
a central difference. Prints the worst relative error per attribute field.

    python3 scripts/check_gradients.py --splats 30 --step 1e-4
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gsavatar.cameras import PerspectiveCamera
from gsavatar.gaussians import Gaussians
from gsavatar.render import render_gaussians, render_gaussians_backward


def build_scene(seed, n, size):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-0.25, 0.25, size=(n, 3))
    pos[:, 2] = np.linspace(0.9, 1.6, n) + rng.uniform(-2e-3, 2e-3, n)
    g = Gaussians(
        positions=pos,
        quaternions=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(np.log(0.02), np.log(0.05), size=(n, 3)),
        opacity_logits=rng.uniform(-2.0, 1.0, n),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
    )
    cam = PerspectiveCamera(
        rotation=np.eye(3), translation=np.zeros(3),
        fx=1.7 * size, fy=1.7 * size, cx=size / 2, cy=size / 2,
        width=size, height=size,
    )
    return g, cam, rng.normal(size=(size, size, 3))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splats", type=int, default=30)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--step", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    g, cam, w_img = build_scene(args.seed, args.splats, args.size)
    _, raux = render_gaussians(g, cam)
    gg, _ = render_gaussians_backward(g, cam, raux, w_img)

    def loss():
        img, _ = render_gaussians(g, cam)
        return float(np.sum(w_img * img))

    h = args.step
    fields = [
        ("positions", g.positions, gg.d_positions),
        ("quaternions", g.quaternions, gg.d_quaternions),
        ("log_scales", g.log_scales, gg.d_log_scales),
        ("opacity_logits", g.opacity_logits, gg.d_opacity_logits),
        ("colors", g.colors, gg.d_colors),
    ]
    print(f"{args.splats} splats @ {args.size}^2, h={h:g}")
    overall = 0.0
    for name, arr, grad in fields:
        flat = arr.reshape(len(g), -1)
        gflat = np.asarray(grad, dtype=float).reshape(len(g), -1)
        worst = 0.0
        for i in range(flat.shape[0]):
            for j in range(flat.shape[1]):
                keep = flat[i, j]
                flat[i, j] = keep + h
                lp = loss()
                flat[i, j] = keep - h
                lm = loss()
                flat[i, j] = keep
                fd = (lp - lm) / (2 * h)
                worst = max(worst, abs(gflat[i, j] - fd) / (abs(fd) + 1e-8))
        overall = max(overall, worst)
        print(f"  {name:15s} worst rel err {worst:.3e}")
    print(f"overall {overall:.3e}")
    return 0 if overall < 1e-3 else 1


if __name__ == "__main__":
    raise SystemExit(main())
