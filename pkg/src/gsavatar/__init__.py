"""Animatable Gaussian-splat avatars at desk scale.

Pipeline pieces: differentiable tile rasterizer for 3D Gaussians, skeletal
skinning (LBS with canonical-space root finding), front/back orthographic map
parameterization of an avatar template, low-rank pose projection, and a
pose-conditioned linear predictor of per-pixel Gaussian attributes.
"""
from __future__ import annotations

import os

import numba


def set_threads(n: int) -> int:
    """Clamp to the numba thread budget and apply; returns the thread count in use."""
    limit = numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), limit))
    numba.set_num_threads(n)
    return n


OUTPUT_ROOT_ENV = "GSAVATAR_OUTPUT_ROOT"


def output_root(default: str = ".") -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, default)


__version__ = "0.1.0"
