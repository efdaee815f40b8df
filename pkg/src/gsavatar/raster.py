"""Tile-binned alpha-compositing rasterizer for 2D Gaussian splats.

Forward model, shared by the tiled path and the brute-force reference:

    q     = d^T (cov2d + 0.3 I)^-1 d          d = pixel - mean
    w     = opacity * exp(-q / 2)             skipped when q > 60
    alpha = min(w, 0.999)
    C     = sum_i T_i alpha_i color_i,  T_i = prod_{j<i} (1 - alpha_j)

Splats must arrive depth-sorted (front first). The tiled path bins splats to
16x16 pixel tiles with an opacity-aware conservative radius and stops a pixel
once transmittance drops below 1e-4; the reference path visits every splat at
every pixel and never terminates. The backward pass replays each pixel's
blend list in reverse, recovering per-splat transmittance by division (safe
because alpha is clamped to 0.999).

Per-entry gradients are written race-free (each tile entry belongs to one
tile, tiles to one thread each) and reduced to per-splat gradients with a
fixed-order sequential sum, so results are bit-identical for any thread
count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .cameras import SplatGrads, Splats2D
from .errors import ContractError

TILE_SIZE = 16
DILATION = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_MAX = 0.999       # per-splat alpha clamp
T_STOP = 1e-4           # early-termination transmittance threshold
Q_CUTOFF = 60.0         # mahalanobis^2 beyond which a splat adds nothing
BIN_EPS = 1e-9          # max contribution a splat may leak outside its bin radius


@dataclass
class ForwardAux:
    """Replay state produced by rasterize_forward, consumed by the backward.

    entries/tile_starts describe the tile bin lists over the *sorted* splat
    order; transmittance and n_contrib record where each pixel's blend
    stopped.
    """

    width: int
    height: int
    tile_size: int
    n_splats: int
    checksum: float
    entries: np.ndarray
    tile_starts: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray


def sort_splats(splats: Splats2D) -> tuple[Splats2D, np.ndarray]:
    """Depth-ascending stable sort; ties keep input order. Returns (sorted, order)."""
    order = np.argsort(splats.depths, kind="stable")
    return splats.take(order), order


def _splat_checksum(splats: Splats2D) -> float:
    return float(
        np.float64(splats.means.sum())
        + 2.0 * np.float64(splats.covs.sum())
        + 3.0 * np.float64(splats.opacities.sum())
        + 5.0 * np.float64(splats.colors.sum())
    )


def _check_inputs(splats: Splats2D, width: int, height: int, tile_size: int):
    if width <= 0 or height <= 0 or tile_size <= 0:
        raise ContractError("image and tile dimensions must be positive")
    if not (
        np.all(np.isfinite(splats.means))
        and np.all(np.isfinite(splats.covs))
        and np.all(np.isfinite(splats.opacities))
        and np.all(np.isfinite(splats.colors))
    ):
        raise ContractError("splat fields must be finite")
    d = splats.depths
    finite = d[np.isfinite(d)]
    if finite.size > 1 and np.any(np.diff(finite) < 0):
        raise ContractError("splats must be depth-sorted (use sort_splats)")


def _tile_rects(splats: Splats2D, width, height, tile_size):
    """Conservative per-splat tile rectangles [x0,x1) x [y0,y1).

    The radius is sized so any contribution outside it is below BIN_EPS:
    solve opacity * exp(-q/2) = BIN_EPS for q, floor at the classic 3-sigma
    rule (q=9). Splats too faint to ever reach BIN_EPS get an empty rect.
    """
    a = splats.covs[:, 0].astype(np.float64) + DILATION
    b = splats.covs[:, 1].astype(np.float64)
    c = splats.covs[:, 2].astype(np.float64) + DILATION
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    op = splats.opacities.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_max = 2.0 * np.log(op / BIN_EPS)
    q_max = np.maximum(q_max, 9.0)
    radius = np.sqrt(lam_max * np.maximum(q_max, 0.0))

    alive = (op > BIN_EPS) & np.isfinite(splats.depths)
    mx = splats.means[:, 0].astype(np.float64)
    my = splats.means[:, 1].astype(np.float64)
    n_tx = (width + tile_size - 1) // tile_size
    n_ty = (height + tile_size - 1) // tile_size
    x0 = np.clip(np.floor((mx - radius) / tile_size), 0, n_tx).astype(np.int64)
    x1 = np.clip(np.floor((mx + radius) / tile_size) + 1, 0, n_tx).astype(np.int64)
    y0 = np.clip(np.floor((my - radius) / tile_size), 0, n_ty).astype(np.int64)
    y1 = np.clip(np.floor((my + radius) / tile_size) + 1, 0, n_ty).astype(np.int64)
    empty = ~alive | (x1 <= x0) | (y1 <= y0)
    x0[empty], x1[empty], y0[empty], y1[empty] = 0, 0, 0, 0
    return np.stack([x0, x1, y0, y1], axis=1), n_tx, n_ty


@njit(cache=True)
def _count_entries(rects, n_tx, n_ty):
    counts = np.zeros(n_tx * n_ty, dtype=np.int64)
    for i in range(rects.shape[0]):
        for ty in range(rects[i, 2], rects[i, 3]):
            for tx in range(rects[i, 0], rects[i, 1]):
                counts[ty * n_tx + tx] += 1
    return counts


@njit(cache=True)
def _fill_entries(rects, tile_starts, n_tx):
    total = tile_starts[-1]
    entries = np.empty(total, dtype=np.int64)
    cursor = tile_starts[:-1].copy()
    for i in range(rects.shape[0]):
        for ty in range(rects[i, 2], rects[i, 3]):
            for tx in range(rects[i, 0], rects[i, 1]):
                t = ty * n_tx + tx
                entries[cursor[t]] = i
                cursor[t] += 1
    return entries


@njit(parallel=True, cache=True)
def _forward_kernel(
    means, covs, opac, colors, entries, tile_starts,
    width, height, tile_size, n_tx, image, transmittance, n_contrib,
):
    n_tiles = tile_starts.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t % n_tx
        y_lo = ty * tile_size
        x_lo = tx * tile_size
        y_hi = min(y_lo + tile_size, height)
        x_hi = min(x_lo + tile_size, width)
        s0 = tile_starts[t]
        s1 = tile_starts[t + 1]
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                cnt = 0
                for e in range(s0, s1):
                    i = entries[e]
                    cnt += 1
                    A = covs[i, 0] + DILATION
                    B = covs[i, 1]
                    C = covs[i, 2] + DILATION
                    det = A * C - B * B
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    q = (C * dx * dx - 2.0 * B * dx * dy + A * dy * dy) / det
                    if q > Q_CUTOFF:
                        continue
                    w = opac[i] * np.exp(-0.5 * q)
                    alpha = min(w, ALPHA_MAX)
                    if alpha <= 0.0:
                        continue
                    f = T * alpha
                    r += f * colors[i, 0]
                    g += f * colors[i, 1]
                    b += f * colors[i, 2]
                    T *= 1.0 - alpha
                    if T < T_STOP:
                        break
                image[py, px, 0] = r
                image[py, px, 1] = g
                image[py, px, 2] = b
                transmittance[py, px] = T
                n_contrib[py, px] = cnt


@njit(parallel=True, cache=True)
def _backward_kernel(
    means, covs, opac, colors, entries, tile_starts,
    width, height, tile_size, n_tx,
    transmittance, n_contrib, d_image, entry_grads,
):
    n_tiles = tile_starts.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t % n_tx
        y_lo = ty * tile_size
        x_lo = tx * tile_size
        y_hi = min(y_lo + tile_size, height)
        x_hi = min(x_lo + tile_size, width)
        s0 = tile_starts[t]
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                gr = d_image[py, px, 0]
                gg = d_image[py, px, 1]
                gb = d_image[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                cnt = n_contrib[py, px]
                T_next = transmittance[py, px]
                Sr = 0.0
                Sg = 0.0
                Sb = 0.0
                for e in range(s0 + cnt - 1, s0 - 1, -1):
                    i = entries[e]
                    A = covs[i, 0] + DILATION
                    B = covs[i, 1]
                    C = covs[i, 2] + DILATION
                    det = A * C - B * B
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    q = (C * dx * dx - 2.0 * B * dx * dy + A * dy * dy) / det
                    if q > Q_CUTOFF:
                        continue
                    G = np.exp(-0.5 * q)
                    w = opac[i] * G
                    alpha = min(w, ALPHA_MAX)
                    if alpha <= 0.0:
                        continue
                    one_m = 1.0 - alpha
                    T_i = T_next / one_m
                    f = T_i * alpha
                    # color gradient
                    entry_grads[e, 6] += f * gr
                    entry_grads[e, 7] += f * gg
                    entry_grads[e, 8] += f * gb
                    # alpha gradient: direct term minus occlusion of later splats
                    dalpha = (
                        gr * (T_i * colors[i, 0] - Sr / one_m)
                        + gg * (T_i * colors[i, 1] - Sg / one_m)
                        + gb * (T_i * colors[i, 2] - Sb / one_m)
                    )
                    Sr += f * colors[i, 0]
                    Sg += f * colors[i, 1]
                    Sb += f * colors[i, 2]
                    T_next = T_i
                    if w >= ALPHA_MAX:
                        continue  # clamp active: no gradient into w
                    entry_grads[e, 5] += G * dalpha
                    dq = -0.5 * w * dalpha
                    ux = (C * dx - B * dy) / det
                    uy = (A * dy - B * dx) / det
                    entry_grads[e, 0] += dq * (-2.0 * ux)
                    entry_grads[e, 1] += dq * (-2.0 * uy)
                    entry_grads[e, 2] += dq * (-ux * ux)
                    entry_grads[e, 3] += dq * (-2.0 * ux * uy)
                    entry_grads[e, 4] += dq * (-uy * uy)


@njit(parallel=True, cache=True)
def _reference_kernel(means, covs, opac, colors, width, height, image, transmittance):
    n = means.shape[0]
    for py in prange(height):
        for px in range(width):
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for i in range(n):
                A = covs[i, 0] + DILATION
                B = covs[i, 1]
                C = covs[i, 2] + DILATION
                det = A * C - B * B
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                q = (C * dx * dx - 2.0 * B * dx * dy + A * dy * dy) / det
                if q > Q_CUTOFF:
                    continue
                w = opac[i] * np.exp(-0.5 * q)
                alpha = min(w, ALPHA_MAX)
                if alpha <= 0.0:
                    continue
                f = T * alpha
                r += f * colors[i, 0]
                g += f * colors[i, 1]
                b += f * colors[i, 2]
                T *= 1.0 - alpha
            image[py, px, 0] = r
            image[py, px, 1] = g
            image[py, px, 2] = b
            transmittance[py, px] = T


def rasterize_forward(
    splats: Splats2D, width: int, height: int, tile_size: int = TILE_SIZE
) -> tuple[np.ndarray, ForwardAux]:
    """Tiled forward pass over depth-sorted splats. Returns (image, aux)."""
    _check_inputs(splats, width, height, tile_size)
    rects, n_tx, n_ty = _tile_rects(splats, width, height, tile_size)
    counts = _count_entries(rects, n_tx, n_ty)
    tile_starts = np.zeros(counts.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=tile_starts[1:])
    entries = _fill_entries(rects, tile_starts, n_tx)

    dt = splats.means.dtype
    image = np.zeros((height, width, 3), dtype=dt)
    transmittance = np.ones((height, width), dtype=dt)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    _forward_kernel(
        splats.means, splats.covs, splats.opacities, splats.colors,
        entries, tile_starts, width, height, tile_size, n_tx,
        image, transmittance, n_contrib,
    )
    aux = ForwardAux(
        width=width,
        height=height,
        tile_size=tile_size,
        n_splats=len(splats),
        checksum=_splat_checksum(splats),
        entries=entries,
        tile_starts=tile_starts,
        transmittance=transmittance,
        n_contrib=n_contrib,
    )
    return image, aux


def rasterize_backward(
    splats: Splats2D, aux: ForwardAux, d_image: np.ndarray
) -> SplatGrads:
    """Adjoint of rasterize_forward for the same sorted splats and aux.

    Returns gradients aligned with the sorted splat order that produced aux;
    callers that sorted must scatter back through their permutation.
    """
    if aux.n_splats != len(splats) or aux.checksum != _splat_checksum(splats):
        raise ContractError("aux does not match these splats")
    d_image = np.ascontiguousarray(d_image, dtype=splats.means.dtype)
    if d_image.shape != (aux.height, aux.width, 3):
        raise ContractError("d_image shape mismatch with aux")

    n_tx = (aux.width + aux.tile_size - 1) // aux.tile_size
    entry_grads = np.zeros((aux.entries.shape[0], 9), dtype=splats.means.dtype)
    _backward_kernel(
        splats.means, splats.covs, splats.opacities, splats.colors,
        aux.entries, aux.tile_starts, aux.width, aux.height, aux.tile_size, n_tx,
        aux.transmittance, aux.n_contrib, d_image, entry_grads,
    )

    n = len(splats)
    acc = np.zeros((n, 9), dtype=np.float64)
    # fixed-order reduction: deterministic for any thread count
    np.add.at(acc, aux.entries, entry_grads.astype(np.float64))
    acc = acc.astype(splats.means.dtype)
    return SplatGrads(
        d_means=acc[:, 0:2],
        d_covs=acc[:, 2:5],
        d_opacities=acc[:, 5],
        d_colors=acc[:, 6:9],
    )


def rasterize_reference(
    splats: Splats2D, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force oracle: every splat against every pixel, no tiles, no
    early termination. Returns (image, transmittance)."""
    _check_inputs(splats, width, height, TILE_SIZE)
    dt = splats.means.dtype
    image = np.zeros((height, width, 3), dtype=dt)
    transmittance = np.ones((height, width), dtype=dt)
    _reference_kernel(
        splats.means, splats.covs, splats.opacities, splats.colors,
        width, height, image, transmittance,
    )
    return image, transmittance
