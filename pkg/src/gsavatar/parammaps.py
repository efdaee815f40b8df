"""Template-guided front/back map parameterization.

A skinned template mesh is rasterized from two opposing orthographic cameras
(front and back, sharing one pixel scale). Each covered pixel stores the
canonical surface point and its skinning weights; those per-pixel anchors are
pose-invariant, so posed position maps come from skinning the anchors, and
per-pixel Gaussians live as offsets on top of them.

Pixel ordering for all flattened per-pixel tensors is front view row-major,
then back view row-major, masked pixels skipped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .cameras import OrthoCamera
from .errors import ConfigurationError, ContractError
from .gaussians import Gaussians
from .kinematics import (
    JointTransforms,
    Pose,
    Skeleton,
    forward_kinematics,
    lbs_points,
)

# channel layout of per-pixel Gaussian attribute maps (and checkpoint records,
# where slot 0:3 holds the absolute position instead of the offset)
ATTR_CHANNELS = 14
SL_OFFSET = slice(0, 3)
SL_QUAT = slice(3, 7)
SL_LOG_SCALE = slice(7, 10)
SL_OPACITY = slice(10, 11)
SL_COLOR = slice(11, 14)


@dataclass
class SkinnedTemplate:
    """Watertight-ish triangle mesh with per-vertex skinning weights."""

    vertices: np.ndarray
    faces: np.ndarray
    vertex_weights: np.ndarray
    skeleton: Skeleton

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.vertex_weights = np.asarray(self.vertex_weights, dtype=float)
        V = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ContractError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ContractError("faces must be (F, 3)")
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= V:
            raise ContractError("face indices out of range")
        if self.vertex_weights.shape != (V, self.skeleton.n_joints):
            raise ContractError("vertex_weights must be (V, n_joints)")
        rs = self.vertex_weights.sum(axis=1)
        if np.any(self.vertex_weights < -1e-9) or np.any(np.abs(rs - 1.0) > 1e-6):
            raise ContractError("vertex weights must be convex (nonnegative, sum 1)")


@njit(cache=True)
def _raster_triangles(verts_px, verts_z, faces, height, width):
    """Z-buffered triangle rasterization at integer pixel centers.

    No backface culling: both winding orientations are covered, nearest
    surface wins. Returns (tri_id, bary) with tri_id == -1 where uncovered.
    """
    zbuf = np.full((height, width), np.inf)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 2))
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = verts_px[i0, 0], verts_px[i0, 1]
        x1, y1 = verts_px[i1, 0], verts_px[i1, 1]
        x2, y2 = verts_px[i2, 0], verts_px[i2, 1]
        xmin = max(0, int(np.floor(min(x0, min(x1, x2)))))
        xmax = min(width - 1, int(np.ceil(max(x0, max(x1, x2)))))
        ymin = max(0, int(np.floor(min(y0, min(y1, y2)))))
        ymax = min(height - 1, int(np.ceil(max(y0, max(y1, y2)))))
        if xmax < xmin or ymax < ymin:
            continue
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        z0, z1, z2 = verts_z[i0], verts_z[i1], verts_z[i2]
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                s0 = (x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)
                s1 = (x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)
                s2 = (x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)
                inside = (s0 >= 0.0 and s1 >= 0.0 and s2 >= 0.0) or (
                    s0 <= 0.0 and s1 <= 0.0 and s2 <= 0.0
                )
                if not inside:
                    continue
                b0 = s0 / area
                b1 = s1 / area
                b2 = 1.0 - b0 - b1
                z = b0 * z0 + b1 * z1 + b2 * z2
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    tri_id[py, px] = f
                    bary[py, px, 0] = b0
                    bary[py, px, 1] = b1
    return tri_id, bary


def _front_back_cameras(center: np.ndarray, extent: float, resolution: int):
    s = resolution / extent
    R_front = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    R_back = np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
    front = OrthoCamera(R_front, -R_front @ center, s, resolution, resolution)
    back = OrthoCamera(R_back, -R_back @ center, s, resolution, resolution)
    return front, back


@dataclass
class CanonicalTemplate:
    """Frozen per-pixel anchors of the front/back parameterization."""

    template: SkinnedTemplate
    resolution: int
    extent: float
    cameras: tuple
    masks: np.ndarray           # (2, H, W) bool
    base_positions: np.ndarray  # (2, H, W, 3) canonical surface points
    base_weights: np.ndarray    # (2, H, W, J) skinning weights
    valid_indices: np.ndarray   # (P,) into the flattened (2*H*W) pixel order
    anchor_positions: np.ndarray  # (P, 3) gathered base_positions
    anchor_weights: np.ndarray    # (P, J) gathered base_weights

    @property
    def n_pixels(self) -> int:
        return int(self.valid_indices.shape[0])

    @property
    def skeleton(self) -> Skeleton:
        return self.template.skeleton

    def gather(self, maps: np.ndarray) -> np.ndarray:
        """(2, H, W, C) -> (P, C) in the canonical pixel order."""
        H = W = self.resolution
        if maps.shape[:3] != (2, H, W):
            raise ContractError("maps must be (2, H, W, C)")
        return maps.reshape(2 * H * W, -1)[self.valid_indices]

    def scatter(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """(P, C) -> (2, H, W, C), masked pixels filled with `fill`."""
        values = np.atleast_2d(values)
        if values.shape[0] != self.n_pixels:
            raise ContractError("values must have one row per valid pixel")
        H = W = self.resolution
        out = np.full((2 * H * W, values.shape[1]), fill, dtype=values.dtype)
        out[self.valid_indices] = values
        return out.reshape(2, H, W, values.shape[1])


def build_canonical_template(
    template: SkinnedTemplate,
    resolution: int,
    extent: float | None = None,
    margin: float = 0.1,
) -> CanonicalTemplate:
    """Rasterize the template from the two orthographic views and freeze the
    per-pixel anchors.

    extent is the world-space width/height covered by each view. When given
    explicitly it must leave at least 5% margin around the template's xy
    bounding box; by default it is fitted with `margin` slack on all sides.
    """
    if resolution < 8:
        raise ConfigurationError("map resolution is too small")
    v = template.vertices
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    center = 0.5 * (lo + hi)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1]))
    if extent is None:
        extent = span * (1.0 + 2.0 * margin)
    elif extent < span * 1.05:
        raise ConfigurationError(
            f"template xy span {span:.3f} does not fit extent {extent:.3f} with 5% margin"
        )

    front, back = _front_back_cameras(center, float(extent), resolution)
    H = W = resolution
    J = template.skeleton.n_joints
    masks = np.zeros((2, H, W), dtype=bool)
    base_pos = np.zeros((2, H, W, 3))
    base_wts = np.zeros((2, H, W, J))

    for view, cam in enumerate((front, back)):
        q = template.vertices @ cam.rotation.T + cam.translation
        verts_px = np.stack(
            [cam.pixels_per_meter * q[:, 0] + cam.cx, cam.pixels_per_meter * q[:, 1] + cam.cy],
            axis=1,
        )
        tri_id, bary = _raster_triangles(verts_px, q[:, 2].copy(), template.faces, H, W)
        mask = tri_id >= 0
        masks[view] = mask
        ys, xs = np.nonzero(mask)
        tid = tri_id[ys, xs]
        b0 = bary[ys, xs, 0]
        b1 = bary[ys, xs, 1]
        b2 = 1.0 - b0 - b1
        tri = template.faces[tid]
        lam = np.stack([b0, b1, b2], axis=1)
        pos = np.einsum("pk,pkd->pd", lam, template.vertices[tri])
        wts = np.einsum("pk,pkj->pj", lam, template.vertex_weights[tri])
        wts = np.clip(wts, 0.0, None)
        wts /= wts.sum(axis=1, keepdims=True)
        base_pos[view, ys, xs] = pos
        base_wts[view, ys, xs] = wts

    if not masks.any():
        raise ConfigurationError("template covers no pixels at this resolution")
    valid = np.flatnonzero(masks.reshape(-1))
    flat_pos = base_pos.reshape(-1, 3)[valid]
    flat_wts = base_wts.reshape(-1, J)[valid]
    return CanonicalTemplate(
        template=template,
        resolution=resolution,
        extent=float(extent),
        cameras=(front, back),
        masks=masks,
        base_positions=base_pos,
        base_weights=base_wts,
        valid_indices=valid,
        anchor_positions=flat_pos,
        anchor_weights=flat_wts,
    )


def render_position_maps(ct: CanonicalTemplate, pose: Pose) -> np.ndarray:
    """Posed per-pixel surface positions, (2, H, W, 3); masked pixels zero.

    The pose's global motion is not applied: these maps feed the
    pose-conditioning path, which is deliberately invariant to it.
    """
    tf = forward_kinematics(ct.skeleton, pose)
    posed = lbs_points(ct.anchor_positions, ct.anchor_weights, tf)
    return ct.scatter(posed)


def posed_anchor_positions(ct: CanonicalTemplate, tf: JointTransforms) -> np.ndarray:
    return lbs_points(ct.anchor_positions, ct.anchor_weights, tf)


def view_directions(
    ct: CanonicalTemplate, pose: Pose, tf: JointTransforms, camera
) -> np.ndarray:
    """Per-pixel unit directions toward the camera, rotated back into the
    canonical (global-motion-free) frame. Gathered layout (P, 3)."""
    posed = posed_anchor_positions(ct, tf)
    g = pose.global_transform()
    world = g.apply(posed)
    if hasattr(camera, "center"):
        d = camera.center() - world
        n = np.linalg.norm(d, axis=1, keepdims=True)
        n = np.where(n < 1e-12, 1.0, n)
        d = d / n
    else:
        d = np.broadcast_to(camera.view_direction(), world.shape).copy()
    return d @ g.rotation


def extract_gaussians(ct: CanonicalTemplate, attrs: np.ndarray) -> Gaussians:
    """Per-pixel attribute rows (P, 14) -> canonical Gaussians.

    Slot 0:3 is the offset from the pixel's anchor position; remaining slots
    are quaternion, log scale, opacity logit, color.
    """
    attrs = np.asarray(attrs)
    if attrs.shape != (ct.n_pixels, ATTR_CHANNELS):
        raise ContractError(f"attrs must be ({ct.n_pixels}, {ATTR_CHANNELS})")
    return Gaussians(
        positions=ct.anchor_positions + attrs[:, SL_OFFSET],
        quaternions=attrs[:, SL_QUAT].copy(),
        log_scales=attrs[:, SL_LOG_SCALE].copy(),
        opacity_logits=attrs[:, SL_OPACITY.start],
        colors=attrs[:, SL_COLOR].copy(),
    )
