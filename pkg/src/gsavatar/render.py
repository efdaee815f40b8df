"""Camera-to-image chain for a plain set of 3D Gaussians.

Projection, depth sort, and tiled compositing in one call, with an exact
adjoint that returns gradients in the caller's original row order. The
training loop layers skinning on top of this; scripts and gate checks use
it directly.
"""
from dataclasses import dataclass

import numpy as np

from .cameras import (
    GaussianGrads,
    PerspectiveCamera,
    SplatGrads,
    Splats2D,
    project_perspective,
    project_perspective_backward,
)
from .gaussians import Gaussians
from .raster import ForwardAux, rasterize_backward, rasterize_forward, sort_splats


@dataclass
class RenderAux:
    """Intermediates rasterize_forward produced for one render, kept so the
    backward pass can replay the exact same compositing."""

    valid: np.ndarray
    order: np.ndarray
    splats_sorted: Splats2D
    aux: ForwardAux


def render_gaussians(
    gaussians: Gaussians, camera: PerspectiveCamera
) -> tuple[np.ndarray, RenderAux]:
    splats, valid = project_perspective(gaussians, camera)
    splats_sorted, order = sort_splats(splats)
    image, aux = rasterize_forward(splats_sorted, camera.width, camera.height)
    return image, RenderAux(valid=valid, order=order, splats_sorted=splats_sorted, aux=aux)


def render_gaussians_backward(
    gaussians: Gaussians,
    camera: PerspectiveCamera,
    raux: RenderAux,
    d_image: np.ndarray,
) -> tuple[GaussianGrads, SplatGrads]:
    """Pull an image gradient back to 3D attribute and 2D splat gradients.

    Both results are aligned with the rows of `gaussians`, not the depth
    order used internally.
    """
    sg_sorted = rasterize_backward(raux.splats_sorted, raux.aux, d_image)
    unsort = np.empty_like(raux.order)
    unsort[raux.order] = np.arange(raux.order.size)
    sg = SplatGrads(
        d_means=sg_sorted.d_means[unsort],
        d_covs=sg_sorted.d_covs[unsort],
        d_opacities=sg_sorted.d_opacities[unsort],
        d_colors=sg_sorted.d_colors[unsort],
    )
    gg = project_perspective_backward(gaussians, camera, raux.valid, sg)
    return gg, sg
