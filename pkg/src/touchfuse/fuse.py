"""Pixelwise inverse-variance fusion of aligned vision depth with touch depth.

Both inputs are treated as independent Gaussians per pixel: precisions add,
and the fused mean is the precision-weighted average. Miss pixels carry a
huge sentinel variance, so the update automatically defers to whichever
source is informative.
"""

from dataclasses import dataclass

import numpy as np

from .align import AlignedVision
from .sdfrender import MISS_VAR, DepthVarImage

PROVENANCE_NONE = 0
PROVENANCE_VISION = 85
PROVENANCE_TOUCH = 170
PROVENANCE_FUSED = 255


@dataclass(frozen=True)
class FusedSupervision:
    """Fused depth/variance pair plus a per-pixel provenance mask."""

    depth: np.ndarray
    variance: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        if self.depth.shape != self.variance.shape or self.depth.shape != self.provenance.shape:
            raise ValueError("depth, variance and provenance shapes differ")

    @property
    def supervised_mask(self):
        return self.provenance != PROVENANCE_NONE


def fuse_pixel(mu1, var1, mu2, var2):
    """Fuse two scalar Gaussian depth estimates; precisions add."""
    if var1 <= 0.0 or var2 <= 0.0:
        raise ValueError("variances must be positive")
    var = 1.0 / (1.0 / var1 + 1.0 / var2)
    mu = var * (mu1 / var1 + mu2 / var2)
    return mu, var


def fuse_images(vision: AlignedVision, touch: DepthVarImage) -> FusedSupervision:
    """Apply the scalar fusion rule at every pixel of an image pair.

    Invalid sides (vision depth <= 0, touch miss) enter with the sentinel
    variance so the other source dominates; pixels invalid on both sides
    come out as depth 0 / sentinel variance with provenance NONE.
    """
    if vision.depth.shape != touch.depth.shape:
        raise ValueError("image dimensions differ")
    vision_ok = np.isfinite(vision.depth) & (vision.depth > 0.0)
    touch_ok = touch.hit_mask

    mu1 = np.where(vision_ok, vision.depth, 0.0)
    var1 = np.where(vision_ok, vision.variance, MISS_VAR)
    mu2 = touch.depth
    var2 = touch.variance
    if np.any(var1 <= 0.0) or np.any(var2 <= 0.0):
        raise ValueError("variances must be positive")

    # Same expression shape as fuse_pixel so results agree bit-for-bit.
    var = 1.0 / (1.0 / var1 + 1.0 / var2)
    mu = var * (mu1 / var1 + mu2 / var2)

    provenance = np.full(mu.shape, PROVENANCE_NONE, dtype=np.uint8)
    provenance[vision_ok & ~touch_ok] = PROVENANCE_VISION
    provenance[~vision_ok & touch_ok] = PROVENANCE_TOUCH
    provenance[vision_ok & touch_ok] = PROVENANCE_FUSED
    none = provenance == PROVENANCE_NONE
    mu[none] = 0.0
    var[none] = MISS_VAR
    return FusedSupervision(mu, var, provenance)
