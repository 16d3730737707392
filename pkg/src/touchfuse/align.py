"""Two-stage metric alignment of monocular depth maps plus a heuristic
uncertainty model.

Stage 1 fits a global scale and offset against sparse trusted depth samples;
stage 2 shifts only the object region (pixels that agree with the rendered
touch depth within a gap threshold) by a constant offset, leaving background
depths untouched.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .sdfrender import DepthVarImage


@dataclass(frozen=True)
class SparseDepth:
    """Trusted metric depth samples at integer pixel coordinates (u, v)."""

    pixels: np.ndarray
    depths: np.ndarray
    source: str = "sensor"

    def __post_init__(self):
        px = np.atleast_2d(np.asarray(self.pixels, dtype=np.int64))
        d = np.asarray(self.depths, dtype=np.float64).ravel()
        if px.shape[0] != d.shape[0] or px.shape[1] != 2:
            raise ValueError("pixels must be (N, 2) and match depths")
        if np.any(d <= 0.0):
            raise ValueError("sparse depths must be positive")
        if self.source not in ("sensor", "synthetic"):
            raise ValueError("source must be 'sensor' or 'synthetic'")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "depths", d)

    def __len__(self):
        return self.depths.shape[0]


@dataclass(frozen=True)
class AlignedVision:
    """Metrically aligned monocular depth with its variance image and the
    alignment scalars that produced it."""

    depth: np.ndarray
    variance: np.ndarray
    s_star: float
    t_star: float
    t_object: float = 0.0


def align_scale_offset(raw_depth, sparse: SparseDepth):
    """Closed-form least-squares scale/offset so scale*raw + offset matches
    the sparse samples; returns (scale, offset, aligned image)."""
    raw_depth = np.asarray(raw_depth, dtype=np.float64)
    if len(sparse) < 2:
        raise ValueError("need at least two sparse samples")
    u, v = sparse.pixels[:, 0], sparse.pixels[:, 1]
    if np.any(u < 0) or np.any(v < 0) or np.any(u >= raw_depth.shape[1]) or np.any(v >= raw_depth.shape[0]):
        raise ValueError("sparse sample outside the image")
    raw = raw_depth[v, u]
    target = sparse.depths
    raw_mean = raw.mean()
    spread = np.sum((raw - raw_mean) ** 2)
    if spread == 0.0:
        raise ValueError("sparse samples share one raw depth; scale is unobservable")
    scale = float(np.sum((raw - raw_mean) * (target - target.mean())) / spread)
    offset = float(target.mean() - scale * raw_mean)
    return scale, offset, scale * raw_depth + offset


def align_object_offset(aligned, touch: DepthVarImage, max_gap):
    """Constant-offset refinement against the rendered touch depth.

    Only pixels where the touch render hit and the depth gap is within
    max_gap are shifted; everything else is preserved bit-for-bit.
    """
    aligned = np.asarray(aligned, dtype=np.float64)
    if aligned.shape != touch.depth.shape:
        raise ValueError("image dimensions differ")
    mask = touch.hit_mask & (np.abs(aligned - touch.depth) <= max_gap)
    updated = aligned.copy()
    if not np.any(mask):
        warnings.warn("no overlap between aligned vision and touch depth; offset skipped")
        return 0.0, updated
    t_object = float(np.mean(touch.depth[mask] - aligned[mask]))
    updated[mask] += t_object
    return t_object, updated


def vision_uncertainty(aligned, slope=0.1, floor=0.25):
    """Per-pixel variance (slope * depth)^2 + floor: farther pixels get more
    uncertainty and the floor keeps touch dominant when both disagree."""
    if slope < 0.0:
        raise ValueError("slope must be nonnegative")
    if floor <= 0.0:
        raise ValueError("floor must be positive")
    aligned = np.asarray(aligned, dtype=np.float64)
    return (slope * aligned) ** 2 + floor


def align_vision(raw_depth, sparse: SparseDepth, touch: DepthVarImage, max_gap=3.0,
                 slope=0.1, floor=0.25) -> AlignedVision:
    """Run both alignment stages and attach the uncertainty image."""
    scale, offset, aligned = align_scale_offset(raw_depth, sparse)
    t_object, updated = align_object_offset(aligned, touch, max_gap)
    return AlignedVision(updated, vision_uncertainty(updated, slope, floor),
                         scale, offset, t_object)
