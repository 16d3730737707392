"""Evaluation metrics: depth MSE (full scene and object mask), PSNR, and
Chamfer/Hausdorff cloud distances with an ICP-style alignment refinement."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .sdfrender import DepthVarImage


@dataclass
class EvalReport:
    psnr: float
    d_mse: float
    d_mse_o: float
    chamfer: float
    hausdorff: float
    per_view: list = field(default_factory=list)

    def rows(self):
        out = [("all", self.psnr, self.d_mse, self.d_mse_o)]
        out.extend(self.per_view)
        return out

    def to_text(self):
        lines = [
            f"psnr_db      {self.psnr:.6g}",
            f"d_mse        {self.d_mse:.6g}",
            f"d_mse_o      {self.d_mse_o:.6g}",
            f"chamfer      {self.chamfer:.6g}",
            f"hausdorff    {self.hausdorff:.6g}",
        ]
        for name, psnr, d_mse, d_mse_o in self.per_view:
            lines.append(f"view {name}  psnr={psnr:.6g}  d_mse={d_mse:.6g}  d_mse_o={d_mse_o:.6g}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        lines = ["view,psnr_db,d_mse,d_mse_o,chamfer,hausdorff"]
        lines.append(f"all,{self.psnr:.12g},{self.d_mse:.12g},{self.d_mse_o:.12g},"
                     f"{self.chamfer:.12g},{self.hausdorff:.12g}")
        for name, psnr, d_mse, d_mse_o in self.per_view:
            lines.append(f"{name},{psnr:.12g},{d_mse:.12g},{d_mse_o:.12g},,")
        return "\n".join(lines) + "\n"


def depth_mse(pred, gt: DepthVarImage, mask=None):
    """Mean squared depth error over pixels valid in both images.

    Ground-truth miss pixels are always excluded; pixels the prediction
    does not cover (depth 0) are excluded too, since the toy renderer has
    no densification to fill them.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.depth.shape:
        raise ValueError("image dimensions differ")
    valid = gt.hit_mask & (pred > 0.0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not np.any(valid):
        raise ValueError("no valid pixels to compare")
    return float(np.mean((pred[valid] - gt.depth[valid]) ** 2))


def psnr(img, gt):
    """Peak signal-to-noise ratio in dB for images with values in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise ValueError("image dimensions differ")
    mse = float(np.mean((img - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _nearest_distances(a, b):
    return cKDTree(b).query(a, k=1)[0]


def chamfer(a, b):
    """Symmetric mean nearest-neighbor distance between two point clouds."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point clouds must be nonempty")
    return 0.5 * (float(np.mean(_nearest_distances(a, b)))
                  + float(np.mean(_nearest_distances(b, a))))


def hausdorff(a, b):
    """Symmetric worst-case nearest-neighbor distance."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point clouds must be nonempty")
    return max(float(np.max(_nearest_distances(a, b))),
               float(np.max(_nearest_distances(b, a))))


def _best_rigid(src, dst):
    """Kabsch rotation + translation minimizing |R src + t - dst|^2."""
    src_c = src.mean(axis=0)
    dst_c = dst.mean(axis=0)
    cov = (src - src_c).T @ (dst - dst_c)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    fix = np.diag([1.0, 1.0, d])
    rot = vt.T @ fix @ u.T
    return rot, dst_c - rot @ src_c


def align_clouds(a, b, iters=20):
    """Rigidly align cloud a to cloud b: centroid initialization refined by
    ICP on nearest neighbors; returns the 4x4 transform with the best
    chamfer seen (never worse than the initialization)."""
    a, b = np.atleast_2d(np.asarray(a, dtype=np.float64)), np.atleast_2d(np.asarray(b, dtype=np.float64))
    rot = np.eye(3)
    trans = b.mean(axis=0) - a.mean(axis=0)
    tree = cKDTree(b)
    best = (chamfer(a + trans, b), rot.copy(), trans.copy())
    for _ in range(iters):
        moved = a @ rot.T + trans
        matched = b[tree.query(moved, k=1)[1]]
        rot_new, trans_new = _best_rigid(a, matched)
        rot, trans = rot_new, trans_new
        score = chamfer(a @ rot.T + trans, b)
        if score < best[0]:
            best = (score, rot.copy(), trans.copy())
    transform = np.eye(4)
    transform[:3, :3] = best[1]
    transform[:3, 3] = best[2]
    return transform
