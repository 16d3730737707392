"""Gaussian-process signed-distance model conditioned on tactile contact data.

Touch readings contribute three kinds of observations: the contact points
themselves (distance 0), artificial points pushed along the contact normals
(distance -offset inside, +offset outside), and per-slice interior centroids
(small negative distance). Exact GP regression with a Matern-3/2 kernel then
gives a signed-distance mean and variance anywhere in space.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.spatial import cKDTree

from .errors import NumericalError

LABEL_SURFACE = 0
LABEL_INSIDE = 1
LABEL_OUTSIDE = 2
LABEL_INTERIOR = 3

DEFAULT_CAP = 8000
JITTER_START_FRAC = 1e-6
JITTER_STOP_FRAC = 1e-2
UNIT_NORMAL_TOL = 1e-6
VARIANCE_FLOOR_FRAC = 1e-12

MODEL_MAGIC = b"GPIS"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TouchReading:
    """Contact surface points with outward unit normals from one touch.

    points/normals are (N, 3) float64 arrays in the world frame;
    sensor_pose is the 4x4 world-from-sensor transform.
    """

    points: np.ndarray
    normals: np.ndarray
    sensor_pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        nrm = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
        if pts.shape != nrm.shape or pts.shape[1] != 3:
            raise ValueError("points and normals must both be (N, 3)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("touch points must be finite")
        lengths = np.linalg.norm(nrm, axis=1)
        bad = np.flatnonzero(np.abs(lengths - 1.0) > UNIT_NORMAL_TOL)
        if bad.size:
            raise ValueError(f"normal at index {bad[0]} is not unit length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "sensor_pose", np.asarray(self.sensor_pose, dtype=np.float64))

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class ConditioningSet:
    """Locations with signed-distance targets and per-point class labels."""

    locations: np.ndarray
    targets: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        loc = np.atleast_2d(np.asarray(self.locations, dtype=np.float64))
        tgt = np.asarray(self.targets, dtype=np.float64).ravel()
        lab = np.asarray(self.labels, dtype=np.int8).ravel()
        if loc.shape[0] != tgt.shape[0] or loc.shape[0] != lab.shape[0]:
            raise ValueError("locations, targets and labels must have equal length")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "targets", tgt)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.locations.shape[0]

    def surface_points(self):
        return self.locations[self.labels == LABEL_SURFACE]


@dataclass(frozen=True)
class KernelParams:
    """Matern-3/2 hyperparameters plus constant prior mean.

    length_scale and output_scale are in meters, noise is an observation
    variance in meters^2 and prior_mean the constant mean in meters.
    """

    length_scale: float
    output_scale: float
    noise: float = 0.0
    prior_mean: float = 0.0

    def __post_init__(self):
        if self.length_scale <= 0.0:
            raise ValueError("length_scale must be positive")
        if self.output_scale <= 0.0:
            raise ValueError("output_scale must be positive")
        if self.noise < 0.0:
            raise ValueError("noise must be nonnegative")


@dataclass(frozen=True)
class GPISModel:
    """Immutable conditioned GP: factorized kernel matrix plus solve cache.

    factor is the lower-triangular Cholesky factor of K + effective_noise*I
    where effective_noise includes any jitter added during fitting; alpha is
    the precomputed solve of that matrix against the mean-centered targets.
    """

    conditioning: ConditioningSet
    params: KernelParams
    factor: np.ndarray
    alpha: np.ndarray
    effective_noise: float

    def query(self, points):
        """Posterior mean and predictive variance at (N, 3) query points."""
        mean, cross = self._mean_and_cross(points)
        rhs = cross.T
        if rhs.shape[1] == 1:
            # LAPACK switches algorithms at one right-hand side; pad so a
            # pointwise query returns bit-identical values to a batch one.
            v = solve_triangular(self.factor, np.hstack([rhs, rhs]),
                                 lower=True, check_finite=False)[:, :1]
        else:
            v = solve_triangular(self.factor, rhs, lower=True, check_finite=False)
        prior = self.params.output_scale ** 2 + self.params.noise
        var = prior - np.einsum("ij,ij->j", v, v)
        floor = VARIANCE_FLOOR_FRAC * self.params.output_scale ** 2
        return mean, np.maximum(var, floor)

    def query_mean(self, points):
        """Posterior mean only (fast path for ray marching)."""
        return self._mean_and_cross(points)[0]

    def _mean_and_cross(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(np.isfinite(pts)):
            raise ValueError("query points must be finite")
        cross = matern32(_pairwise_distances(pts, self.conditioning.locations), self.params)
        # einsum keeps each row's reduction order independent of batch size,
        # so marching a ray alone or with thousands of others gives the same bits.
        mean = self.params.prior_mean + np.einsum("nm,m->n", cross, self.alpha)
        return mean, cross


def matern32(distance, params: KernelParams):
    """Matern-3/2 covariance for nonnegative distances (scalar or array)."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d < 0.0):
        raise ValueError("distance must be nonnegative")
    scaled = (np.sqrt(3.0) / params.length_scale) * d
    out = params.output_scale ** 2 * (1.0 + scaled) * np.exp(-scaled)
    return float(out) if np.isscalar(distance) or out.ndim == 0 else out


def _pairwise_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _voxel_downsample(points, normals, pitch):
    """Grid downsample at `pitch`, then thin greedily so no two survivors
    are closer than pitch/2 (grid cells alone cannot guarantee that across
    cell boundaries)."""
    if pitch <= 0.0:
        return points, normals
    cells = np.floor(points / pitch).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    order = np.sort(first)
    pts, nrm = points[order], normals[order]

    min_dist = 0.5 * pitch
    pairs = cKDTree(pts).query_pairs(min_dist, output_type="ndarray")
    if pairs.size:
        gap = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
        pairs = pairs[gap < min_dist]
    earlier = [[] for _ in range(pts.shape[0])]
    for a, b in pairs:
        earlier[max(a, b)].append(min(a, b))
    keep = np.ones(pts.shape[0], dtype=bool)
    for i in range(pts.shape[0]):
        if any(keep[j] for j in earlier[i]):
            keep[i] = False
    return pts[keep], nrm[keep]


def build_conditioning_set(touches, surface_offset, interior_offset, n_slices=8, voxel=0.0):
    """Expand touch readings into GP conditioning data.

    Each retained surface point x with normal n emits x -> 0,
    x - surface_offset*n -> -surface_offset and x + surface_offset*n ->
    +surface_offset. Every nonempty horizontal slice of the surface points
    adds its centroid with target -interior_offset. Surface points are
    voxel-downsampled at pitch `voxel` before expansion (0 disables).
    """
    if not touches:
        raise ValueError("no tactile data")
    if surface_offset <= 0.0 or interior_offset <= 0.0:
        raise ValueError("offsets must be positive")
    if n_slices < 1:
        raise ValueError("n_slices must be at least 1")

    points = np.concatenate([t.points for t in touches], axis=0)
    normals = np.concatenate([t.normals for t in touches], axis=0)
    if points.shape[0] == 0:
        raise ValueError("no tactile data")
    points, normals = _voxel_downsample(points, normals, voxel)

    inside = points - surface_offset * normals
    outside = points + surface_offset * normals
    n = points.shape[0]

    locations = [points, inside, outside]
    targets = [
        np.zeros(n),
        np.full(n, -surface_offset),
        np.full(n, surface_offset),
    ]
    labels = [
        np.full(n, LABEL_SURFACE, dtype=np.int8),
        np.full(n, LABEL_INSIDE, dtype=np.int8),
        np.full(n, LABEL_OUTSIDE, dtype=np.int8),
    ]

    z = points[:, 2]
    z_min, z_max = z.min(), z.max()
    span = z_max - z_min
    if span == 0.0:
        bins = np.zeros(n, dtype=np.int64)
    else:
        bins = np.minimum((n_slices * (z - z_min) / span).astype(np.int64), n_slices - 1)
    centroids = []
    for b in range(n_slices):
        members = points[bins == b]
        if members.shape[0]:
            centroids.append(members.mean(axis=0))
    if centroids:
        centroids = np.asarray(centroids)
        locations.append(centroids)
        targets.append(np.full(centroids.shape[0], -interior_offset))
        labels.append(np.full(centroids.shape[0], LABEL_INTERIOR, dtype=np.int8))

    return ConditioningSet(
        np.concatenate(locations, axis=0),
        np.concatenate(targets),
        np.concatenate(labels),
    )


def _factorize(gram, noise, output_scale):
    """Cholesky with jitter escalation; returns (factor, effective_noise)."""
    jitters = [0.0]
    j = JITTER_START_FRAC * output_scale ** 2
    while j <= JITTER_STOP_FRAC * output_scale ** 2 * (1.0 + 1e-12):
        jitters.append(j)
        j *= 10.0
    n = gram.shape[0]
    for jitter in jitters:
        try:
            factor = cholesky(gram + (noise + jitter) * np.eye(n), lower=True, check_finite=False)
            return factor, noise + jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("kernel matrix not positive definite")


def fit(cset: ConditioningSet, params: KernelParams, cap=DEFAULT_CAP) -> GPISModel:
    """Condition the GP on a set of signed-distance observations.

    Deterministic for fixed inputs. Raises when the set exceeds `cap`
    (coarsen the voxel pitch to shrink it) or when the kernel matrix cannot
    be factorized even after jitter escalation.
    """
    if len(cset) == 0:
        raise ValueError("conditioning set is empty")
    if len(cset) > cap:
        raise NumericalError(
            f"conditioning set has {len(cset)} points, cap is {cap}; "
            "use a coarser voxel pitch"
        )
    gram = matern32(_pairwise_distances(cset.locations, cset.locations), params)
    factor, effective_noise = _factorize(gram, params.noise, params.output_scale)
    centered = cset.targets - params.prior_mean
    alpha = solve_triangular(
        factor.T,
        solve_triangular(factor, centered, lower=True, check_finite=False),
        lower=False,
        check_finite=False,
    )
    return GPISModel(cset, params, factor, alpha, effective_noise)


def query(model: GPISModel, points):
    """Module-level alias of GPISModel.query."""
    return model.query(points)


def log_marginal_likelihood(model: GPISModel) -> float:
    centered = model.conditioning.targets - model.params.prior_mean
    n = len(model.conditioning)
    quad = float(centered @ model.alpha)
    logdet = 2.0 * float(np.sum(np.log(np.diag(model.factor))))
    return -0.5 * quad - 0.5 * logdet - 0.5 * n * np.log(2.0 * np.pi)


def optimize_hyperparameters(cset: ConditioningSet, grid, noise=1e-6, prior_mean=0.0,
                             cap=DEFAULT_CAP) -> KernelParams:
    """Pick the (length_scale, output_scale) grid member maximizing the log
    marginal likelihood; ties break toward the smallest length scale, then
    the smallest output scale."""
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    best = None
    for rho, sigma in grid:
        candidate = KernelParams(rho, sigma, noise, prior_mean)
        try:
            lml = log_marginal_likelihood(fit(cset, candidate, cap=cap))
        except NumericalError:
            continue
        key = (-lml, rho, sigma)
        if best is None or key < best[0]:
            best = (key, candidate)
    if best is None:
        raise NumericalError("every hyperparameter candidate failed to factorize")
    return best[1]


def save_model(path, model: GPISModel):
    """Serialize a model: magic, version u32, then little-endian f64 arrays
    (locations, targets, params, factor)."""
    n = len(model.conditioning)
    parts = [
        MODEL_MAGIC,
        np.uint32(MODEL_VERSION).astype("<u4").tobytes(),
        np.uint32(n).astype("<u4").tobytes(),
        model.conditioning.locations.astype("<f8").tobytes(),
        model.conditioning.targets.astype("<f8").tobytes(),
        np.array(
            [
                model.params.length_scale,
                model.params.output_scale,
                model.params.noise,
                model.params.prior_mean,
                model.effective_noise,
            ],
            dtype="<f8",
        ).tobytes(),
        model.factor.astype("<f8").tobytes(),
    ]
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, b"".join(parts))


def load_model(path) -> GPISModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MODEL_MAGIC:
        raise ValueError("not a GPIS model file")
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported GPIS model version {version}")
    n = int(np.frombuffer(blob, dtype="<u4", count=1, offset=8)[0])
    expected = 12 + 8 * (3 * n + n + 5 + n * n)
    if len(blob) != expected:
        raise ValueError(f"GPIS model file truncated: {len(blob)} bytes, expected {expected}")
    offset = 12
    locations = np.frombuffer(blob, dtype="<f8", count=3 * n, offset=offset).reshape(n, 3).copy()
    offset += 3 * n * 8
    targets = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).copy()
    offset += n * 8
    raw = np.frombuffer(blob, dtype="<f8", count=5, offset=offset)
    offset += 5 * 8
    factor = np.frombuffer(blob, dtype="<f8", count=n * n, offset=offset).reshape(n, n).copy()

    # Labels are not part of the file format; recover them from the targets
    # (interior centroids are indistinguishable from inside points, which is
    # fine since downstream consumers only rely on the surface label).
    labels = np.where(
        targets == 0.0, LABEL_SURFACE, np.where(targets > 0.0, LABEL_OUTSIDE, LABEL_INSIDE)
    ).astype(np.int8)
    cset = ConditioningSet(locations, targets, labels)
    params = KernelParams(raw[0], raw[1], raw[2], raw[3])
    centered = targets - params.prior_mean
    alpha = solve_triangular(
        factor.T,
        solve_triangular(factor, centered, lower=True, check_finite=False),
        lower=False,
        check_finite=False,
    )
    return GPISModel(cset, params, factor, alpha, float(raw[4]))
