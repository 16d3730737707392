"""File formats used by the pipeline: PFM rasters, PGM/PPM images, ASCII PLY
point sets, camera lists, sparse depth tables and key=value manifests.

Every write goes through a temp-file + rename so partially written artifacts
never appear under their final name.
"""

import os
import tempfile

import numpy as np

from .align import SparseDepth
from .sdfrender import CameraModel
from .splat import SplatCloud


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# PFM (single-channel float), bottom-up rows, little-endian via scale -1.0
# ---------------------------------------------------------------------------

def write_pfm(path, image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError("PFM writer expects a single-channel image")
    header = f"Pf\n{image.shape[1]} {image.shape[0]}\n-1.0\n".encode("ascii")
    atomic_write_bytes(path, header + image[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError("not a grayscale PFM file")
        width, height = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(width * height * 4), dtype=dtype)
    return data.reshape(height, width)[::-1].astype(np.float64)


# ---------------------------------------------------------------------------
# PGM (P5) and PPM (P6), 8-bit binary
# ---------------------------------------------------------------------------

def write_pgm(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("PGM writer expects uint8 data")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + image.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError("not a binary PGM file")
        width, height = map(int, fh.readline().split())
        fh.readline()
        data = np.frombuffer(fh.read(width * height), dtype=np.uint8)
    return data.reshape(height, width).copy()


def write_ppm(path, image):
    """Write an HxWx3 float image in [0, 1] as binary P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM writer expects an HxWx3 image")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + quantized.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError("not a binary PPM file")
        width, height = map(int, fh.readline().split())
        fh.readline()
        data = np.frombuffer(fh.read(width * height * 3), dtype=np.uint8)
    return data.reshape(height, width, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# ASCII PLY
# ---------------------------------------------------------------------------

def write_touch_ply(path, points, normals):
    points = np.atleast_2d(points)
    normals = np.atleast_2d(normals)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property float64 x",
        "property float64 y",
        "property float64 z",
        "property float64 nx",
        "property float64 ny",
        "property float64 nz",
        "end_header",
    ]
    for p, n in zip(points, normals):
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_ply_rows(path, expected_props):
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        count = None
        props = []
        for line in fh:
            token = line.strip()
            if token == "end_header":
                break
            if token.startswith("element vertex"):
                count = int(token.split()[-1])
            elif token.startswith("property"):
                props.append(token.split()[-1])
        if count is None:
            raise ValueError("PLY header missing vertex element")
        if props != list(expected_props):
            raise ValueError(f"PLY properties {props} do not match {list(expected_props)}")
        if count == 0:
            return np.empty((0, len(props)))
        rows = np.loadtxt(fh, dtype=np.float64, max_rows=count, ndmin=2)
    if rows.shape[0] != count:
        raise ValueError("PLY vertex count does not match data rows")
    return rows


def read_touch_ply(path):
    """Read one touch file; returns (points, normals)."""
    rows = _read_ply_rows(path, ("x", "y", "z", "nx", "ny", "nz"))
    return rows[:, :3], rows[:, 3:6]


def write_splat_ply(path, cloud: SplatCloud):
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float64 x",
        "property float64 y",
        "property float64 z",
        "property float64 r",
        "property float64 g",
        "property float64 b",
        "property float64 opacity",
        "property float64 radius",
        "end_header",
    ]
    alphas = cloud.opacities
    for i in range(len(cloud)):
        p = cloud.positions[i]
        c = cloud.colors[i]
        lines.append(
            f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
            f"{c[0]:.17g} {c[1]:.17g} {c[2]:.17g} "
            f"{alphas[i]:.17g} {cloud.radii[i]:.17g}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_splat_ply(path, background=(0.0, 0.0, 0.0)) -> SplatCloud:
    rows = _read_ply_rows(path, ("x", "y", "z", "r", "g", "b", "opacity", "radius"))
    alphas = np.clip(rows[:, 6], 1e-12, 1.0 - 1e-12)
    logits = np.log(alphas / (1.0 - alphas))
    return SplatCloud(rows[:, :3], rows[:, 3:6], logits, rows[:, 7], np.asarray(background))


# ---------------------------------------------------------------------------
# Camera list: per view a name, image size, intrinsics and a 4x4 pose
# ---------------------------------------------------------------------------

def write_cameras(path, views):
    """Write an ordered list of (name, CameraModel) pairs."""
    lines = []
    for name, cam in views:
        lines.append(f"view {name}")
        lines.append(f"size {cam.width} {cam.height}")
        lines.append(f"intrinsics {cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g}")
        for row in cam.pose:
            lines.append("pose " + " ".join(f"{x:.17g}" for x in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_cameras(path):
    views = []
    name = None
    size = None
    intr = None
    pose_rows = []

    def flush():
        if name is None:
            return
        if size is None or intr is None or len(pose_rows) != 4:
            raise ValueError(f"camera block {name!r} is incomplete")
        pose = np.array(pose_rows)
        views.append((name, CameraModel(intr[0], intr[1], intr[2], intr[3],
                                        size[0], size[1], pose)))

    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            token = raw.split()
            if not token:
                continue
            if token[0] == "view":
                flush()
                name, size, intr, pose_rows = token[1], None, None, []
            elif token[0] == "size":
                size = (int(token[1]), int(token[2]))
            elif token[0] == "intrinsics":
                intr = tuple(float(x) for x in token[1:5])
            elif token[0] == "pose":
                pose_rows.append([float(x) for x in token[1:5]])
            else:
                raise ValueError(f"unknown camera-file directive {token[0]!r}")
    flush()
    return views


# ---------------------------------------------------------------------------
# Sparse depth tables ("u v depth" rows) and key=value manifests
# ---------------------------------------------------------------------------

def write_sparse_depth(path, sparse: SparseDepth):
    lines = [
        f"{int(u)} {int(v)} {d:.17g}" for (u, v), d in zip(sparse.pixels, sparse.depths)
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_sparse_depth(path, source="sensor") -> SparseDepth:
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return SparseDepth(rows[:, :2].astype(np.int64), rows[:, 2], source=source)


def write_keyvalues(path, mapping):
    lines = [f"{key} = {value}" for key, value in mapping.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_keyvalues(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed line in {path}: {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
