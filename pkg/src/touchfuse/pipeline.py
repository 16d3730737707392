"""Pipeline stages chaining simulate -> fit -> render -> align -> fuse ->
init -> train -> eval over one scene configuration.

Each stage reads files, writes files atomically, and is skipped on rerun
when a manifest of content hashes proves its inputs, parameters and outputs
are all unchanged. Artifact content never embeds absolute paths, so two runs
of the same scene in different directories are byte-identical.
"""

import hashlib
import json
import math
import os

import numpy as np

from . import align as align_mod
from . import fileio, fuse, geometry, gpis, metrics, sdfrender, splat, touchsim
from .config import AUTO, SceneConfig
from .errors import DependencyError

STAGE_ORDER = (
    "simulate",
    "gpis-fit",
    "gpis-render",
    "align",
    "fuse",
    "init-points",
    "train",
    "eval",
)

MONO_SCALE = 2.5
MONO_OFFSET = 0.3
LIGHT_DIR = np.array([0.4, -0.3, 0.9]) / np.linalg.norm([0.4, -0.3, 0.9])


def _view_names(n):
    return [f"view{i:03d}" for i in range(n)]


def _dataset_path(cfg, *parts):
    return os.path.join(cfg.dataset, *parts)


def _out_path(cfg, *parts):
    return os.path.join(cfg.out, *parts)


def _camera_views(cfg):
    path = _dataset_path(cfg, "cameras.txt")
    if not os.path.exists(path):
        raise DependencyError("cameras.txt missing; run the simulate stage first")
    return fileio.read_cameras(path)


def _scene_record(cfg):
    path = _dataset_path(cfg, "scene.cfg")
    if not os.path.exists(path):
        raise DependencyError("scene.cfg missing; run the simulate stage first")
    return fileio.read_keyvalues(path)


def _shape_from_record(record):
    size = tuple(float(tok) for tok in record["size"].split())
    return touchsim.AnalyticShape(record["shape"], size)


def _touch_files(cfg):
    directory = _dataset_path(cfg, "touches")
    if not os.path.isdir(directory):
        raise DependencyError("touch data missing; run the simulate stage first")
    return [os.path.join(directory, name) for name in sorted(os.listdir(directory))
            if name.endswith(".ply")]


def _load_touches(cfg):
    readings = []
    for path in _touch_files(cfg):
        points, normals = fileio.read_touch_ply(path)
        readings.append(gpis.TouchReading(points, normals))
    if not readings:
        raise DependencyError("no touch files found; run the simulate stage first")
    return readings


def _bounding_radius(points):
    center = points.mean(axis=0)
    return float(np.max(np.linalg.norm(points - center, axis=1)))


def _resolve(value, auto_value):
    return auto_value if value == AUTO else value


def _kernel_params(cfg, radius):
    k = cfg.section("kernel")
    return gpis.KernelParams(
        k["length_scale"],
        k["output_scale"],
        k["noise"],
        _resolve(k["prior_mean"], 0.5 * radius),
    )


def _march_params(cfg, radius):
    m = cfg.section("march")
    return sdfrender.MarchParams(
        m["step_fraction"],
        _resolve(m["min_step"], 1e-3 * radius),
        _resolve(m["hit_tol"], 1e-4 * radius),
        m["max_steps"],
        m["t_max"],
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_simulate(cfg: SceneConfig):
    sim = cfg.section("sim")
    shape = touchsim.AnalyticShape(sim["shape"], sim["size"])
    seed = cfg.seed
    for sub in ("touches", "sparse", "gt_depth", "rgb", "mono_depth"):
        os.makedirs(_dataset_path(cfg, sub), exist_ok=True)

    noise = touchsim.NoiseModel(sim["touch_noise"], sim["normal_noise"], sim["sparse_noise"])
    touches = touchsim.sample_touches(
        shape, sim["touches"], sim["patch_radius"], sim["points_per_touch"], noise, seed=seed
    )
    for i, touch in enumerate(touches):
        fileio.write_touch_ply(
            _dataset_path(cfg, "touches", f"touch{i:03d}.ply"), touch.points, touch.normals
        )

    width, height = sim["width"], sim["height"]
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    names = _view_names(sim["views"])
    cameras = []
    for i, name in enumerate(names):
        angle = 2.0 * math.pi * i / sim["views"]
        eye = np.array([
            sim["orbit_radius"] * math.cos(angle),
            sim["orbit_radius"] * math.sin(angle),
            sim["orbit_height"],
        ])
        pose = geometry.look_at(eye, np.zeros(3))
        cameras.append((name, sdfrender.CameraModel(
            sim["focal"], sim["focal"], cx, cy, width, height, pose)))
    fileio.write_cameras(_dataset_path(cfg, "cameras.txt"), cameras)

    object_color = np.asarray(sim["object_color"])
    background_color = np.asarray(sim["background_color"])
    for i, (name, cam) in enumerate(cameras):
        gt_object = touchsim.render_gt_depth(shape, cam)
        scene_depth, rgb = _compose_scene(shape, cam, gt_object, sim["dome_radius"],
                                          object_color, background_color)
        fileio.write_pfm(_dataset_path(cfg, "gt_depth", f"{name}.pfm"), scene_depth)
        fileio.write_ppm(_dataset_path(cfg, "rgb", f"{name}.ppm"), rgb)

        # Synthetic monocular stand-in: the affine-inverted scene depth with
        # the object pushed back, mimicking a metrically wrong estimator.
        vision_depth = scene_depth + sim["vision_bias"] * gt_object.hit_mask
        raw = (vision_depth - MONO_OFFSET) / MONO_SCALE
        fileio.write_pfm(_dataset_path(cfg, "mono_depth", f"{name}.pfm"), raw)

        scene_image = sdfrender.DepthVarImage(scene_depth, np.zeros_like(scene_depth), cam)
        sparse = touchsim.make_sparse_depth(
            scene_image, sim["sparse_fraction"], noise, seed=seed + 1000 + i
        )
        fileio.write_sparse_depth(_dataset_path(cfg, "sparse", f"{name}.txt"), sparse)

    record = {
        "shape": sim["shape"],
        "size": " ".join(f"{s:.17g}" for s in shape.size),
        "dome_radius": f"{sim['dome_radius']:.17g}",
        "seed": str(seed),
        "touch_noise": f"{sim['touch_noise']:.17g}",
        "normal_noise": f"{sim['normal_noise']:.17g}",
        "sparse_noise": f"{sim['sparse_noise']:.17g}",
        "vision_bias": f"{sim['vision_bias']:.17g}",
        "mono_scale": f"{MONO_SCALE:.17g}",
        "mono_offset": f"{MONO_OFFSET:.17g}",
        "object_color": " ".join(f"{c:.17g}" for c in object_color),
        "background_color": " ".join(f"{c:.17g}" for c in background_color),
    }
    fileio.write_keyvalues(_dataset_path(cfg, "scene.cfg"), record)


def _compose_scene(shape, camera, gt_object, dome_radius, object_color, background_color):
    """Scene depth = object where hit else enclosing dome; flat-shaded RGB."""
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack([(us - camera.cx) / camera.fx, (vs - camera.cy) / camera.fy,
                      np.ones_like(us)], axis=-1).reshape(-1, 3)
    norms = np.linalg.norm(d_cam, axis=1)
    dirs = (d_cam / norms[:, None]) @ camera.rotation.T
    axis_cos = 1.0 / norms

    origin = camera.position
    b = dirs @ origin
    c = float(origin @ origin) - dome_radius ** 2
    t_dome = -b + np.sqrt(b * b - c)
    dome_depth = (t_dome * axis_cos).reshape(h, w)

    hit = gt_object.hit_mask
    depth = np.where(hit, gt_object.depth, dome_depth)

    rgb = np.empty((h, w, 3))
    rgb[:] = background_color
    ys, xs = np.nonzero(hit)
    if xs.size:
        d = gt_object.depth[ys, xs]
        pts_cam = np.stack([(xs - camera.cx) / camera.fx * d,
                            (ys - camera.cy) / camera.fy * d, d], axis=1)
        pts = pts_cam @ camera.rotation.T + camera.position
        normals = touchsim.sdf_gradient(shape, pts)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        shade = 0.25 + 0.75 * np.maximum(normals @ LIGHT_DIR, 0.0)
        rgb[ys, xs] = object_color[None, :] * shade[:, None]
    return depth, rgb


def stage_gpis_fit(cfg: SceneConfig):
    touches = _load_touches(cfg)
    all_points = np.concatenate([t.points for t in touches])
    radius = _bounding_radius(all_points)
    cond = cfg.section("conditioning")
    cset = gpis.build_conditioning_set(
        touches,
        _resolve(cond["surface_offset"], 0.02 * radius),
        _resolve(cond["interior_offset"], 0.01 * radius),
        n_slices=cond["slices"],
        voxel=_resolve(cond["voxel"], radius / 50.0),
    )
    params = _kernel_params(cfg, radius)
    grid = cfg.get("kernel", "rho_grid")
    if grid:
        params = gpis.optimize_hyperparameters(
            cset,
            [(rho, params.output_scale) for rho in grid],
            noise=params.noise,
            prior_mean=params.prior_mean,
            cap=cond["cap"],
        )
    model = gpis.fit(cset, params, cap=cond["cap"])
    gpis.save_model(_out_path(cfg, "gpis.model"), model)


def _load_model(cfg):
    path = _out_path(cfg, "gpis.model")
    if not os.path.exists(path):
        raise DependencyError("gpis.model missing; run the gpis-fit stage first")
    return gpis.load_model(path)


def stage_gpis_render(cfg: SceneConfig):
    model = _load_model(cfg)
    radius = _bounding_radius(model.conditioning.surface_points())
    params = _march_params(cfg, radius)
    sphere = sdfrender.bounding_sphere(
        model.conditioning, cfg.get("march", "margin"), min_radius=params.min_step
    )
    for name, cam in _camera_views(cfg):
        image = sdfrender.render_depth_variance(model, cam, params, sphere=sphere)
        fileio.write_pfm(_out_path(cfg, f"{name}_gpis_depth.pfm"), image.depth)
        fileio.write_pfm(_out_path(cfg, f"{name}_gpis_var.pfm"), image.variance)


def _load_depth_var(cfg, name, prefix):
    depth_path = _out_path(cfg, f"{name}_{prefix}_depth.pfm")
    var_path = _out_path(cfg, f"{name}_{prefix}_var.pfm")
    stage = {"gpis": "gpis-render", "vision": "align", "fused": "fuse"}[prefix]
    if not (os.path.exists(depth_path) and os.path.exists(var_path)):
        raise DependencyError(f"{prefix} images for {name} missing; run the {stage} stage first")
    return fileio.read_pfm(depth_path), fileio.read_pfm(var_path)


def stage_align(cfg: SceneConfig):
    params = cfg.section("align")
    for name, cam in _camera_views(cfg):
        mono_path = _dataset_path(cfg, "mono_depth", f"{name}.pfm")
        sparse_path = _dataset_path(cfg, "sparse", f"{name}.txt")
        if not (os.path.exists(mono_path) and os.path.exists(sparse_path)):
            raise DependencyError(f"monocular/sparse inputs for {name} missing; "
                                  "run the simulate stage first")
        raw = fileio.read_pfm(mono_path)
        sparse = fileio.read_sparse_depth(sparse_path, source="synthetic")
        g_depth, g_var = _load_depth_var(cfg, name, "gpis")
        touch_img = sdfrender.DepthVarImage(g_depth, g_var, cam)
        aligned = align_mod.align_vision(
            raw, sparse, touch_img,
            max_gap=params["max_gap"],
            slope=params["uncertainty_slope"],
            floor=params["uncertainty_floor"],
        )
        fileio.write_pfm(_out_path(cfg, f"{name}_vision_depth.pfm"), aligned.depth)
        fileio.write_pfm(_out_path(cfg, f"{name}_vision_var.pfm"), aligned.variance)
        fileio.write_keyvalues(_out_path(cfg, f"{name}_align.txt"), {
            "s_star": f"{aligned.s_star:.17g}",
            "t_star": f"{aligned.t_star:.17g}",
            "t_gpis": f"{aligned.t_object:.17g}",
        })


def stage_fuse(cfg: SceneConfig):
    for name, cam in _camera_views(cfg):
        v_depth, v_var = _load_depth_var(cfg, name, "vision")
        g_depth, g_var = _load_depth_var(cfg, name, "gpis")
        vision = align_mod.AlignedVision(v_depth, v_var, 1.0, 0.0)
        touch_img = sdfrender.DepthVarImage(g_depth, g_var, cam)
        fused = fuse.fuse_images(vision, touch_img)
        fileio.write_pfm(_out_path(cfg, f"{name}_fused_depth.pfm"), fused.depth)
        fileio.write_pfm(_out_path(cfg, f"{name}_fused_var.pfm"), fused.variance)
        fileio.write_pgm(_out_path(cfg, f"{name}_provenance.pgm"), fused.provenance)


def stage_init_points(cfg: SceneConfig):
    views = _camera_views(cfg)
    images = []
    colors = []
    for name, cam in views:
        g_depth, g_var = _load_depth_var(cfg, name, "gpis")
        image = sdfrender.DepthVarImage(g_depth, g_var, cam)
        images.append(image)
        rgb_path = _dataset_path(cfg, "rgb", f"{name}.ppm")
        if not os.path.exists(rgb_path):
            raise DependencyError(f"rgb image for {name} missing; run the simulate stage first")
        rgb = fileio.read_ppm(rgb_path)
        ys, xs = np.nonzero(image.hit_mask)
        colors.append(rgb[ys, xs])
    points = splat.backproject_init(images)
    colors = np.concatenate(colors, axis=0) if colors else np.empty((0, 3))

    train = cfg.section("train")
    rng = np.random.default_rng(cfg.seed)
    if points.shape[0] > train["max_points"]:
        keep = np.sort(rng.choice(points.shape[0], size=train["max_points"], replace=False))
        points, colors = points[keep], colors[keep]

    cam0 = views[0][1]
    hit_depths = np.concatenate([img.depth[img.hit_mask] for img in images if img.hit_mask.any()])
    median_depth = float(np.median(hit_depths)) if hit_depths.size else 1.0
    radius = _resolve(train["splat_radius"], 1.5 * median_depth / cam0.fx)
    logit = math.log(train["opacity"] / (1.0 - train["opacity"]))
    record = _scene_record(cfg)
    background = np.array([float(t) for t in record["background_color"].split()])
    cloud = splat.SplatCloud(
        points, colors, np.full(points.shape[0], logit), np.full(points.shape[0], radius),
        background,
    )
    fileio.write_splat_ply(_out_path(cfg, "init.ply"), cloud)


def _load_views_for_training(cfg):
    views = []
    for name, cam in _camera_views(cfg):
        rgb_path = _dataset_path(cfg, "rgb", f"{name}.ppm")
        if not os.path.exists(rgb_path):
            raise DependencyError(f"rgb image for {name} missing; run the simulate stage first")
        rgb = fileio.read_ppm(rgb_path)
        f_depth, f_var = _load_depth_var(cfg, name, "fused")
        prov_path = _out_path(cfg, f"{name}_provenance.pgm")
        if not os.path.exists(prov_path):
            raise DependencyError(f"provenance mask for {name} missing; run the fuse stage first")
        provenance = fileio.read_pgm(prov_path)
        fused = fuse.FusedSupervision(f_depth, f_var, provenance)
        views.append((rgb, fused, cam))
    return views


def stage_train(cfg: SceneConfig):
    init_path = _out_path(cfg, "init.ply")
    if not os.path.exists(init_path):
        raise DependencyError("init.ply missing; run the init-points stage first")
    record = _scene_record(cfg)
    background = tuple(float(t) for t in record["background_color"].split())
    cloud = fileio.read_splat_ply(init_path, background=background)
    views = _load_views_for_training(cfg)
    loss_cfg = splat.LossConfig(
        cfg.get("loss", "depth_weight"),
        cfg.get("loss", "sharpness"),
        cfg.get("loss", "decay"),
        cfg.get("loss", "base_weight"),
    )
    log_rows = []
    trained = splat.optimize(
        cloud, views, loss_cfg, cfg.get("train", "iters"),
        step=cfg.get("train", "step"),
        callback=lambda row: log_rows.append(row),
    )
    fileio.write_splat_ply(_out_path(cfg, "splats.ply"), trained)
    lines = ["iter,color_loss,depth_loss,lambda"]
    for row in log_rows:
        lines.append(f"{row['iter']},{row['color_loss']:.12g},"
                     f"{row['depth_loss']:.12g},{row['lam']:.12g}")
    fileio.atomic_write_text(_out_path(cfg, "train_log.csv"), "\n".join(lines) + "\n")


def evaluate_scene(cfg: SceneConfig, cloud=None):
    """Compute the full metric report for the trained cloud."""
    record = _scene_record(cfg)
    shape = _shape_from_record(record)
    if cloud is None:
        splat_path = _out_path(cfg, "splats.ply")
        if not os.path.exists(splat_path):
            raise DependencyError("splats.ply missing; run the train stage first")
        background = tuple(float(t) for t in record["background_color"].split())
        cloud = fileio.read_splat_ply(splat_path, background=background)

    per_view = []
    sq_err_all = []
    sq_err_obj = []
    psnrs = []
    for name, cam in _camera_views(cfg):
        gt_depth_path = _dataset_path(cfg, "gt_depth", f"{name}.pfm")
        rgb_path = _dataset_path(cfg, "rgb", f"{name}.ppm")
        if not (os.path.exists(gt_depth_path) and os.path.exists(rgb_path)):
            raise DependencyError(f"ground truth for {name} missing; run the simulate stage first")
        gt_depth = fileio.read_pfm(gt_depth_path)
        gt_rgb = fileio.read_ppm(rgb_path)
        gt_image = sdfrender.DepthVarImage(gt_depth, np.zeros_like(gt_depth), cam)
        object_mask = touchsim.render_gt_depth(shape, cam).hit_mask

        rgb, depth = splat.render(cloud, cam)
        view_psnr = metrics.psnr(np.clip(rgb, 0.0, 1.0), gt_rgb)
        valid = gt_image.hit_mask & (depth > 0.0)
        view_mse = float(np.mean((depth[valid] - gt_depth[valid]) ** 2)) if valid.any() else math.nan
        obj_valid = valid & object_mask
        view_mse_o = (float(np.mean((depth[obj_valid] - gt_depth[obj_valid]) ** 2))
                      if obj_valid.any() else math.nan)
        psnrs.append(view_psnr)
        sq_err_all.append((depth[valid] - gt_depth[valid]) ** 2)
        sq_err_obj.append((depth[obj_valid] - gt_depth[obj_valid]) ** 2)
        per_view.append((name, view_psnr, view_mse, view_mse_o))

    gt_cloud = touchsim.surface_points(shape, cfg.get("eval", "gt_points"), seed=cfg.seed)
    pred = cloud.positions
    transform = metrics.align_clouds(pred, gt_cloud, iters=cfg.get("eval", "icp_iters"))
    moved = pred @ transform[:3, :3].T + transform[:3, 3]
    report = metrics.EvalReport(
        psnr=float(np.mean(psnrs)),
        d_mse=float(np.mean(np.concatenate(sq_err_all))),
        d_mse_o=float(np.mean(np.concatenate(sq_err_obj))),
        chamfer=metrics.chamfer(moved, gt_cloud),
        hausdorff=metrics.hausdorff(moved, gt_cloud),
        per_view=per_view,
    )
    return report


def stage_eval(cfg: SceneConfig):
    report = evaluate_scene(cfg)
    fileio.atomic_write_text(_out_path(cfg, "eval_report.txt"), report.to_text())
    fileio.atomic_write_text(_out_path(cfg, "eval_report.csv"), report.to_csv())


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "gpis-fit": stage_gpis_fit,
    "gpis-render": stage_gpis_render,
    "align": stage_align,
    "fuse": stage_fuse,
    "init-points": stage_init_points,
    "train": stage_train,
    "eval": stage_eval,
}


# ---------------------------------------------------------------------------
# manifest bookkeeping, locking, orchestration
# ---------------------------------------------------------------------------

def _hash_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _tagged(cfg, path):
    for tag, root in (("dataset", cfg.dataset), ("out", cfg.out)):
        root = os.path.abspath(root)
        ap = os.path.abspath(path)
        if ap.startswith(root + os.sep):
            return f"{tag}:{os.path.relpath(ap, root)}"
    return os.path.abspath(path)


def _stage_inputs(cfg, stage):
    """Existing files a stage consumes (tagged relative paths)."""
    names = []
    cams = _dataset_path(cfg, "cameras.txt")
    if os.path.exists(cams):
        names = [name for name, _ in fileio.read_cameras(cams)]
    paths = []
    if stage == "simulate":
        return paths
    if stage == "gpis-fit":
        touch_dir = _dataset_path(cfg, "touches")
        if os.path.isdir(touch_dir):
            paths.extend(os.path.join(touch_dir, f) for f in sorted(os.listdir(touch_dir))
                         if f.endswith(".ply"))
        return paths
    paths.append(cams)
    if stage == "gpis-render":
        paths.append(_out_path(cfg, "gpis.model"))
    elif stage == "align":
        for name in names:
            paths.append(_dataset_path(cfg, "mono_depth", f"{name}.pfm"))
            paths.append(_dataset_path(cfg, "sparse", f"{name}.txt"))
            paths.append(_out_path(cfg, f"{name}_gpis_depth.pfm"))
            paths.append(_out_path(cfg, f"{name}_gpis_var.pfm"))
    elif stage == "fuse":
        for name in names:
            for prefix in ("gpis", "vision"):
                paths.append(_out_path(cfg, f"{name}_{prefix}_depth.pfm"))
                paths.append(_out_path(cfg, f"{name}_{prefix}_var.pfm"))
    elif stage == "init-points":
        paths.append(_dataset_path(cfg, "scene.cfg"))
        for name in names:
            paths.append(_out_path(cfg, f"{name}_gpis_depth.pfm"))
            paths.append(_out_path(cfg, f"{name}_gpis_var.pfm"))
            paths.append(_dataset_path(cfg, "rgb", f"{name}.ppm"))
    elif stage == "train":
        paths.append(_out_path(cfg, "init.ply"))
        paths.append(_dataset_path(cfg, "scene.cfg"))
        for name in names:
            paths.append(_dataset_path(cfg, "rgb", f"{name}.ppm"))
            paths.append(_out_path(cfg, f"{name}_fused_depth.pfm"))
            paths.append(_out_path(cfg, f"{name}_fused_var.pfm"))
            paths.append(_out_path(cfg, f"{name}_provenance.pgm"))
    elif stage == "eval":
        paths.append(_out_path(cfg, "splats.ply"))
        paths.append(_dataset_path(cfg, "scene.cfg"))
        for name in names:
            paths.append(_dataset_path(cfg, "gt_depth", f"{name}.pfm"))
            paths.append(_dataset_path(cfg, "rgb", f"{name}.ppm"))
    return paths


def _stage_outputs(cfg, stage):
    names = []
    cams = _dataset_path(cfg, "cameras.txt")
    if os.path.exists(cams):
        names = [name for name, _ in fileio.read_cameras(cams)]
    out = []
    if stage == "simulate":
        out.append(_dataset_path(cfg, "cameras.txt"))
        out.append(_dataset_path(cfg, "scene.cfg"))
        touch_dir = _dataset_path(cfg, "touches")
        if os.path.isdir(touch_dir):
            out.extend(os.path.join(touch_dir, f) for f in sorted(os.listdir(touch_dir))
                       if f.endswith(".ply"))
        for name in names:
            out.append(_dataset_path(cfg, "sparse", f"{name}.txt"))
            out.append(_dataset_path(cfg, "gt_depth", f"{name}.pfm"))
            out.append(_dataset_path(cfg, "rgb", f"{name}.ppm"))
            out.append(_dataset_path(cfg, "mono_depth", f"{name}.pfm"))
    elif stage == "gpis-fit":
        out.append(_out_path(cfg, "gpis.model"))
    elif stage == "gpis-render":
        for name in names:
            out.append(_out_path(cfg, f"{name}_gpis_depth.pfm"))
            out.append(_out_path(cfg, f"{name}_gpis_var.pfm"))
    elif stage == "align":
        for name in names:
            out.append(_out_path(cfg, f"{name}_vision_depth.pfm"))
            out.append(_out_path(cfg, f"{name}_vision_var.pfm"))
            out.append(_out_path(cfg, f"{name}_align.txt"))
    elif stage == "fuse":
        for name in names:
            out.append(_out_path(cfg, f"{name}_fused_depth.pfm"))
            out.append(_out_path(cfg, f"{name}_fused_var.pfm"))
            out.append(_out_path(cfg, f"{name}_provenance.pgm"))
    elif stage == "init-points":
        out.append(_out_path(cfg, "init.ply"))
    elif stage == "train":
        out.append(_out_path(cfg, "splats.ply"))
        out.append(_out_path(cfg, "train_log.csv"))
    elif stage == "eval":
        out.append(_out_path(cfg, "eval_report.txt"))
        out.append(_out_path(cfg, "eval_report.csv"))
    return out


_STAGE_PARAM_SECTIONS = {
    "simulate": ("sim",),
    "gpis-fit": ("kernel", "conditioning"),
    "gpis-render": ("march",),
    "align": ("align",),
    "fuse": (),
    "init-points": ("train",),
    "train": ("loss", "train"),
    "eval": ("eval",),
}


def _params_hash(cfg, stage):
    payload = {"seed": cfg.seed, "stage": stage}
    for section in _STAGE_PARAM_SECTIONS[stage]:
        payload[section] = {k: repr(v) for k, v in cfg.section(section).items()}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _load_manifest(cfg):
    path = _out_path(cfg, "manifest.json")
    if not os.path.exists(path):
        return {"version": 1, "stages": {}}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _save_manifest(cfg, manifest):
    fileio.atomic_write_text(
        _out_path(cfg, "manifest.json"),
        json.dumps(manifest, sort_keys=True, indent=1) + "\n",
    )


def _stage_record(cfg, stage):
    inputs = {_tagged(cfg, p): _hash_file(p) for p in _stage_inputs(cfg, stage)
              if os.path.exists(p)}
    outputs = {_tagged(cfg, p): _hash_file(p) for p in _stage_outputs(cfg, stage)
               if os.path.exists(p)}
    return {"params": _params_hash(cfg, stage), "inputs": inputs, "outputs": outputs}


def _can_skip(cfg, stage, manifest):
    record = manifest["stages"].get(stage)
    if record is None:
        return False
    current_inputs = {_tagged(cfg, p): _hash_file(p) for p in _stage_inputs(cfg, stage)
                      if os.path.exists(p)}
    if record["params"] != _params_hash(cfg, stage):
        return False
    if record["inputs"] != current_inputs:
        return False
    for tagged, digest in record["outputs"].items():
        tag, rel = tagged.split(":", 1)
        root = cfg.dataset if tag == "dataset" else cfg.out
        path = os.path.join(root, rel)
        if not os.path.exists(path) or _hash_file(path) != digest:
            return False
    return bool(record["outputs"])


class PipelineLock:
    """One pipeline process per output directory."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            )
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)
        return False


def run_pipeline(cfg: SceneConfig, stages=None):
    """Execute the requested stages in dependency order with hash skipping.

    Returns {stage: "ran" | "skipped"} for the requested stages.
    """
    if stages is None:
        stages = STAGE_ORDER
    unknown = set(stages) - set(STAGE_ORDER)
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    ordered = [s for s in STAGE_ORDER if s in set(stages)]
    os.makedirs(cfg.out, exist_ok=True)
    status = {}
    with PipelineLock(cfg.out):
        manifest = _load_manifest(cfg)
        for stage in ordered:
            if _can_skip(cfg, stage, manifest):
                status[stage] = "skipped"
                continue
            STAGE_FUNCS[stage](cfg)
            manifest["stages"][stage] = _stage_record(cfg, stage)
            _save_manifest(cfg, manifest)
            status[stage] = "ran"
    return status
