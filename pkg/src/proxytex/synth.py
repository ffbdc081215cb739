"""Synthetic eyeglasses dataset: parametric instances, an analytic
ground-truth renderer with view-dependent shading, and the dataset writer.

Each instance is a flat front frame in the z = 0 plane (rounded-rectangle
rims around two semi-transparent tinted lenses plus a bridge) and two flat
temple bars in the x = +-tx planes extending toward -z. Shading is
Lambertian plus a view-dependent specular lobe whose strength is an
instance parameter, so appearance genuinely changes with viewpoint. Alpha
is analytic: rim/bridge/temple pixels 1, lens pixels the tint alpha,
background 0, with fractional values only on the 1-px anti-aliasing band
produced by 4x supersampling.

The renderer intersects camera rays with the three planes directly and
composites front-to-back; it shares no code with the proxy rasterizer, so
it doubles as an independent oracle for the rendering stack.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, DatasetInstance, ViewRecord, write_manifest
from .geometry import (
    Aabb,
    CameraIntrinsics,
    Pose,
    ProxyMesh,
    ViewDirection,
    carve_visual_hull,
    extract_planar_proxy,
    save_proxy_obj,
)
from .imaging import RgbaImage, write_image

# Frame geometry shared by every instance (scene units).
LENS_CX = 0.26
LENS_HW = 0.20
LENS_HH = 0.13
LENS_CORNER = 0.07
BRIDGE_HW = 0.075
BRIDGE_HH = 0.02
BRIDGE_Y = 0.045
BRIDGE_CORNER = 0.012
TEMPLE_HALF_H = 0.018
TEMPLE_Y = 0.035
TEMPLE_Z_HI = -0.005
FRONT_Z = 0.0

# Shading constants; the light direction has no x component so frontal
# views of (symmetric) instances stay left/right symmetric.
LIGHT_DIR = np.array([0.0, 0.35, 0.92])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35
DIFFUSE = 0.65
SPEC_COEF = 0.6
SPEC_POWER = 24.0

SUPERSAMPLE = 2  # 2x2 subsamples per pixel


@dataclass
class InstanceSpec:
    """Parameters of one synthetic eyeglasses instance."""

    seed: int
    frame_color: tuple[float, float, float]
    rim_thickness: float
    lens_tint: tuple[float, float, float, float]
    temple_length: float
    decal_id: int
    specular: float

    def __post_init__(self) -> None:
        if self.rim_thickness <= 0:
            raise ValueError("rim_thickness must be positive")
        if not (0.0 <= self.lens_tint[3] <= 1.0):
            raise ValueError("lens tint alpha must lie in [0, 1]")

    @property
    def temple_x(self) -> float:
        return LENS_CX + LENS_HW + self.rim_thickness

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "InstanceSpec":
        d = dict(d)
        d["frame_color"] = tuple(d["frame_color"])
        d["lens_tint"] = tuple(d["lens_tint"])
        return InstanceSpec(**d)


def generate_instance(seed: int) -> InstanceSpec:
    """Deterministic instance parameters drawn from documented ranges.

    frame color: HSV with s in [0.4, 0.9], v in [0.25, 0.8]; rim thickness
    [0.025, 0.05]; lens tint rgb in [0.2, 0.9] with alpha [0.15, 0.5];
    temple length [0.5, 0.85]; decal id {0..3}; specular [0, 1].
    """
    rng = np.random.default_rng(seed)
    hue = rng.uniform(0.0, 1.0)
    sat = rng.uniform(0.4, 0.9)
    val = rng.uniform(0.25, 0.8)
    frame_color = colorsys.hsv_to_rgb(hue, sat, val)
    return InstanceSpec(
        seed=seed,
        frame_color=tuple(round(c, 6) for c in frame_color),
        rim_thickness=float(rng.uniform(0.025, 0.05)),
        lens_tint=(
            float(rng.uniform(0.2, 0.9)),
            float(rng.uniform(0.2, 0.9)),
            float(rng.uniform(0.2, 0.9)),
            float(rng.uniform(0.15, 0.5)),
        ),
        temple_length=float(rng.uniform(0.5, 0.85)),
        decal_id=int(rng.integers(0, 4)),
        specular=float(rng.uniform(0.0, 1.0)),
    )


def _rounded_rect_sdf(px, py, cx, cy, hw, hh, r):
    qx = np.abs(px - cx) - (hw - r)
    qy = np.abs(py - cy) - (hh - r)
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside - r


def _decal_factor(x, y, decal_id: int):
    if decal_id == 0:
        return np.ones_like(x)
    if decal_id == 1:
        return 1.0 + 0.35 * np.cos(np.abs(x) * 2 * np.pi / 0.07)
    if decal_id == 2:
        return 1.0 + 0.35 * np.cos(y * 2 * np.pi / 0.05)
    # Dot grid, symmetric in x.
    dots = (np.cos(np.abs(x) * 2 * np.pi / 0.06)
            * np.cos(y * 2 * np.pi / 0.06)) > 0.3
    return np.where(dots, 0.65, 1.1)


def _front_material(x, y, spec: InstanceSpec):
    """Albedo (..., 3) and alpha (...) of the front-frame plane."""
    d_left = _rounded_rect_sdf(x, y, -LENS_CX, 0.0, LENS_HW, LENS_HH, LENS_CORNER)
    d_right = _rounded_rect_sdf(x, y, LENS_CX, 0.0, LENS_HW, LENS_HH, LENS_CORNER)
    d_lens = np.minimum(d_left, d_right)
    d_bridge = _rounded_rect_sdf(x, y, 0.0, BRIDGE_Y, BRIDGE_HW, BRIDGE_HH,
                                 BRIDGE_CORNER)
    frame = ((d_lens > 0) & (d_lens <= spec.rim_thickness)) | (d_bridge <= 0)
    lens = (d_lens <= 0) & ~frame

    albedo = np.zeros((*x.shape, 3))
    alpha = np.zeros_like(x)
    factor = np.clip(_decal_factor(x, y, spec.decal_id), 0.5, 1.5)
    frame_rgb = np.clip(
        np.asarray(spec.frame_color) * factor[..., None], 0.0, 1.0
    )
    albedo[frame] = frame_rgb[frame]
    alpha[frame] = 1.0
    albedo[lens] = np.asarray(spec.lens_tint[:3])
    alpha[lens] = spec.lens_tint[3]
    return albedo, alpha


def _temple_material(zc, y, spec: InstanceSpec):
    z_lo = -spec.temple_length
    hit = (zc >= z_lo) & (zc <= TEMPLE_Z_HI) & \
          (np.abs(y - TEMPLE_Y) <= TEMPLE_HALF_H)
    albedo = np.zeros((*zc.shape, 3))
    albedo[hit] = np.asarray(spec.frame_color)
    return albedo, hit.astype(np.float64)


def _shade_plane(albedo, alpha, normal_vec, view_dirs, specular: float):
    """Shade hits on one plane. ``view_dirs`` (..., 3) point into the scene."""
    n = np.asarray(normal_vec, dtype=np.float64)
    ndotv = view_dirs @ n
    # Normal facing the viewer: opposite to the ray direction.
    sign = np.where(ndotv > 0, -1.0, 1.0)[..., None]
    nrm = sign * n
    ndotl = np.clip(nrm @ LIGHT_DIR, 0.0, None)
    shade = AMBIENT + DIFFUSE * ndotl
    # reflect(L) about the facing normal; lobe toward the viewer.
    refl = 2.0 * (nrm @ LIGHT_DIR)[..., None] * nrm - LIGHT_DIR
    v = -view_dirs / np.linalg.norm(view_dirs, axis=-1, keepdims=True)
    spec_lobe = np.clip((refl * v).sum(axis=-1), 0.0, None) ** SPEC_POWER
    rgb = albedo * shade[..., None] + specular * SPEC_COEF * spec_lobe[..., None]
    return np.clip(rgb, 0.0, 1.0), alpha


def render_ground_truth(spec: InstanceSpec, pose: Pose,
                        intr: CameraIntrinsics) -> RgbaImage:
    """Analytic render of one instance: straight-alpha RGBA."""
    h, w = intr.height, intr.width
    ss = SUPERSAMPLE
    cols = (np.arange(w * ss) + 0.5) / ss
    rows = (np.arange(h * ss) + 0.5) / ss
    u, v = np.meshgrid(cols, rows)
    d_cam = np.stack([
        (u - intr.principal_x) / intr.focal_x,
        (v - intr.principal_y) / intr.focal_y,
        np.ones_like(u),
    ], axis=-1)
    rot_inv = pose.rotation.T
    d_world = d_cam @ rot_inv.T
    origin = pose.camera_center()

    # Candidate hits: (depth t, premul-ready rgb, alpha). t is the
    # camera-space z of the hit because d_cam has unit z.
    hits = []

    def add_plane(axis: int, plane_offset: float, material):
        denom = d_world[..., axis]
        safe = np.abs(denom) > 1e-12
        t = np.where(safe, (plane_offset - origin[axis]) / np.where(safe, denom, 1.0),
                     -1.0)
        valid = safe & (t > 1e-6)
        pts = origin + t[..., None] * d_world
        albedo, alpha = material(pts)
        alpha = np.where(valid, alpha, 0.0)
        if not np.any(alpha > 0):
            return
        normal = np.zeros(3)
        normal[axis] = 1.0
        rgb, alpha = _shade_plane(albedo, alpha, normal, d_world, spec.specular)
        hits.append((np.where(alpha > 0, t, np.inf), rgb, alpha))

    add_plane(2, FRONT_Z, lambda p: _front_material(p[..., 0], p[..., 1], spec))
    add_plane(0, -spec.temple_x, lambda p: _temple_material(p[..., 2], p[..., 1], spec))
    add_plane(0, spec.temple_x, lambda p: _temple_material(p[..., 2], p[..., 1], spec))

    premul = np.zeros((h * ss, w * ss, 3))
    transmit = np.ones((h * ss, w * ss))
    if hits:
        depth = np.stack([t for t, _, _ in hits])
        rgbs = np.stack([r for _, r, _ in hits])
        alphas = np.stack([a for _, _, a in hits])
        order = np.argsort(depth, axis=0)
        for rank in range(len(hits)):
            sel = np.take_along_axis(depth, order[rank:rank + 1], axis=0)[0]
            live = np.isfinite(sel)
            rgb = np.take_along_axis(
                rgbs, order[rank][None, ..., None], axis=0)[0]
            alpha = np.take_along_axis(alphas, order[rank][None], axis=0)[0]
            contrib = np.where(live, transmit * alpha, 0.0)
            premul += contrib[..., None] * rgb
            transmit *= np.where(live, 1.0 - alpha, 1.0)

    # Average subsamples in premultiplied space, then return straight alpha.
    premul = premul.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))
    alpha = (1.0 - transmit).reshape(h, ss, w, ss).mean(axis=(1, 3))
    straight = premul / np.maximum(alpha[..., None], 1e-9)
    straight = np.clip(straight, 0.0, 1.0)
    straight[alpha < 1e-9] = 0.0
    return RgbaImage(rgb=straight, alpha=np.clip(alpha, 0.0, 1.0),
                     premultiplied=False)


# -- proxies ---------------------------------------------------------------


def _rect_mesh(corners: np.ndarray) -> ProxyMesh:
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return ProxyMesh(vertices=corners, triangles=[[0, 1, 2], [0, 2, 3]], uvs=uvs)


def analytic_proxies(spec: InstanceSpec, margin: float = 0.03) -> dict[str, ProxyMesh]:
    """Ground-truth planar billboards derived from instance geometry."""
    x_hi = spec.temple_x + margin
    y_hi = max(LENS_HH + spec.rim_thickness, BRIDGE_Y + BRIDGE_HH) + margin
    y_lo = -(LENS_HH + spec.rim_thickness) - margin
    front = _rect_mesh(np.array([
        [-x_hi, y_lo, FRONT_Z],
        [x_hi, y_lo, FRONT_Z],
        [x_hi, y_hi, FRONT_Z],
        [-x_hi, y_hi, FRONT_Z],
    ]))
    z_lo = -spec.temple_length - margin
    z_hi = margin
    ty_lo = TEMPLE_Y - TEMPLE_HALF_H - margin
    ty_hi = TEMPLE_Y + TEMPLE_HALF_H + margin
    left = _rect_mesh(np.array([
        [-spec.temple_x, ty_lo, z_lo],
        [-spec.temple_x, ty_lo, z_hi],
        [-spec.temple_x, ty_hi, z_hi],
        [-spec.temple_x, ty_hi, z_lo],
    ]))
    right = _rect_mesh(np.array([
        [spec.temple_x, ty_lo, z_hi],
        [spec.temple_x, ty_lo, z_lo],
        [spec.temple_x, ty_hi, z_lo],
        [spec.temple_x, ty_hi, z_hi],
    ]))
    return {"front": front, "left": left, "right": right}


def scene_roi(spec: InstanceSpec, pad: float = 0.1) -> Aabb:
    x_hi = spec.temple_x + pad
    y_hi = max(LENS_HH + spec.rim_thickness, BRIDGE_Y + BRIDGE_HH) + pad
    return Aabb(
        min_corner=(-x_hi, -y_hi, -spec.temple_length - pad),
        max_corner=(x_hi, y_hi, pad),
    )


def hull_proxies(spec: InstanceSpec, masks, poses, intr: CameraIntrinsics,
                 resolution: int = 64) -> dict[str, ProxyMesh]:
    """Billboards from silhouette carving, mimicking a capture pipeline."""
    roi = scene_roi(spec)
    hull = carve_visual_hull(masks, poses, intr, roi, resolution=resolution)
    band = 0.12
    front_roi = Aabb(
        min_corner=(roi.min_corner[0], roi.min_corner[1], -band),
        max_corner=(roi.max_corner[0], roi.max_corner[1], roi.max_corner[2]),
    )
    left_roi = Aabb(
        min_corner=(-spec.temple_x - band, roi.min_corner[1], roi.min_corner[2]),
        max_corner=(-spec.temple_x + band, roi.max_corner[1], roi.max_corner[2]),
    )
    right_roi = Aabb(
        min_corner=(spec.temple_x - band, roi.min_corner[1], roi.min_corner[2]),
        max_corner=(spec.temple_x + band, roi.max_corner[1], roi.max_corner[2]),
    )
    return {
        "front": extract_planar_proxy(hull, ViewDirection.FRONT, front_roi),
        "left": extract_planar_proxy(hull, ViewDirection.LEFT, left_roi),
        "right": extract_planar_proxy(hull, ViewDirection.RIGHT, right_roi),
    }


# -- dataset construction ----------------------------------------------------


def default_intrinsics(image_size: int = 128, distance: float = 2.3) -> CameraIntrinsics:
    focal = 0.75 * image_size * distance
    return CameraIntrinsics(
        focal_x=focal, focal_y=focal,
        principal_x=image_size / 2, principal_y=image_size / 2,
        width=image_size, height=image_size,
        near=distance - 1.2, far=distance + 1.2,
    )


def pose_grid(n_views: int, yaw_range: float = 24.0, pitch_range: float = 24.0,
              distance: float = 2.3) -> list[tuple[float, float, Pose]]:
    """Inclusive grid over yaw x pitch; n_views=4 lands on the range corners."""
    gx = max(1, int(round(math.sqrt(n_views))))
    gy = max(1, math.ceil(n_views / gx))
    yaws = np.linspace(-yaw_range, yaw_range, gx) if gx > 1 else np.array([0.0])
    pitches = np.linspace(-pitch_range, pitch_range, gy) if gy > 1 else np.array([0.0])
    out = []
    for pitch in pitches:
        for yaw in yaws:
            if len(out) == n_views:
                return out
            out.append((float(yaw), float(pitch),
                        Pose.orbit(yaw, pitch, distance)))
    return out


def synthesize_dataset(n_instances: int, n_views: int, *,
                       image_size: int = 128, yaw_range: float = 24.0,
                       pitch_range: float = 24.0, distance: float = 2.3,
                       seed: int = 0, proxy_source: str = "analytic",
                       hull_resolution: int = 64,
                       carve_views: int = 12) -> Dataset:
    """Fully in-memory dataset (no files). ``proxy_source`` picks which
    billboards ("hull" or "analytic") feed training; both are attached."""
    if proxy_source not in ("hull", "analytic"):
        raise ValueError("proxy_source must be 'hull' or 'analytic'")
    intr = default_intrinsics(image_size, distance)
    grid = pose_grid(n_views, yaw_range, pitch_range, distance)
    instances = []
    for i in range(n_instances):
        spec = generate_instance(seed + i)
        views = []
        for yaw, pitch, pose in grid:
            img = render_ground_truth(spec, pose, intr)
            views.append(ViewRecord(pose=pose, yaw_deg=yaw, pitch_deg=pitch,
                                    distance=distance, image=img))
        analytic = analytic_proxies(spec)
        if proxy_source == "hull":
            step = max(1, len(views) // carve_views)
            picks = list(range(0, len(views), step))[:carve_views]
            if len(picks) < 2:
                picks = list(range(min(2, len(views))))
            masks = [views[p].image.alpha for p in picks]
            poses = [views[p].pose for p in picks]
            training = hull_proxies(spec, masks, poses, intr,
                                    resolution=hull_resolution)
        else:
            training = analytic
        instances.append(DatasetInstance(
            instance_id=f"inst_{i:04d}",
            proxies=training,
            views=views,
            spec=spec,
            analytic_proxies=analytic,
            seed=seed + i,
        ))
    return Dataset(
        intrinsics=intr,
        proxy_roles=["front", "left", "right"],
        instances=instances,
        pose_ranges={"yaw_deg": yaw_range, "pitch_deg": pitch_range,
                     "distance": distance},
    )


def build_dataset(out_dir, n_instances: int, n_views: int, *,
                  image_size: int = 128, yaw_range: float = 24.0,
                  pitch_range: float = 24.0, distance: float = 2.3,
                  seed: int = 0, proxy_source: str = "hull",
                  hull_resolution: int = 64, carve_views: int = 12,
                  bit_depth: int = 8) -> Dataset:
    """Generate, write to disk (images + proxies + manifest), and reload.

    Both hull-derived and analytic proxies are written; ``proxy_source``
    decides which set the manifest wires into training.
    """
    from .dataset import load_dataset

    mem = synthesize_dataset(
        n_instances, n_views, image_size=image_size, yaw_range=yaw_range,
        pitch_range=pitch_range, distance=distance, seed=seed,
        proxy_source=proxy_source, hull_resolution=hull_resolution,
        carve_views=carve_views,
    )
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rel_paths: dict = {}
    for inst in mem.instances:
        img_dir = root / "images" / inst.instance_id
        img_dir.mkdir(parents=True, exist_ok=True)
        proxy_dir = root / "proxies" / inst.instance_id
        proxy_dir.mkdir(parents=True, exist_ok=True)
        for v_idx, view in enumerate(inst.views):
            rel = f"images/{inst.instance_id}/view_{v_idx:04d}.png"
            write_image(view.image, root / rel, bit_depth=bit_depth)
            rel_paths[(inst.instance_id, "view", v_idx)] = rel
        suffix = "hull" if proxy_source == "hull" else "analytic"
        for role in mem.proxy_roles:
            rel = f"proxies/{inst.instance_id}/{role}_{suffix}.obj"
            save_proxy_obj(inst.proxies[role], root / rel)
            rel_paths[(inst.instance_id, "proxy", role)] = rel
            rel_a = f"proxies/{inst.instance_id}/{role}_analytic.obj"
            save_proxy_obj(inst.analytic_proxies[role], root / rel_a)
            rel_paths[(inst.instance_id, "analytic", role)] = rel_a
    write_manifest(mem, root, rel_paths)
    return load_dataset(root)
