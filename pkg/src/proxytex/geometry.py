"""Camera math, proxy meshes, and proxy generation from silhouettes.

Conventions: world is right-handed with y up; the object sits near the
origin with its front facing +z. Camera space follows the usual computer
vision frame (x right, y down, z forward); ``Pose`` maps world points into
that frame. Pixel coordinates are continuous with the origin at the
top-left image corner, so the center of pixel (row, col) is
(col + 0.5, row + 0.5).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateInputError,
    EmptyHullError,
    EmptyRegionError,
    ObjParseError,
)

_MIN_TRIANGLE_AREA = 1e-10


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the depth-normalization range."""

    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self) -> None:
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same field of view at a different raster size."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            focal_x=self.focal_x * sx,
            focal_y=self.focal_y * sy,
            principal_x=self.principal_x * sx,
            principal_y=self.principal_y * sy,
            width=width,
            height=height,
            near=self.near,
            far=self.far,
        )


@dataclass(frozen=True)
class Pose:
    """Rigid camera-from-world transform: x_cam = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant must be +1 within 1e-6")

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into camera space."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> "Pose":
        """Camera at ``eye`` with its optical axis through ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("eye and target coincide")
        forward = forward / norm
        right = np.cross(forward, up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            raise ValueError("up is parallel to the view direction")
        right = right / rnorm
        # CV frame: x right, y down, z forward.
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=0)
        return Pose(rotation, -rotation @ eye)

    @staticmethod
    def orbit(yaw_deg: float, pitch_deg: float, distance: float,
              target=(0.0, 0.0, 0.0)) -> "Pose":
        """Orbit camera looking at ``target`` from the +z hemisphere.

        yaw rotates about the world y axis, pitch elevates; (0, 0) places
        the camera on the +z axis.
        """
        if distance <= 0:
            raise ValueError("distance must be positive")
        yaw = np.deg2rad(yaw_deg)
        pitch = np.deg2rad(pitch_deg)
        target = np.asarray(target, dtype=np.float64)
        offset = distance * np.array([
            np.sin(yaw) * np.cos(pitch),
            np.sin(pitch),
            np.cos(yaw) * np.cos(pitch),
        ])
        return Pose.look_at(target + offset, target)


def rotation_from_quaternion(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to a rotation matrix."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def project(point, pose: Pose, intr: CameraIntrinsics):
    """Pinhole projection of a single world point.

    Returns (pixel (u, v), depth) where depth is camera-space z. Raises
    :class:`BehindCameraError` when the point does not lie strictly in
    front of the camera.
    """
    cam = pose.transform(np.asarray(point, dtype=np.float64).reshape(3))
    z = cam[2]
    if z <= 0:
        raise BehindCameraError(f"point projects to camera z = {z:.6g}")
    u = intr.focal_x * cam[0] / z + intr.principal_x
    v = intr.focal_y * cam[1] / z + intr.principal_y
    return np.array([u, v]), float(z)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by two corners."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if np.any(hi <= lo):
            raise ValueError("box must have positive extent on every axis")

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.min_corner) & (pts <= self.max_corner), axis=-1)


@dataclass
class ProxyMesh:
    """Triangle mesh with per-vertex UVs in [0, 1]^2."""

    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        n = len(self.vertices)
        if len(self.uvs) != n:
            raise ValueError("uvs must be per-vertex")
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= n:
                raise ValueError("triangle index out of range")
        if np.any(self.uvs < -1e-9) or np.any(self.uvs > 1 + 1e-9):
            raise ValueError("uvs must lie in [0, 1]^2")
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        if np.any(areas <= _MIN_TRIANGLE_AREA):
            raise ValueError("degenerate triangle (area below threshold)")


@dataclass
class Plane:
    """Plane {x : normal . x = offset} with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(self.normal)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("normal must be unit length within 1e-9")

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset


@dataclass
class VoxelHull:
    """Boolean occupancy grid; cell (i, j, k) spans origin + voxel_size * [i, i+1) etc."""

    origin: np.ndarray
    voxel_size: float
    occupancy: np.ndarray

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 3:
            raise ValueError("occupancy must be a 3-D grid")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    def centers(self, indices: np.ndarray) -> np.ndarray:
        """World-space centers for integer voxel indices (..., 3)."""
        return self.origin + (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size

    def occupied_count(self) -> int:
        return int(self.occupancy.sum())

    def surface_mask(self) -> np.ndarray:
        """Occupied voxels with at least one unoccupied 6-neighbor.

        Cells outside the grid count as unoccupied.
        """
        occ = self.occupancy
        padded = np.pad(occ, 1, mode="constant", constant_values=False)
        all_neighbors = np.ones_like(occ)
        for axis in range(3):
            for shift in (-1, 1):
                sl = [slice(1, -1)] * 3
                sl[axis] = slice(1 + shift, padded.shape[axis] - 1 + shift)
                all_neighbors &= padded[tuple(sl)]
        return occ & ~all_neighbors


class ViewDirection(Enum):
    """Side from which a planar proxy is extracted."""

    FRONT = "front"
    LEFT = "left"
    RIGHT = "right"


# Per direction: (scan axis, scan sign, unit vector pointing from the viewer
# into the scene). FRONT views from +z, LEFT from -x, RIGHT from +x.
_DIRECTION_TABLE = {
    ViewDirection.FRONT: (2, -1, np.array([0.0, 0.0, -1.0])),
    ViewDirection.LEFT: (0, +1, np.array([1.0, 0.0, 0.0])),
    ViewDirection.RIGHT: (0, -1, np.array([-1.0, 0.0, 0.0])),
}


def carve_visual_hull(masks, poses, intr: CameraIntrinsics, roi: Aabb,
                      resolution: int = 64, threshold: float = 0.1) -> VoxelHull:
    """Voxel carving from silhouette alpha masks.

    A voxel stays occupied iff no view carves it; a view carves a voxel
    when the voxel center projects inside that view's image onto alpha <=
    ``threshold``. Voxels projecting outside an image (or behind its
    camera) are not carved by that view.
    """
    if len(masks) < 2:
        raise ValueError("need at least 2 views to carve")
    if len(masks) != len(poses):
        raise ValueError("masks and poses must pair up")
    extent = roi.max_corner - roi.min_corner
    voxel_size = float(extent.max()) / resolution
    dims = np.maximum(np.ceil(extent / voxel_size - 1e-9).astype(int), 1)
    ii, jj, kk = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    centers = roi.min_corner + (idx + 0.5) * voxel_size

    occupied = np.ones(len(centers), dtype=bool)
    for mask, pose in zip(masks, poses):
        alpha = np.asarray(mask, dtype=np.float64)
        if alpha.shape != (intr.height, intr.width):
            raise ValueError(
                f"mask shape {alpha.shape} does not match intrinsics "
                f"{(intr.height, intr.width)}"
            )
        cam = pose.transform(centers)
        z = cam[:, 2]
        in_front = z > 1e-12
        u = np.zeros_like(z)
        v = np.zeros_like(z)
        u[in_front] = intr.focal_x * cam[in_front, 0] / z[in_front] + intr.principal_x
        v[in_front] = intr.focal_y * cam[in_front, 1] / z[in_front] + intr.principal_y
        col = np.floor(u).astype(int)
        row = np.floor(v).astype(int)
        inside = in_front & (col >= 0) & (col < intr.width) & (row >= 0) & (row < intr.height)
        carved = np.zeros(len(centers), dtype=bool)
        carved[inside] = alpha[row[inside], col[inside]] <= threshold
        occupied &= ~carved

    if not occupied.any():
        raise EmptyHullError("carving removed every voxel")
    grid = np.zeros(dims, dtype=bool)
    grid[idx[occupied, 0], idx[occupied, 1], idx[occupied, 2]] = True
    return VoxelHull(origin=roi.min_corner, voxel_size=voxel_size, occupancy=grid)


def fit_plane(points) -> Plane:
    """Least-squares plane through >= 3 non-collinear points.

    Minimizes the sum of squared point-plane distances: the normal is the
    direction of least variance of the centered points (via SVD).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateInputError(f"need >= 3 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    scale = max(singular[0], 1e-300)
    if singular[1] / scale < 1e-9:
        raise DegenerateInputError("points are collinear")
    normal = vt[2]
    return Plane(normal=normal, offset=float(normal @ centroid))


def extract_planar_proxy(hull: VoxelHull, view_direction: ViewDirection,
                         roi: Aabb) -> ProxyMesh:
    """Planar billboard fitted to the hull surface visible from one side.

    Marches along the view direction within each (u, v) column of the roi,
    keeps the first surface voxel per column, fits a plane to those voxel
    centers, and returns a 2-triangle rectangle on that plane bounding the
    voxels' in-plane projections, with UVs spanning [0, 1]^2.
    """
    axis, sign, into_scene = _DIRECTION_TABLE[view_direction]
    surface = hull.surface_mask()
    idx = np.argwhere(surface)
    if len(idx) == 0:
        raise EmptyRegionError("hull has no surface voxels")
    centers = hull.centers(idx)
    keep = roi.contains(centers)
    idx, centers = idx[keep], centers[keep]
    if len(idx) == 0:
        raise EmptyRegionError("no hull surface voxels inside the roi")

    # First surface voxel per column along the marching direction. sign=-1
    # marches from high indices toward low ones (viewer on the + side), so
    # the first voxel met is the one with the largest index.
    other = [a for a in range(3) if a != axis]
    cols = idx[:, other]
    order_key = idx[:, axis] * sign
    best: dict[tuple[int, int], int] = {}
    for n, (c0, c1) in enumerate(map(tuple, cols)):
        key = (c0, c1)
        prev = best.get(key)
        if prev is None or order_key[n] < order_key[prev]:
            best[key] = n
    chosen = centers[sorted(best.values())]

    plane = fit_plane(chosen)
    normal = plane.normal
    offset = plane.offset
    # Face the viewer: the normal opposes the direction into the scene.
    if normal @ into_scene > 0:
        normal, offset = -normal, -offset

    # In-plane frame with a deterministic orientation per side.
    u_seed = np.array([1.0, 0.0, 0.0]) if axis == 2 else np.array([0.0, 0.0, 1.0])
    e1 = u_seed - (u_seed @ normal) * normal
    e1 /= np.linalg.norm(e1)
    v_seed = np.array([0.0, 1.0, 0.0])
    e2 = v_seed - (v_seed @ normal) * normal - (v_seed @ e1) * e1
    e2 /= np.linalg.norm(e2)

    anchor = normal * offset
    rel = chosen - anchor
    u_coords = rel @ e1
    v_coords = rel @ e2
    pad = hull.voxel_size / 2
    u_lo, u_hi = u_coords.min() - pad, u_coords.max() + pad
    v_lo, v_hi = v_coords.min() - pad, v_coords.max() + pad
    corners = np.array([
        anchor + u_lo * e1 + v_lo * e2,
        anchor + u_hi * e1 + v_lo * e2,
        anchor + u_hi * e1 + v_hi * e2,
        anchor + u_lo * e1 + v_hi * e2,
    ])
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    return ProxyMesh(vertices=corners, triangles=triangles, uvs=uvs)


_FACE_TOKEN = re.compile(r"^(\d+)/(\d+)$")


def save_proxy_obj(mesh: ProxyMesh, path) -> None:
    """Write the v/vt/f subset of OBJ (1-based v/vt index pairs)."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for uv in mesh.uvs:
        lines.append(f"vt {uv[0]:.9g} {uv[1]:.9g}")
    for tri in mesh.triangles:
        a, b, c = (int(i) + 1 for i in tri)
        lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_proxy_obj(path) -> ProxyMesh:
    """Parse the v/vt/f OBJ subset into a mesh with per-vertex UVs.

    Faces must be triangles with v/vt index pairs; distinct (v, vt)
    combinations become distinct output vertices.
    """
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    faces: list[list[tuple[int, int]]] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag, args = parts[0], parts[1:]
            if tag == "v":
                if len(args) != 3:
                    raise ObjParseError(f"{path}:{lineno}: v needs 3 coordinates")
                positions.append([float(x) for x in args])
            elif tag == "vt":
                if len(args) < 2:
                    raise ObjParseError(f"{path}:{lineno}: vt needs 2 coordinates")
                texcoords.append([float(args[0]), float(args[1])])
            elif tag == "f":
                if len(args) != 3:
                    raise ObjParseError(
                        f"{path}:{lineno}: only triangular faces are supported"
                    )
                face = []
                for token in args:
                    m = _FACE_TOKEN.match(token)
                    if not m:
                        raise ObjParseError(
                            f"{path}:{lineno}: face token {token!r} is not v/vt"
                        )
                    face.append((int(m.group(1)) - 1, int(m.group(2)) - 1))
                faces.append(face)
            # Other record types (vn, o, g, s, usemtl...) are ignored.

    if not faces:
        raise ObjParseError(f"{path}: no faces")
    remap: dict[tuple[int, int], int] = {}
    vertices: list[list[float]] = []
    uvs: list[list[float]] = []
    triangles: list[list[int]] = []
    for face in faces:
        tri = []
        for vi, ti in face:
            if not (0 <= vi < len(positions)):
                raise ObjParseError(f"{path}: vertex index {vi + 1} out of range")
            if not (0 <= ti < len(texcoords)):
                raise ObjParseError(f"{path}: vt index {ti + 1} out of range")
            key = (vi, ti)
            if key not in remap:
                remap[key] = len(vertices)
                vertices.append(positions[vi])
                uvs.append(texcoords[ti])
            tri.append(remap[key])
        triangles.append(tri)
    return ProxyMesh(vertices=np.array(vertices), triangles=np.array(triangles),
                     uvs=np.array(uvs))
