"""Deferred rasterization of proxies and differentiable texture sampling.

The rasterizer is a reference-quality software implementation: per-pixel
nearest-triangle attributes via perspective-correct barycentric
interpolation, z-buffered within a proxy. It is deliberately NOT
differentiable with respect to geometry or pose; only texture sampling
carries gradients, which is all the training objective needs.

Pixel centers sit at (col + 0.5, row + 0.5) with the origin at the top-left
corner. Pixel centers exactly on a shared edge are claimed by both
triangles and resolved in triangle index order. Triangles with any vertex
at camera z <= 1e-6 are skipped entirely (no near-plane clipping; proxies
here always sit fully in front of the camera).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatchError
from .geometry import CameraIntrinsics, Pose, ProxyMesh

_EPS_Z = 1e-6
_EPS_AREA = 1e-12


@dataclass
class DeepBuffer:
    """Per-proxy screen-space rasterization output.

    uv: (H, W, 2) in [0, 1]; normal: (H, W, 3) camera-space unit face
    normals flipped to face the camera; depth: (H, W) normalized to [0, 1]
    via (z - near) / (far - near); coverage: (H, W) in {0, 1}. Channels are
    zero wherever coverage is zero.
    """

    uv: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    coverage: np.ndarray

    @property
    def height(self) -> int:
        return self.coverage.shape[0]

    @property
    def width(self) -> int:
        return self.coverage.shape[1]


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize_proxy(mesh: ProxyMesh, pose: Pose, intr: CameraIntrinsics) -> DeepBuffer:
    """Rasterize one proxy into a deep buffer (UV, normal, depth, coverage)."""
    h, w = intr.height, intr.width
    zbuf = np.full((h, w), np.inf)
    uv_buf = np.zeros((h, w, 2))
    normal_buf = np.zeros((h, w, 3))

    cam_verts = pose.transform(mesh.vertices)
    for tri in mesh.triangles:
        cv = cam_verts[tri]
        z = cv[:, 2]
        if np.any(z <= _EPS_Z):
            continue
        px = intr.focal_x * cv[:, 0] / z + intr.principal_x
        py = intr.focal_y * cv[:, 1] / z + intr.principal_y

        area2 = _edge(px[0], py[0], px[1], py[1], px[2], py[2])
        if abs(area2) < _EPS_AREA:
            continue

        col_lo = max(0, int(np.floor(px.min() - 0.5)))
        col_hi = min(w - 1, int(np.ceil(px.max() - 0.5)))
        row_lo = max(0, int(np.floor(py.min() - 0.5)))
        row_hi = min(h - 1, int(np.ceil(py.max() - 0.5)))
        if col_lo > col_hi or row_lo > row_hi:
            continue

        cols = np.arange(col_lo, col_hi + 1)
        rows = np.arange(row_lo, row_hi + 1)
        cx = cols[None, :] + 0.5
        cy = rows[:, None] + 0.5

        w0 = _edge(px[1], py[1], px[2], py[2], cx, cy) / area2
        w1 = _edge(px[2], py[2], px[0], py[0], cx, cy) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue

        inv_z = w0 / z[0] + w1 / z[1] + w2 / z[2]
        depth = 1.0 / inv_z
        uv_num = (
            w0[..., None] * mesh.uvs[tri[0]] / z[0]
            + w1[..., None] * mesh.uvs[tri[1]] / z[1]
            + w2[..., None] * mesh.uvs[tri[2]] / z[2]
        )
        uv = uv_num * depth[..., None]

        n = np.cross(cv[1] - cv[0], cv[2] - cv[0])
        n /= np.linalg.norm(n)
        if n @ cv.mean(axis=0) > 0:
            n = -n

        sub = (slice(row_lo, row_hi + 1), slice(col_lo, col_hi + 1))
        nearer = inside & (depth < zbuf[sub])
        zbuf[sub] = np.where(nearer, depth, zbuf[sub])
        uv_buf[sub] = np.where(nearer[..., None], uv, uv_buf[sub])
        normal_buf[sub] = np.where(nearer[..., None], n, normal_buf[sub])

    coverage = np.isfinite(zbuf)
    depth_norm = np.zeros((h, w))
    depth_norm[coverage] = np.clip(
        (zbuf[coverage] - intr.near) / (intr.far - intr.near), 0.0, 1.0
    )
    uv_buf[~coverage] = 0.0
    normal_buf[~coverage] = 0.0
    return DeepBuffer(
        uv=np.clip(uv_buf, 0.0, 1.0),
        normal=normal_buf,
        depth=depth_norm,
        coverage=coverage.astype(np.float64),
    )


class TextureSampler:
    """Precomputed bilinear taps for one deep buffer.

    Gathers the four surrounding texels at uv * (R - 1) for every covered
    pixel. The gather is linear in the texture, so gradients flow to
    texture values; uv coordinates are constants.
    """

    def __init__(self, buf: DeepBuffer, resolution: int):
        if resolution < 2:
            raise ValueError("texture resolution must be >= 2")
        self.resolution = resolution
        self.height, self.width = buf.coverage.shape
        covered = buf.coverage > 0.5
        self._covered_flat = torch.from_numpy(np.flatnonzero(covered.ravel()))
        x = buf.uv[covered, 0] * (resolution - 1)
        y = buf.uv[covered, 1] * (resolution - 1)
        x0 = np.clip(np.floor(x), 0, resolution - 2).astype(np.int64)
        y0 = np.clip(np.floor(y), 0, resolution - 2).astype(np.int64)
        fx = x - x0
        fy = y - y0
        flat00 = y0 * resolution + x0
        self._idx = torch.from_numpy(np.stack([
            flat00, flat00 + 1, flat00 + resolution, flat00 + resolution + 1,
        ]))
        self._weights = torch.from_numpy(np.stack([
            (1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy,
        ]))

    def sample(self, texture: torch.Tensor) -> torch.Tensor:
        """Sample a (C, R, R) texture to an (H, W, C) feature map."""
        c, r0, r1 = texture.shape
        if r0 != self.resolution or r1 != self.resolution:
            raise ShapeMismatchError(
                f"texture is {r0}x{r1}, sampler built for {self.resolution}"
            )
        flat = texture.reshape(c, -1)
        weights = self._weights.to(dtype=texture.dtype, device=texture.device)
        gathered = sum(
            flat[:, self._idx[k]] * weights[k] for k in range(4)
        )
        out = texture.new_zeros((c, self.height * self.width))
        out[:, self._covered_flat] = gathered
        return out.reshape(c, self.height, self.width).permute(1, 2, 0)


def sample_texture(texture: torch.Tensor, buf: DeepBuffer) -> torch.Tensor:
    """Bilinearly sample a (C, R, R) texture with the buffer's UVs.

    Returns an (H, W, C) map, zero where coverage is zero.
    """
    return TextureSampler(buf, texture.shape[-1]).sample(texture)


@dataclass
class RendererInput:
    """Stacked per-proxy feature planes feeding the neural renderer.

    channels is (K * (C + 5), H, W): per proxy, sampled texture (C),
    camera-space normal (3), normalized depth (1), coverage (1), in a fixed
    proxy order.
    """

    channels: torch.Tensor
    num_proxies: int
    texture_channels: int


def _proxy_block(buf: DeepBuffer, sampled: torch.Tensor) -> torch.Tensor:
    aux = np.concatenate(
        [buf.normal, buf.depth[..., None], buf.coverage[..., None]], axis=2
    )
    aux_t = torch.from_numpy(aux).to(dtype=sampled.dtype, device=sampled.device)
    return torch.cat([sampled, aux_t], dim=2)


def build_renderer_input(buffers, sampled, mode: str = "stacked") -> RendererInput:
    """Assemble the network input from K deep buffers + K sampled textures.

    "stacked" concatenates every proxy's block so the network can see
    through front surfaces; "zbuffer" keeps only the nearest covered proxy
    per pixel (uncovered pixels zero) and zero-pads back to K blocks so
    both modes feed the same network shape.
    """
    if mode not in ("stacked", "zbuffer"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(buffers) != len(sampled) or not buffers:
        raise ShapeMismatchError("need equally many buffers and sampled maps")
    k = len(buffers)
    c = sampled[0].shape[2]
    hw = (buffers[0].height, buffers[0].width)
    for buf, s in zip(buffers, sampled):
        if (buf.height, buf.width) != hw or s.shape != (*hw, c):
            raise ShapeMismatchError("inconsistent buffer/sample shapes")

    blocks = [_proxy_block(buf, s) for buf, s in zip(buffers, sampled)]
    if mode == "stacked":
        stacked = torch.cat(blocks, dim=2)
    else:
        block = torch.stack(blocks, dim=0)  # (K, H, W, C+5)
        depth = np.stack([b.depth for b in buffers])
        covered = np.stack([b.coverage for b in buffers]) > 0.5
        depth_sel = np.where(covered, depth, np.inf)
        nearest = depth_sel.argmin(axis=0)
        any_cov = covered.any(axis=0)
        rows, cols = np.indices(hw)
        sel = torch.from_numpy(nearest)
        picked = block[sel, torch.from_numpy(rows), torch.from_numpy(cols)]
        picked = picked * torch.from_numpy(any_cov[..., None]).to(picked.dtype)
        pad = picked.new_zeros((*hw, (k - 1) * (c + 5)))
        stacked = torch.cat([picked, pad], dim=2)
    return RendererInput(
        channels=stacked.permute(2, 0, 1),
        num_proxies=k,
        texture_channels=c,
    )
