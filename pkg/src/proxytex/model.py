"""Latent-driven texture generation and the U-Net neural renderer.

One model instance covers a whole object collection: a table of per-instance
latent codes, a shared mapping MLP, one texture-generator decoder per proxy
slot, and the compositing U-Net. The forward path is

    z -> w = mlp(z) -> textures T_j = gen_j(w)
      -> rasterize proxies -> sample textures -> stack -> U-Net
      -> premultiplied RGB + alpha, both sigmoid-bounded to [0, 1].

Training optimizes latent codes and network weights jointly by plain
gradient descent (no encoder); see :mod:`proxytex.training`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatchError
from .geometry import CameraIntrinsics, Pose, ProxyMesh
from .imaging import RgbaImage, RgbImage
from .rasterize import (
    DeepBuffer,
    RendererInput,
    TextureSampler,
    build_renderer_input,
    rasterize_proxy,
)

LEAKY_SLOPE = 0.2
UNET_LEVELS = 5


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults follow the eyeglasses setup: 3 proxies, 9-channel 128x128
    textures, 8-dim latents mapped to 512 dims by a 4-layer/256-wide MLP,
    U-Net first-layer width 32 (use 64 when stacking many proxies).
    """

    num_proxies: int = 3
    texture_channels: int = 9
    texture_resolution: int = 128
    latent_dim: int = 8
    mapped_dim: int = 512
    mapper_layers: int = 4
    mapper_hidden: int = 256
    unet_base_width: int = 32
    input_mode: str = "stacked"
    latent_init_std: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        r = self.texture_resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ValueError("texture_resolution must be a power of two >= 8")
        if self.input_mode not in ("stacked", "zbuffer"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.num_proxies < 1:
            raise ValueError("need at least one proxy slot")

    @property
    def channels_per_proxy(self) -> int:
        return self.texture_channels + 5

    @property
    def input_channels(self) -> int:
        return self.num_proxies * self.channels_per_proxy

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class RenderOutput:
    """Network output: premultiplied RGB (H, W, 3) and alpha (H, W).

    Values are sigmoid-bounded to [0, 1]. premul_rgb <= alpha is encouraged
    by the losses, not enforced by the architecture.
    """

    premul_rgb: torch.Tensor
    alpha: torch.Tensor

    def to_rgba(self) -> RgbaImage:
        return RgbaImage(
            rgb=self.premul_rgb.detach().cpu().numpy(),
            alpha=self.alpha.detach().cpu().numpy(),
            premultiplied=True,
        )


class LatentTable(nn.Module):
    """Per-instance latent codes z, optimized directly during training."""

    def __init__(self, instance_ids, latent_dim: int, init_std: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.instance_ids = list(instance_ids)
        if len(set(self.instance_ids)) != len(self.instance_ids):
            raise ValueError("duplicate instance ids")
        self._index = {iid: i for i, iid in enumerate(self.instance_ids)}
        init = torch.empty(len(self.instance_ids), latent_dim)
        init.normal_(0.0, init_std, generator=generator)
        self.codes = nn.Parameter(init)

    def __len__(self) -> int:
        return len(self.instance_ids)

    def index_of(self, instance_id: str) -> int:
        if instance_id not in self._index:
            raise KeyError(f"unknown instance {instance_id!r}")
        return self._index[instance_id]

    def get(self, instance_ids) -> torch.Tensor:
        idx = [self.index_of(i) for i in instance_ids]
        return self.codes[idx]

    def stats(self) -> dict:
        codes = self.codes.detach()
        return {
            "mean": codes.mean(dim=0).tolist(),
            "std": codes.std(dim=0, unbiased=False).tolist(),
        }


class LatentMapper(nn.Module):
    """MLP reparametrization z -> w: hidden layers with LeakyReLU, linear out."""

    def __init__(self, latent_dim: int = 8, hidden: int = 256, layers: int = 4,
                 out_dim: int = 512):
        super().__init__()
        mods: list[nn.Module] = []
        d = latent_dim
        for _ in range(layers):
            mods += [nn.Linear(d, hidden), nn.LeakyReLU(LEAKY_SLOPE)]
            d = hidden
        mods.append(nn.Linear(d, out_dim))
        self.net = nn.Sequential(*mods)
        self.latent_dim = latent_dim
        self.out_dim = out_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ShapeMismatchError(
                f"latent has {z.shape[-1]} dims, expected {self.latent_dim}"
            )
        return self.net(z)


class TextureGenerator(nn.Module):
    """Decoder from a mapped latent to one proxy's neural texture.

    Dense layer to a 4x4 seed, then repeated (nearest-neighbor 2x upsample,
    3x3 conv, LeakyReLU) until the target resolution, and a final linear
    1x1 conv to the requested channel count.
    """

    SEED_SIZE = 4
    SEED_CHANNELS = 256
    MIN_CHANNELS = 32

    def __init__(self, mapped_dim: int, resolution: int, channels: int):
        super().__init__()
        if resolution < 8 or (resolution & (resolution - 1)) != 0:
            raise ValueError("resolution must be a power of two >= 8")
        self.resolution = resolution
        self.channels = channels
        self.seed = nn.Linear(mapped_dim, self.SEED_SIZE ** 2 * self.SEED_CHANNELS)
        blocks = []
        ch = self.SEED_CHANNELS
        n_up = int(math.log2(resolution // self.SEED_SIZE))
        for _ in range(n_up):
            nxt = max(self.MIN_CHANNELS, ch // 2)
            blocks.append(nn.Conv2d(ch, nxt, 3, padding=1,
                                    padding_mode="reflect"))
            ch = nxt
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(ch, channels, 1)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        x = self.seed(w).reshape(-1, self.SEED_CHANNELS, self.SEED_SIZE, self.SEED_SIZE)
        for conv in self.blocks:
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = nn.functional.leaky_relu(conv(x), LEAKY_SLOPE)
        return self.head(x)


class BlurPool2d(nn.Module):
    """Anti-aliased downsampling: fixed [1,2,1]x[1,2,1]/16 blur, then stride 2."""

    def __init__(self):
        super().__init__()
        k = np.array([1.0, 2.0, 1.0])
        kernel = torch.from_numpy(np.outer(k, k) / 16.0).to(torch.float32)
        self.register_buffer("kernel", kernel[None, None])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        weight = self.kernel.to(dtype=x.dtype).expand(c, 1, 3, 3)
        x = nn.functional.pad(x, (1, 1, 1, 1), mode="reflect")
        return nn.functional.conv2d(x, weight, stride=2, groups=c)


class _ConvPair(nn.Module):
    # Reflect padding keeps constant inputs exactly constant (no border
    # artifacts), matching the BlurPool padding.
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1, padding_mode="reflect")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = nn.functional.leaky_relu(self.c1(x), LEAKY_SLOPE)
        return nn.functional.leaky_relu(self.c2(x), LEAKY_SLOPE)


class RenderUNet(nn.Module):
    """Compositing U-Net: 5 down/up blocks of 2 convs, BlurPool downsampling,
    bilinear-upsample decoder with skip connections, sigmoid 4-channel head.

    No normalization layers anywhere.
    """

    def __init__(self, in_channels: int, base_width: int = 32):
        super().__init__()
        widths = [base_width * (2 ** i) for i in range(UNET_LEVELS)]
        self.enc = nn.ModuleList()
        c = in_channels
        for wd in widths:
            self.enc.append(_ConvPair(c, wd))
            c = wd
        self.pool = BlurPool2d()
        self.dec = nn.ModuleList()
        for i in range(UNET_LEVELS - 1, -1, -1):
            skip = widths[i]
            upstream = widths[i]
            out = widths[max(i - 1, 0)]
            self.dec.append(_ConvPair(upstream + skip, out))
        self.head = nn.Conv2d(widths[0], 4, 1)
        self.in_channels = in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"input has {x.shape[1]} channels, expected {self.in_channels}"
            )
        h, w = x.shape[-2:]
        div = 2 ** UNET_LEVELS
        if h % div or w % div:
            raise ValueError(
                f"spatial size {h}x{w} must be divisible by {div}"
            )
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        for block, skip in zip(self.dec, reversed(skips)):
            x = nn.functional.interpolate(
                x, scale_factor=2, mode="bilinear", align_corners=False
            )
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


class ProxyTexModel(nn.Module):
    """The full renderer Net(z, pose, weights)."""

    def __init__(self, config: ModelConfig, instance_ids=()):
        super().__init__()
        self.config = config
        # Seed before construction so identical configs build identical weights.
        torch.manual_seed(config.seed)
        self.mapper = LatentMapper(
            config.latent_dim, config.mapper_hidden, config.mapper_layers,
            config.mapped_dim,
        )
        self.generators = nn.ModuleList([
            TextureGenerator(config.mapped_dim, config.texture_resolution,
                             config.texture_channels)
            for _ in range(config.num_proxies)
        ])
        self.unet = RenderUNet(config.input_channels, config.unet_base_width)
        self.latents = LatentTable(
            instance_ids, config.latent_dim, config.latent_init_std,
        )

    # -- pieces ----------------------------------------------------------

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        """z (B, n) or (n,) -> w (B, m) or (m,)."""
        single = z.dim() == 1
        w = self.mapper(z[None] if single else z)
        return w[0] if single else w

    def generate_texture(self, w: torch.Tensor, proxy_index: int) -> torch.Tensor:
        """w (B, m) or (m,) -> texture (B, C, R, R) or (C, R, R)."""
        if not (0 <= proxy_index < self.config.num_proxies):
            raise IndexError(f"proxy index {proxy_index} out of range")
        single = w.dim() == 1
        tex = self.generators[proxy_index](w[None] if single else w)
        return tex[0] if single else tex

    def generate_textures(self, w: torch.Tensor) -> list[torch.Tensor]:
        return [self.generate_texture(w, j) for j in range(self.config.num_proxies)]

    def neural_render(self, renderer_input: RendererInput) -> RenderOutput:
        """Run the U-Net over one assembled input stack."""
        expected = self.config.input_channels
        if renderer_input.channels.shape[0] != expected:
            raise ShapeMismatchError(
                f"renderer input has {renderer_input.channels.shape[0]} "
                f"channels, expected {expected}"
            )
        x = renderer_input.channels[None].to(next(self.unet.parameters()).dtype)
        out = self.unet(x)[0]
        return RenderOutput(premul_rgb=out[:3].permute(1, 2, 0), alpha=out[3])

    # -- full pipeline -----------------------------------------------------

    def render_from_w(self, w: torch.Tensor, buffers: list[DeepBuffer],
                      samplers: list[TextureSampler] | None = None,
                      mode: str | None = None) -> RenderOutput:
        """Forward from a mapped latent over pre-rasterized buffers."""
        mode = mode or self.config.input_mode
        textures = self.generate_textures(w)
        if samplers is None:
            samplers = [
                TextureSampler(buf, self.config.texture_resolution)
                for buf in buffers
            ]
        sampled = [s.sample(t) for s, t in zip(samplers, textures)]
        rin = build_renderer_input(buffers, sampled, mode)
        return self.neural_render(rin)

    def render(self, z: torch.Tensor, pose: Pose, proxies: list[ProxyMesh],
               intr: CameraIntrinsics, mode: str | None = None) -> RenderOutput:
        """Full forward: z -> w -> textures -> rasterize -> sample -> U-Net."""
        if len(proxies) != self.config.num_proxies:
            raise ShapeMismatchError(
                f"got {len(proxies)} proxies, model expects "
                f"{self.config.num_proxies}"
            )
        buffers = [rasterize_proxy(mesh, pose, intr) for mesh in proxies]
        return self.render_from_w(self.map_latent(z), buffers, mode=mode)

    def render_instance(self, instance_id: str, pose: Pose,
                        proxies: list[ProxyMesh], intr: CameraIntrinsics,
                        mode: str | None = None) -> RenderOutput:
        z = self.latents.get([instance_id])[0]
        return self.render(z, pose, proxies, intr, mode=mode)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def interpolate_latents(z_a: torch.Tensor, z_b: torch.Tensor, t: float) -> torch.Tensor:
    """Linear interpolation (1 - t) * z_a + t * z_b, t in [0, 1]."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if z_a.shape != z_b.shape:
        raise ShapeMismatchError("latents must have equal shape")
    return (1.0 - t) * z_a + t * z_b


def export_texture_preview(texture) -> RgbImage:
    """First three texture channels rescaled per channel to [0, 1].

    Constant channels map to flat 0.5.
    """
    tex = texture.detach().cpu().numpy() if torch.is_tensor(texture) else np.asarray(texture)
    if tex.ndim != 3 or tex.shape[0] < 3:
        raise ValueError("texture must be (C >= 3, R, R)")
    out = np.empty((tex.shape[1], tex.shape[2], 3))
    for c in range(3):
        chan = tex[c]
        lo, hi = chan.min(), chan.max()
        if hi - lo < 1e-12:
            out[..., c] = 0.5
        else:
            out[..., c] = (chan - lo) / (hi - lo)
    return RgbImage(out)
