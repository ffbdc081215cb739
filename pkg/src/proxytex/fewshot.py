"""Reconstruction of unseen instances by optimizing against N posed views.

A pretrained model is copied and a chosen variable subset is optimized on
the training losses over the given views, halting at a fixed step budget
(default 1000; running much longer overfits the visible views). The four
nested fit spaces, smallest first:

    Z        the fresh 8-dim latent code only
    W        the 512-dim mapped latent, bypassing the mapper
    TEXTURE  W plus all texture-generator parameters
    ALL      the latent plus every network parameter (mapper, generators,
             compositing U-Net)
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from .errors import ContractViolation, ShapeMismatchError
from .model import ProxyTexModel, RenderOutput
from .rasterize import TextureSampler, build_renderer_input, rasterize_proxy
from .training import TrainConfig, _batched_loss, _breakdown, rgba_to_tensor

DEFAULT_FIT_STEPS = 1000
# Latent-only spaces tolerate larger steps than fine-tuning network weights.
DEFAULT_LR = {"z": 1e-4, "w": 1e-4, "texture": 1e-5, "all": 1e-5}


class FitSpace(Enum):
    Z = "z"
    W = "w"
    TEXTURE = "texture"
    ALL = "all"


@dataclass
class FitParameterSet:
    """Descriptor of the variables a fit space optimizes."""

    space: FitSpace
    names: list[str]
    count: int


def select_fit_parameters(model: ProxyTexModel, space: FitSpace) -> FitParameterSet:
    """Which variables each space optimizes, with exact scalar counts.

    Counts are strictly increasing across Z -> W -> TEXTURE -> ALL.
    """
    cfg = model.config
    gen_names = [f"generators.{n}" for n, _ in model.generators.named_parameters()]
    gen_count = sum(p.numel() for p in model.generators.parameters())
    if space is FitSpace.Z:
        return FitParameterSet(space, ["z"], cfg.latent_dim)
    if space is FitSpace.W:
        return FitParameterSet(space, ["w"], cfg.mapped_dim)
    if space is FitSpace.TEXTURE:
        return FitParameterSet(space, ["w", *gen_names], cfg.mapped_dim + gen_count)
    mapper_count = sum(p.numel() for p in model.mapper.parameters())
    unet_count = sum(p.numel() for p in model.unet.parameters())
    names = ["z",
             *(f"mapper.{n}" for n, _ in model.mapper.named_parameters()),
             *gen_names,
             *(f"unet.{n}" for n, _ in model.unet.named_parameters())]
    return FitParameterSet(
        space, names, cfg.latent_dim + mapper_count + gen_count + unet_count
    )


@dataclass
class FitResult:
    """Outcome of one fit job. The fitted model is a copy; the source
    checkpoint is never mutated."""

    space: FitSpace
    model: ProxyTexModel
    z: torch.Tensor | None
    w: torch.Tensor | None
    loss_trace: list[float]
    steps_run: int
    proxies: list = field(default_factory=list)

    def render(self, pose, intr, mode: str | None = None) -> RenderOutput:
        """Render the fitted instance with its fit-time proxies."""
        with torch.no_grad():
            if self.w is not None:
                buffers = [rasterize_proxy(m, pose, intr) for m in self.proxies]
                return self.model.render_from_w(self.w, buffers, mode=mode)
            return self.model.render(self.z, pose, self.proxies, intr, mode=mode)


def fit_instance(model: ProxyTexModel, views, poses, proxies,
                 intr, space: FitSpace, steps: int = DEFAULT_FIT_STEPS,
                 lr: float | None = None, seed: int = 0,
                 train_config: TrainConfig | None = None,
                 perceptual=None, z_init: torch.Tensor | None = None) -> FitResult:
    """Optimize a fresh latent (and optionally weights) against N views.

    ``views`` are straight-alpha or premultiplied RGBA images with
    matching ``poses``; ``proxies`` is the instance's fixed proxy list in
    the model's proxy order. The objective is the full training loss. The
    loss trace holds the value before every step plus the final value, so
    its length is steps + 1. ``z_init`` overrides the fresh random latent,
    e.g. to warm-start from a training instance's learned code.
    """
    if len(views) == 0:
        raise ValueError("need at least one view to fit")
    if len(views) != len(poses):
        raise ShapeMismatchError("views and poses must pair up")
    if len(proxies) != model.config.num_proxies:
        raise ShapeMismatchError(
            f"got {len(proxies)} proxies, model expects {model.config.num_proxies}"
        )
    if space in (FitSpace.W, FitSpace.TEXTURE) and model.config.mapped_dim <= 0:
        raise ContractViolation("checkpoint lacks a mapped-latent dimension")
    cfg = train_config or TrainConfig(learning_rate=1.0)  # lr set below
    lr = lr if lr is not None else DEFAULT_LR[space.value]

    fitted = copy.deepcopy(model)
    fitted.train()

    if z_init is not None:
        if z_init.shape != (model.config.latent_dim,):
            raise ShapeMismatchError(
                f"z_init must have shape ({model.config.latent_dim},)"
            )
        z = z_init.detach().clone()
    else:
        gen = torch.Generator().manual_seed(seed)
        z = torch.empty(model.config.latent_dim).normal_(
            0.0, model.config.latent_init_std, generator=gen
        )

    targets = []
    all_buffers = []
    all_samplers = []
    for img, pose in zip(views, poses):
        rgba = img if img.premultiplied else None
        if rgba is None:
            from .imaging import premultiply

            rgba = premultiply(img)
        targets.append(rgba_to_tensor(rgba))
        buffers = [rasterize_proxy(mesh, pose, intr) for mesh in proxies]
        all_buffers.append(buffers)
        all_samplers.append([
            TextureSampler(buf, model.config.texture_resolution) for buf in buffers
        ])
    target = torch.stack(targets)

    w_param: torch.Tensor | None = None
    z_param: torch.Tensor | None = None
    if space is FitSpace.Z:
        z_param = z.clone().requires_grad_(True)
        params = [z_param]
    elif space is FitSpace.W:
        with torch.no_grad():
            w0 = fitted.map_latent(z)
        w_param = w0.clone().requires_grad_(True)
        params = [w_param]
    elif space is FitSpace.TEXTURE:
        with torch.no_grad():
            w0 = fitted.map_latent(z)
        w_param = w0.clone().requires_grad_(True)
        params = [w_param, *fitted.generators.parameters()]
    else:
        z_param = z.clone().requires_grad_(True)
        params = [z_param, *fitted.mapper.parameters(),
                  *fitted.generators.parameters(), *fitted.unet.parameters()]

    optimizer = torch.optim.Adam(params, lr=lr)
    mode = fitted.config.input_mode

    def forward_loss():
        w = w_param if w_param is not None else fitted.map_latent(z_param)
        textures = fitted.generate_textures(w)
        preds = []
        for buffers, samplers in zip(all_buffers, all_samplers):
            sampled = [s.sample(t) for s, t in zip(samplers, textures)]
            preds.append(build_renderer_input(buffers, sampled, mode).channels)
        pred = fitted.unet(torch.stack(preds))
        return _batched_loss(pred, target, cfg, perceptual)["total"]

    trace: list[float] = []
    for _ in range(steps):
        loss = forward_loss()
        trace.append(float(loss))
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        trace.append(float(forward_loss()))

    return FitResult(
        space=space,
        model=fitted,
        z=None if z_param is None else z_param.detach(),
        w=None if w_param is None else w_param.detach(),
        loss_trace=trace,
        steps_run=steps,
        proxies=list(proxies),
    )
