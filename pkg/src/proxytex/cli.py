"""Command-line entry points for every workflow.

Subcommands map 1:1 onto library operations: generate-data, train,
evaluate, interpolate, fewshot, render, serve, export-textures. ``train``
additionally accepts a JSON config file (documented in the README); flags
given explicitly on the command line override file values.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .dataset import load_dataset, proxies_from_metadata, restrict_views, split_views
from .errors import ProxytexError
from .fewshot import FitSpace, fit_instance
from .geometry import Pose
from .imaging import RgbaImage, composite_over_gray, unpremultiply, write_image
from .metrics import evaluate, view_metrics
from .model import ModelConfig, export_texture_preview, interpolate_latents
from .synth import build_dataset
from .training import (
    PerceptualFeatures,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)


@click.group()
def main() -> None:
    """Textured-proxy neural renderer workflows."""


def _fail(message: str) -> None:
    raise click.ClickException(message)


@main.command("generate-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--instances", default=4, show_default=True)
@click.option("--views", default=32, show_default=True)
@click.option("--image-size", default=128, show_default=True)
@click.option("--yaw-range", default=24.0, show_default=True)
@click.option("--pitch-range", default=24.0, show_default=True)
@click.option("--distance", default=2.3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--proxy-source", type=click.Choice(["hull", "analytic"]),
              default="hull", show_default=True)
@click.option("--hull-resolution", default=64, show_default=True)
@click.option("--bit-depth", type=click.Choice(["8", "16"]), default="8",
              show_default=True)
def cmd_generate_data(out_dir, instances, views, image_size, yaw_range,
                      pitch_range, distance, seed, proxy_source,
                      hull_resolution, bit_depth) -> None:
    """Render a synthetic eyeglasses dataset to a directory."""
    try:
        ds = build_dataset(
            out_dir, instances, views, image_size=image_size,
            yaw_range=yaw_range, pitch_range=pitch_range, distance=distance,
            seed=seed, proxy_source=proxy_source,
            hull_resolution=hull_resolution, bit_depth=int(bit_depth),
        )
    except ProxytexError as exc:
        _fail(str(exc))
    click.echo(f"wrote {len(ds.instances)} instances x {views} views to {out_dir}")


def _merge_config(ctx: click.Context, config_path: str | None,
                  flag_map: dict) -> dict:
    """File values beat defaults; explicitly passed flags beat the file."""
    merged = dict(flag_map)
    if config_path:
        with open(config_path, "r", encoding="ascii") as fh:
            file_cfg = json.load(fh)
        for section in ("model", "train"):
            for key, value in file_cfg.get(section, {}).items():
                name = f"{section}.{key}"
                if name not in merged:
                    _fail(f"unknown config key {name!r}")
                source = ctx.get_parameter_source(key.replace(".", "_"))
                if source is None or source.name != "COMMANDLINE":
                    merged[name] = value
    return merged


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON config file with 'model' and 'train' sections.")
@click.option("--steps", default=1000, show_default=True)
@click.option("--lr", "learning_rate", default=1e-5, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--mode", "input_mode", type=click.Choice(["stacked", "zbuffer"]),
              default="stacked", show_default=True)
@click.option("--texture-resolution", default=128, show_default=True)
@click.option("--texture-channels", default=9, show_default=True)
@click.option("--unet-width", default=32, show_default=True)
@click.option("--holdout-fraction", default=0.02, show_default=True)
@click.option("--perceptual/--no-perceptual", default=False, show_default=True)
@click.pass_context
def cmd_train(ctx, data_dir, out_dir, config_path, steps, learning_rate,
              batch_size, seed, input_mode, texture_resolution,
              texture_channels, unet_width, holdout_fraction, perceptual) -> None:
    """Train on the 98%/2% (configurable) train split of a dataset."""
    flags = {
        "train.steps": steps, "train.learning_rate": learning_rate,
        "train.batch_size": batch_size, "train.seed": seed,
        "train.perceptual_enabled": perceptual,
        "model.input_mode": input_mode,
        "model.texture_resolution": texture_resolution,
        "model.texture_channels": texture_channels,
        "model.unet_base_width": unet_width,
        "model.seed": seed,
    }
    merged = _merge_config(ctx, config_path, flags)
    try:
        dataset = load_dataset(data_dir)
        train_idx, holdout_idx = split_views(dataset, holdout_fraction, seed=seed)
        model_cfg = ModelConfig(
            num_proxies=dataset.num_proxies,
            texture_channels=merged["model.texture_channels"],
            texture_resolution=merged["model.texture_resolution"],
            unet_base_width=merged["model.unet_base_width"],
            input_mode=merged["model.input_mode"],
            seed=merged["model.seed"],
        )
        train_cfg = TrainConfig(
            learning_rate=merged["train.learning_rate"],
            steps=merged["train.steps"],
            batch_size=merged["train.batch_size"],
            seed=merged["train.seed"],
            perceptual_enabled=merged["train.perceptual_enabled"],
        )
        train_view = {
            iid: idxs for iid, idxs in train_idx.items()
        }
        # Restrict each instance to its training views.
        from .dataset import Dataset, DatasetInstance

        restricted = Dataset(
            intrinsics=dataset.intrinsics,
            proxy_roles=list(dataset.proxy_roles),
            instances=[
                DatasetInstance(
                    instance_id=inst.instance_id,
                    proxies=inst.proxies,
                    views=[inst.views[i] for i in train_view[inst.instance_id]],
                    spec=inst.spec,
                    analytic_proxies=inst.analytic_proxies,
                    seed=inst.seed,
                )
                for inst in dataset.instances
            ],
            pose_ranges=dict(dataset.pose_ranges),
            root=dataset.root,
        )
        percep = PerceptualFeatures.load_if_available() if train_cfg.perceptual_enabled else None
        if train_cfg.perceptual_enabled and percep is None:
            _fail("perceptual term enabled but VGG16 weights are unavailable; "
                  "set PROXYTEX_VGG16_WEIGHTS or pass --no-perceptual")
        state = train(restricted, model_cfg, train_cfg, out_dir=out_dir,
                      perceptual=percep)
        split_file = Path(out_dir) / "split.json"
        split_file.write_text(json.dumps(
            {"train": train_idx, "holdout": holdout_idx}, indent=2))
    except ProxytexError as exc:
        _fail(str(exc))
    final = state.history[-1]["total"] if state.history else float("nan")
    click.echo(f"trained {state.step} steps; final logged loss {final:.5f}")
    click.echo(f"checkpoint: {Path(out_dir) / 'checkpoint.pt'}")


@main.command("evaluate")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--split", type=click.Choice(["train", "holdout"]),
              default="holdout", show_default=True)
@click.option("--holdout-fraction", default=0.02, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Optional JSONL report path.")
def cmd_evaluate(ckpt_path, data_dir, split, holdout_fraction, seed, out_path) -> None:
    """Report PSNR / masked PSNR / SSIM / mask IoU over a dataset split."""
    try:
        state = load_checkpoint(ckpt_path)
        dataset = load_dataset(data_dir)
        train_idx, holdout_idx = split_views(dataset, holdout_fraction, seed=seed)
        chosen = train_idx if split == "train" else holdout_idx
        chosen = {iid: idxs for iid, idxs in chosen.items()
                  if iid in state.model.latents.instance_ids}
        if not chosen:
            _fail("checkpoint and dataset share no instances")
        report = evaluate(state.model, dataset, chosen, split_name=split)
    except ProxytexError as exc:
        _fail(str(exc))
    click.echo(report.to_text_table())
    if out_path:
        report.write_jsonl(out_path)
        click.echo(f"report written to {out_path}")


def _render_to_file(state, z, proxies, yaw, pitch, distance, size,
                    background, out_path) -> None:
    from .dataset import _intrinsics_from_dict

    meta = state.dataset_meta
    distance = distance or meta.get("pose_ranges", {}).get("distance", 2.3)
    intr = _intrinsics_from_dict(meta["intrinsics"]).scaled(size, size)
    pose = Pose.orbit(yaw, pitch, distance)
    state.model.eval()
    with torch.no_grad():
        out = state.model.render(z, pose, proxies, intr)
    rgba = out.to_rgba()
    if background == "gray":
        comp = composite_over_gray(rgba)
        img = RgbaImage(rgb=comp.rgb, alpha=np.ones(comp.rgb.shape[:2]),
                        premultiplied=False)
    else:
        img = unpremultiply(rgba)
    write_image(img, out_path)


@main.command("interpolate")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--instance-a", required=True)
@click.option("--instance-b", required=True)
@click.option("--frames", default=5, show_default=True)
@click.option("--yaw", default=0.0, show_default=True)
@click.option("--pitch", default=0.0, show_default=True)
@click.option("--distance", default=None, type=float)
@click.option("--size", default=256, show_default=True)
@click.option("--background", type=click.Choice(["gray", "transparent"]),
              default="gray", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_interpolate(ckpt_path, instance_a, instance_b, frames, yaw, pitch,
                    distance, size, background, out_dir) -> None:
    """Render a latent-space sweep between two instances (fixed proxies)."""
    try:
        state = load_checkpoint(ckpt_path)
        latents = state.model.latents
        z_a = latents.get([instance_a])[0].detach()
        z_b = latents.get([instance_b])[0].detach()
        proxies = proxies_from_metadata(state.dataset_meta, instance_a)
        os.makedirs(out_dir, exist_ok=True)
        for i in range(frames):
            t = i / max(frames - 1, 1)
            z = interpolate_latents(z_a, z_b, t)
            _render_to_file(state, z, proxies, yaw, pitch, distance, size,
                            background, Path(out_dir) / f"frame_{i:03d}.png")
    except (ProxytexError, KeyError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {frames} frames to {out_dir}")


@main.command("fewshot")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--instance", "instance_id", required=True)
@click.option("--num-views", default=3, show_default=True)
@click.option("--space", type=click.Choice([s.value for s in FitSpace]),
              default="all", show_default=True)
@click.option("--steps", default=1000, show_default=True)
@click.option("--lr", default=None, type=float)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_fewshot(ckpt_path, data_dir, instance_id, num_views, space, steps,
                lr, seed, out_path) -> None:
    """Fit an unseen instance from N dataset views by optimization."""
    try:
        state = load_checkpoint(ckpt_path)
        dataset = load_dataset(data_dir)
        inst = dataset.instance(instance_id)
        n = len(inst.views)
        picks = np.linspace(0, n - 1, min(num_views, n)).round().astype(int)
        picks = sorted(set(int(i) for i in picks))
        views = [inst.views[i].get_premultiplied() for i in picks]
        poses = [inst.views[i].pose for i in picks]
        proxies = dataset.proxies_of(instance_id)
        result = fit_instance(
            state.model, views, poses, proxies, dataset.intrinsics,
            FitSpace(space), steps=steps, lr=lr, seed=seed,
        )
        payload = {
            "space": space,
            "instance_id": instance_id,
            "view_indices": picks,
            "loss_trace": result.loss_trace,
            "z": None if result.z is None else result.z.numpy(),
            "w": None if result.w is None else result.w.numpy(),
            "model_state": result.model.state_dict(),
            "model_config": result.model.config.to_dict(),
        }
        torch.save(payload, out_path)
    except (ProxytexError, KeyError) as exc:
        _fail(str(exc))
    click.echo(
        f"fitted {instance_id} in space={space}: loss "
        f"{result.loss_trace[0]:.5f} -> {result.loss_trace[-1]:.5f} "
        f"({result.steps_run} steps); saved to {out_path}"
    )


@main.command("render")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--instance", "instance_id", default=None)
@click.option("--z", "z_csv", default=None,
              help="Comma-separated latent vector (alternative to --instance).")
@click.option("--pair", default=None, help="instance_a,instance_b for interpolation.")
@click.option("--t", default=0.5, show_default=True)
@click.option("--yaw", default=0.0, show_default=True)
@click.option("--pitch", default=0.0, show_default=True)
@click.option("--distance", default=None, type=float)
@click.option("--size", default=256, show_default=True)
@click.option("--background", type=click.Choice(["gray", "transparent"]),
              default="gray", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_render(ckpt_path, instance_id, z_csv, pair, t, yaw, pitch, distance,
               size, background, out_path) -> None:
    """Render one view from a checkpoint."""
    sources = sum(x is not None for x in (instance_id, z_csv, pair))
    if sources != 1:
        _fail("provide exactly one of --instance, --z, --pair")
    try:
        state = load_checkpoint(ckpt_path)
        latents = state.model.latents
        if instance_id is not None:
            z = latents.get([instance_id])[0].detach()
            proxy_src = instance_id
        elif pair is not None:
            a, b = (s.strip() for s in pair.split(","))
            z = interpolate_latents(
                latents.get([a])[0].detach(), latents.get([b])[0].detach(), t
            )
            proxy_src = a
        else:
            values = [float(x) for x in z_csv.split(",")]
            z = torch.tensor(values, dtype=torch.float32)
            proxy_src = latents.instance_ids[0]
        proxies = proxies_from_metadata(state.dataset_meta, proxy_src)
        _render_to_file(state, z, proxies, yaw, pitch, distance, size,
                        background, out_path)
    except (ProxytexError, KeyError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {out_path}")


@main.command("serve")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def cmd_serve(ckpt_path, host, port) -> None:
    """Run the HTTP render service."""
    from .service import serve

    serve(ckpt_path, host=host, port=port)


@main.command("export-textures")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--instance", "instance_id", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_export_textures(ckpt_path, instance_id, out_dir) -> None:
    """Write per-proxy neural-texture previews (first 3 channels as RGB)."""
    try:
        state = load_checkpoint(ckpt_path)
        model = state.model
        model.eval()
        z = model.latents.get([instance_id])[0].detach()
        os.makedirs(out_dir, exist_ok=True)
        roles = state.dataset_meta["proxy_roles"] if state.dataset_meta else [
            str(j) for j in range(model.config.num_proxies)
        ]
        with torch.no_grad():
            w = model.map_latent(z)
            for j, role in enumerate(roles):
                tex = model.generate_texture(w, j)
                preview = export_texture_preview(tex)
                img = RgbaImage(rgb=preview.rgb,
                                alpha=np.ones(preview.rgb.shape[:2]),
                                premultiplied=False)
                write_image(img, Path(out_dir) / f"texture_{role}.png")
    except (ProxytexError, KeyError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {len(roles)} texture previews to {out_dir}")


if __name__ == "__main__":
    sys.exit(main())
