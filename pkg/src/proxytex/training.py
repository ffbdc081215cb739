"""Joint optimization of latent codes and network weights, plus checkpoints.

Training follows the generative-latent-optimization recipe: no encoder,
per-instance codes live in a table and receive gradients like any other
parameter. The objective is a sum of L1 terms on premultiplied RGB, alpha,
and composites over neutral gray, optionally plus a perceptual distance
computed from a pretrained image classifier's features. There is no latent
regularization and no adversarial term.
"""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ContractViolation,
    PerceptualUnavailableError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .imaging import NEUTRAL_GRAY, RgbaImage, RgbImage
from .model import ModelConfig, ProxyTexModel, RenderOutput
from .rasterize import TextureSampler, build_renderer_input, rasterize_proxy

CHECKPOINT_VERSION = 1
VGG_WEIGHTS_ENV = "PROXYTEX_VGG16_WEIGHTS"


@dataclass
class TrainConfig:
    """Optimization hyperparameters. The 1e-5 Adam rate is the paper-scale
    default; small synthetic runs converge much faster with larger rates."""

    learning_rate: float = 1e-5
    steps: int = 1000
    batch_size: int = 4
    weight_premul_rgb: float = 1.0
    weight_alpha: float = 1.0
    weight_composite: float = 1.0
    weight_perceptual: float = 1.0
    seed: int = 0
    perceptual_enabled: bool = False
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class LossBreakdown:
    """Loss components; ``total`` is their weighted sum."""

    l1_premul_rgb: float
    l1_alpha: float
    l1_composite: float
    perceptual: float
    total: float
    weights: tuple[float, float, float, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d


def _loss_weights(cfg: TrainConfig) -> tuple[float, float, float, float]:
    return (cfg.weight_premul_rgb, cfg.weight_alpha, cfg.weight_composite,
            cfg.weight_perceptual)


def _batched_loss(pred: torch.Tensor, target: torch.Tensor, cfg: TrainConfig,
                  perceptual: "PerceptualFeatures | None") -> dict:
    """L1 terms over (B, 4, H, W) premultiplied RGBA stacks."""
    l1_rgb = (pred[:, :3] - target[:, :3]).abs().mean()
    l1_alpha = (pred[:, 3] - target[:, 3]).abs().mean()
    pred_comp = pred[:, :3] + (1.0 - pred[:, 3:4]) * NEUTRAL_GRAY
    tgt_comp = target[:, :3] + (1.0 - target[:, 3:4]) * NEUTRAL_GRAY
    l1_comp = (pred_comp - tgt_comp).abs().mean()
    if cfg.perceptual_enabled:
        if perceptual is None:
            raise PerceptualUnavailableError(
                "perceptual term enabled but no feature extractor supplied"
            )
        perc = perceptual.distance_torch(pred_comp, tgt_comp)
    else:
        perc = pred.new_zeros(())
    w = _loss_weights(cfg)
    total = w[0] * l1_rgb + w[1] * l1_alpha + w[2] * l1_comp + w[3] * perc
    return {"l1_premul_rgb": l1_rgb, "l1_alpha": l1_alpha,
            "l1_composite": l1_comp, "perceptual": perc, "total": total}


def _breakdown(terms: dict, cfg: TrainConfig) -> LossBreakdown:
    values = {k: float(v.detach()) for k, v in terms.items()}
    return LossBreakdown(
        l1_premul_rgb=values["l1_premul_rgb"],
        l1_alpha=values["l1_alpha"],
        l1_composite=values["l1_composite"],
        perceptual=values["perceptual"],
        total=values["total"],
        weights=_loss_weights(cfg),
    )


def rgba_to_tensor(img: RgbaImage, dtype=torch.float32) -> torch.Tensor:
    """Premultiplied RgbaImage -> (4, H, W) tensor."""
    if not img.premultiplied:
        raise ContractViolation("loss targets must be premultiplied")
    stack = np.concatenate([img.rgb, img.alpha[..., None]], axis=2)
    return torch.from_numpy(stack).to(dtype).permute(2, 0, 1)


def compute_losses(pred: RenderOutput, target: RgbaImage, cfg: TrainConfig,
                   perceptual: "PerceptualFeatures | None" = None) -> LossBreakdown:
    """Training losses between one prediction and one premultiplied target."""
    pred4 = torch.cat([pred.premul_rgb, pred.alpha[..., None]], dim=2)
    if pred4.shape[:2] != (target.height, target.width):
        raise ShapeMismatchError(
            f"prediction {tuple(pred4.shape[:2])} vs target "
            f"{(target.height, target.width)}"
        )
    pred_b = pred4.permute(2, 0, 1)[None]
    tgt_b = rgba_to_tensor(target, dtype=pred_b.dtype)[None]
    return _breakdown(_batched_loss(pred_b, tgt_b, cfg, perceptual), cfg)


def _vgg16_feature_trunk() -> torch.nn.Sequential:
    """First 12 modules of VGG16's feature stack (through relu of conv3_1)."""
    conv = lambda cin, cout: torch.nn.Conv2d(cin, cout, 3, padding=1)
    return torch.nn.Sequential(
        conv(3, 64), torch.nn.ReLU(inplace=False),
        conv(64, 64), torch.nn.ReLU(inplace=False),
        torch.nn.MaxPool2d(2),
        conv(64, 128), torch.nn.ReLU(inplace=False),
        conv(128, 128), torch.nn.ReLU(inplace=False),
        torch.nn.MaxPool2d(2),
        conv(128, 256), torch.nn.ReLU(inplace=False),
    )


class PerceptualFeatures:
    """Feature-space L1 distance from a pretrained VGG16 trunk.

    Weights are an external asset located via the PROXYTEX_VGG16_WEIGHTS
    environment variable (a torch state dict in the usual VGG16 key layout,
    ``features.N.*`` or bare ``N.*``). Feature maps are taken after the
    activations of the 2nd and 5th convolution layers.
    """

    TAPS = (3, 11)  # module indices just after relu(conv1_2) and relu(conv3_1)
    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str | None = None):
        path = weights_path or os.environ.get(VGG_WEIGHTS_ENV)
        if not path or not os.path.exists(path):
            raise PerceptualUnavailableError(
                f"no VGG16 weights at {path!r}; set {VGG_WEIGHTS_ENV} or "
                "disable the perceptual term"
            )
        trunk = _vgg16_feature_trunk()
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise PerceptualUnavailableError(
                f"cannot read weights file {path}: {exc}"
            ) from exc
        state = {
            (k[len("features."):] if k.startswith("features.") else k): v
            for k, v in state.items()
        }
        needed = {k for k, _ in trunk.named_parameters()}
        missing = needed - set(state)
        if missing:
            raise PerceptualUnavailableError(
                f"weights file lacks required keys: {sorted(missing)[:4]}..."
            )
        try:
            trunk.load_state_dict({k: state[k] for k in needed}, strict=False)
        except RuntimeError as exc:
            raise PerceptualUnavailableError(
                f"weights file has wrong tensor shapes: {exc}"
            ) from exc
        trunk.eval()
        for p in trunk.parameters():
            p.requires_grad_(False)
        self.trunk = trunk

    @staticmethod
    def available(weights_path: str | None = None) -> bool:
        path = weights_path or os.environ.get(VGG_WEIGHTS_ENV)
        return bool(path) and os.path.exists(path)

    @classmethod
    def load_if_available(cls, weights_path: str | None = None):
        return cls(weights_path) if cls.available(weights_path) else None

    def _features(self, x: torch.Tensor) -> list[torch.Tensor]:
        mean = x.new_tensor(self._MEAN).view(1, 3, 1, 1)
        std = x.new_tensor(self._STD).view(1, 3, 1, 1)
        x = (x - mean) / std
        feats = []
        for i, module in enumerate(self.trunk):
            x = module(x)
            if i in self.TAPS:
                feats.append(x)
        return feats

    def distance_torch(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Mean L1 feature distance over (B, 3, H, W) stacks in [0, 1]."""
        dtype = next(self.trunk.parameters()).dtype
        fa = self._features(a.to(dtype))
        fb = self._features(b.to(dtype))
        dists = [(x - y).abs().mean() for x, y in zip(fa, fb)]
        return torch.stack(dists).mean().to(a.dtype)

    def distance(self, a: RgbImage, b: RgbImage) -> float:
        if (a.height, a.width) != (b.height, b.width):
            raise ShapeMismatchError("images must share dimensions")
        ta = torch.from_numpy(a.rgb).float().permute(2, 0, 1)[None]
        tb = torch.from_numpy(b.rgb).float().permute(2, 0, 1)[None]
        with torch.no_grad():
            return float(self.distance_torch(ta, tb))


class ViewCache:
    """Pre-rasterized buffers, samplers, and targets per (instance, view).

    Proxy geometry is constant during training, so deep buffers are
    computed once. Values are float32 for memory economy.
    """

    def __init__(self, dataset, model_config: ModelConfig):
        self.entries = []
        self.pairs = []
        intr = dataset.intrinsics
        for i_idx, inst in enumerate(dataset.instances):
            proxies = dataset.proxies_of(inst.instance_id)
            per_view = []
            for v_idx, view in enumerate(inst.views):
                buffers = [rasterize_proxy(mesh, view.pose, intr) for mesh in proxies]
                for buf in buffers:
                    buf.uv = buf.uv.astype(np.float32)
                    buf.normal = buf.normal.astype(np.float32)
                    buf.depth = buf.depth.astype(np.float32)
                    buf.coverage = buf.coverage.astype(np.float32)
                samplers = [
                    TextureSampler(buf, model_config.texture_resolution)
                    for buf in buffers
                ]
                target = rgba_to_tensor(view.get_premultiplied())
                per_view.append({"buffers": buffers, "samplers": samplers,
                                 "target": target})
                self.pairs.append((i_idx, v_idx))
            self.entries.append(per_view)

    def entry(self, i_idx: int, v_idx: int) -> dict:
        return self.entries[i_idx][v_idx]


@dataclass
class TrainState:
    """Everything needed to continue or evaluate a run."""

    model: ProxyTexModel
    model_config: ModelConfig
    train_config: TrainConfig
    optimizer: torch.optim.Adam
    sampler: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list)
    dataset_meta: dict | None = None


def init_train_state(dataset, model_config: ModelConfig,
                     train_config: TrainConfig) -> TrainState:
    instance_ids = [inst.instance_id for inst in dataset.instances]
    model = ProxyTexModel(model_config, instance_ids)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    sampler = np.random.default_rng(train_config.seed)
    from .dataset import dataset_metadata

    return TrainState(
        model=model,
        model_config=model_config,
        train_config=train_config,
        optimizer=optimizer,
        sampler=sampler,
        dataset_meta=dataset_metadata(dataset),
    )


def _forward_batch(model: ProxyTexModel, cache: ViewCache, pair_indices,
                   mode: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Render a minibatch of (instance, view) pairs -> (pred, target)."""
    entries = [cache.entry(*cache.pairs[p]) for p in pair_indices]
    inst_rows = torch.tensor([cache.pairs[p][0] for p in pair_indices])
    z = model.latents.codes[inst_rows]
    w = model.mapper(z)
    textures = [gen(w) for gen in model.generators]  # K x (B, C, R, R)
    inputs = []
    targets = []
    for b, entry in enumerate(entries):
        sampled = [
            entry["samplers"][j].sample(textures[j][b])
            for j in range(len(model.generators))
        ]
        rin = build_renderer_input(entry["buffers"], sampled, mode)
        inputs.append(rin.channels)
        targets.append(entry["target"])
    pred = model.unet(torch.stack(inputs))
    return pred, torch.stack(targets)


def train_steps(state: TrainState, dataset, cache: ViewCache | None = None,
                steps: int | None = None,
                perceptual: PerceptualFeatures | None = None,
                log_path: str | None = None) -> TrainState:
    """Run optimization steps, mutating and returning ``state``.

    Minibatches are (instance, view) pairs drawn without replacement per
    step from the seeded sampler. Raises TrainingDivergedError on a
    non-finite loss. Appends line-delimited loss records to ``log_path``.
    """
    cfg = state.train_config
    steps = cfg.steps if steps is None else steps
    if cache is None:
        cache = ViewCache(dataset, state.model_config)
    if cfg.perceptual_enabled and perceptual is None:
        perceptual = PerceptualFeatures.load_if_available()
        if perceptual is None:
            raise PerceptualUnavailableError(
                f"perceptual term requested; provide weights via "
                f"{VGG_WEIGHTS_ENV} or set perceptual_enabled=False"
            )
    n_pairs = len(cache.pairs)
    batch = min(cfg.batch_size, n_pairs)
    mode = state.model_config.input_mode
    log_fh = open(log_path, "a", encoding="ascii") if log_path else None
    try:
        for _ in range(steps):
            picks = state.sampler.choice(n_pairs, size=batch, replace=False)
            pred, target = _forward_batch(state.model, cache, picks, mode)
            terms = _batched_loss(pred, target, cfg, perceptual)
            total = terms["total"]
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at step {state.step}: "
                    + ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items())
                )
            state.optimizer.zero_grad(set_to_none=True)
            total.backward()
            state.optimizer.step()
            state.step += 1
            record = _breakdown(terms, cfg)
            if state.step % cfg.log_every == 0 or state.step == 1:
                state.history.append({"step": state.step, **record.to_dict()})
                if log_fh:
                    log_fh.write(json.dumps({"step": state.step,
                                             **record.to_dict()}) + "\n")
                    log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return state


def train(dataset, model_config: ModelConfig, train_config: TrainConfig,
          out_dir: str | None = None,
          perceptual: PerceptualFeatures | None = None) -> TrainState:
    """End-to-end run: build model + state, optimize, optionally checkpoint."""
    state = init_train_state(dataset, model_config, train_config)
    cache = ViewCache(dataset, model_config)
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "loss_log.jsonl")
    train_steps(state, dataset, cache=cache, perceptual=perceptual,
                log_path=log_path)
    if out_dir:
        save_checkpoint(state, os.path.join(out_dir, "checkpoint.pt"))
    return state


def batch_loss_over_views(state: TrainState, dataset,
                          cache: ViewCache | None = None,
                          perceptual: PerceptualFeatures | None = None) -> LossBreakdown:
    """Full-dataset loss at the current parameters (no update)."""
    if cache is None:
        cache = ViewCache(dataset, state.model_config)
    with torch.no_grad():
        pred, target = _forward_batch(
            state.model, cache, range(len(cache.pairs)),
            state.model_config.input_mode,
        )
        terms = _batched_loss(pred, target, state.train_config, perceptual)
    return _breakdown(terms, state.train_config)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(state: TrainState, path: str) -> None:
    """Single-file container: config, weights, latent table, optimizer, RNG."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "instance_ids": state.model.latents.instance_ids,
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "sampler_state": state.sampler.bit_generator.state,
        "step": state.step,
        "history": state.history,
        "dataset_meta": state.dataset_meta,
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def _load_payload(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointCorruptError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointCorruptError(f"{path} is not a checkpoint container")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {payload['format_version']} != "
            f"supported {CHECKPOINT_VERSION}"
        )
    return payload


def load_checkpoint(path: str) -> TrainState:
    """Rebuild a TrainState (model, optimizer, sampler) from disk."""
    payload = _load_payload(path)
    model_config = ModelConfig.from_dict(payload["model_config"])
    train_config = TrainConfig.from_dict(payload["train_config"])
    model = ProxyTexModel(model_config, payload["instance_ids"])
    model.load_state_dict(payload["model_state"])
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    if payload["optimizer_state"] is not None:
        optimizer.load_state_dict(payload["optimizer_state"])
    sampler = np.random.default_rng()
    if payload["sampler_state"] is not None:
        sampler.bit_generator.state = payload["sampler_state"]
    return TrainState(
        model=model,
        model_config=model_config,
        train_config=train_config,
        optimizer=optimizer,
        sampler=sampler,
        step=payload["step"],
        history=list(payload.get("history", [])),
        dataset_meta=payload.get("dataset_meta"),
    )


def clone_state(state: TrainState) -> TrainState:
    """Deep copy for fit jobs that must not mutate the source."""
    return TrainState(
        model=copy.deepcopy(state.model),
        model_config=state.model_config,
        train_config=copy.deepcopy(state.train_config),
        optimizer=copy.deepcopy(state.optimizer),
        sampler=copy.deepcopy(state.sampler),
        step=state.step,
        history=list(state.history),
        dataset_meta=copy.deepcopy(state.dataset_meta),
    )
