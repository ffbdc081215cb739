import copy

import numpy as np
import pytest
import torch

from proxytex.dataset import Dataset, DatasetInstance, ViewRecord
from proxytex.errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    PerceptualUnavailableError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from proxytex.geometry import Pose
from proxytex.imaging import RgbaImage, RgbImage, premultiply
from proxytex.model import ModelConfig, ProxyTexModel, RenderOutput
from proxytex.synth import default_intrinsics, synthesize_dataset
from proxytex.training import (
    PerceptualFeatures,
    TrainConfig,
    ViewCache,
    batch_loss_over_views,
    compute_losses,
    init_train_state,
    load_checkpoint,
    save_checkpoint,
    train,
    train_steps,
)


def _render_output(rng, h=8, w=8):
    rgb = torch.from_numpy(rng.uniform(0, 1, (h, w, 3))).float()
    alpha = torch.from_numpy(rng.uniform(0, 1, (h, w))).float()
    return RenderOutput(premul_rgb=rgb, alpha=alpha)


def _target_from(pred: RenderOutput):
    return RgbaImage(rgb=pred.premul_rgb.numpy().astype(np.float64),
                     alpha=pred.alpha.numpy().astype(np.float64),
                     premultiplied=True)


class TestComputeLosses:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        pred = _render_output(rng)
        losses = compute_losses(pred, _target_from(pred), TrainConfig())
        assert losses.l1_premul_rgb == 0
        assert losses.l1_alpha == 0
        assert losses.l1_composite == 0
        assert losses.total == 0

    def test_constant_alpha_offset(self):
        rng = np.random.default_rng(1)
        pred = _render_output(rng)
        pred.alpha.clamp_(0.2, 0.8)
        target = _target_from(pred)
        target.alpha -= 0.1
        losses = compute_losses(pred, target, TrainConfig())
        assert losses.l1_alpha == pytest.approx(0.1, abs=1e-6)
        assert losses.l1_premul_rgb == pytest.approx(0.0, abs=1e-7)
        # Composite differs exactly by alpha * gray shift.
        assert losses.l1_composite == pytest.approx(0.05, abs=1e-6)

    def test_total_matches_scalar_recompute(self):
        rng = np.random.default_rng(2)
        pred = _render_output(rng)
        other = _render_output(np.random.default_rng(3))
        target = _target_from(other)
        cfg = TrainConfig(weight_premul_rgb=0.7, weight_alpha=1.3,
                          weight_composite=0.4)
        losses = compute_losses(pred, target, cfg)

        # Independent scalar-loop recomputation.
        p_rgb = pred.premul_rgb.numpy()
        p_a = pred.alpha.numpy()
        t_rgb, t_a = target.rgb, target.alpha
        n = 0
        s_rgb = s_alpha = s_comp = 0.0
        for i in range(8):
            for j in range(8):
                for c in range(3):
                    s_rgb += abs(p_rgb[i, j, c] - t_rgb[i, j, c])
                    pc = p_rgb[i, j, c] + (1 - p_a[i, j]) * 0.5
                    tc = t_rgb[i, j, c] + (1 - t_a[i, j]) * 0.5
                    s_comp += abs(pc - tc)
                    n += 1
                s_alpha += abs(p_a[i, j] - t_a[i, j])
        expected = (0.7 * s_rgb / n + 1.3 * s_alpha / 64 + 0.4 * s_comp / n)
        assert losses.total == pytest.approx(expected, rel=1e-5)
        recomposed = (losses.weights[0] * losses.l1_premul_rgb
                      + losses.weights[1] * losses.l1_alpha
                      + losses.weights[2] * losses.l1_composite
                      + losses.weights[3] * losses.perceptual)
        assert losses.total == pytest.approx(recomposed, abs=1e-6)

    def test_size_mismatch(self):
        rng = np.random.default_rng(4)
        pred = _render_output(rng, 8, 8)
        target = _target_from(_render_output(rng, 8, 9))
        with pytest.raises(ShapeMismatchError):
            compute_losses(pred, target, TrainConfig())

    def test_perceptual_enabled_without_extractor(self):
        rng = np.random.default_rng(5)
        pred = _render_output(rng)
        cfg = TrainConfig(perceptual_enabled=True)
        with pytest.raises(PerceptualUnavailableError):
            compute_losses(pred, _target_from(pred), cfg)


@pytest.fixture(scope="module")
def vgg_fixture(tmp_path_factory):
    """Random-weights VGG16 feature state dict in the standard key layout.

    Exercises the full loading/eval path; distances from random conv
    features still satisfy identity/symmetry/shift-continuity.
    """
    torch.manual_seed(0)
    shapes = {
        0: (64, 3), 2: (64, 64), 5: (128, 64), 7: (128, 128), 10: (256, 128),
    }
    state = {}
    for idx, (cout, cin) in shapes.items():
        state[f"features.{idx}.weight"] = torch.randn(cout, cin, 3, 3) * 0.05
        state[f"features.{idx}.bias"] = torch.randn(cout) * 0.01
    path = tmp_path_factory.mktemp("vgg") / "vgg16_features.pt"
    torch.save(state, path)
    return str(path)


class TestPerceptual:
    def test_unavailable_without_weights(self, monkeypatch):
        monkeypatch.delenv("PROXYTEX_VGG16_WEIGHTS", raising=False)
        assert not PerceptualFeatures.available()
        with pytest.raises(PerceptualUnavailableError):
            PerceptualFeatures()

    def test_identity_and_symmetry(self, vgg_fixture):
        feats = PerceptualFeatures(vgg_fixture)
        rng = np.random.default_rng(6)
        a = RgbImage(rng.uniform(0, 1, (64, 64, 3)))
        b = RgbImage(rng.uniform(0, 1, (64, 64, 3)))
        assert feats.distance(a, a) == 0.0
        assert feats.distance(a, b) == pytest.approx(feats.distance(b, a),
                                                     rel=1e-6)
        assert feats.distance(a, b) > 0

    def test_shift_distance_decreases_toward_zero(self, vgg_fixture):
        feats = PerceptualFeatures(vgg_fixture)
        rng = np.random.default_rng(7)
        base = rng.uniform(0, 1, (64 + 8, 64, 3))
        # Smooth the noise so shifts are meaningful.
        from scipy import ndimage

        base = ndimage.gaussian_filter(base, (3, 3, 0))
        base = (base - base.min()) / (base.max() - base.min())
        ref = RgbImage(base[:64])
        dists = []
        for shift in (1, 2, 3, 4):
            shifted = RgbImage(base[shift:64 + shift])
            dists.append(feats.distance(ref, shifted))
        assert all(d > 0 for d in dists)
        assert dists == sorted(dists), f"not monotone: {dists}"

    def test_env_var_pickup(self, vgg_fixture, monkeypatch):
        monkeypatch.setenv("PROXYTEX_VGG16_WEIGHTS", vgg_fixture)
        assert PerceptualFeatures.available()
        assert PerceptualFeatures.load_if_available() is not None


@pytest.fixture(scope="module")
def tiny_dataset():
    return synthesize_dataset(2, 6, image_size=64, proxy_source="analytic",
                              seed=11)


def _tiny_model_config(**overrides):
    defaults = dict(num_proxies=3, texture_resolution=32, unet_base_width=8,
                    seed=2)
    defaults.update(overrides)
    return ModelConfig(**defaults)


class TestTrainLoop:
    def test_zero_steps_equals_initialization(self, tiny_dataset):
        cfg = _tiny_model_config()
        tc = TrainConfig(learning_rate=1e-3, steps=0, batch_size=2, seed=0)
        state = train(tiny_dataset, cfg, tc)
        fresh = ProxyTexModel(cfg, [i.instance_id for i in tiny_dataset.instances])
        for (n1, p1), (n2, p2) in zip(state.model.state_dict().items(),
                                      fresh.state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2), n1

    def test_loss_decreases_on_overfit_smoke(self, tiny_dataset):
        from proxytex.dataset import restrict_views

        ds = restrict_views(tiny_dataset, "inst_0000", [0])
        cfg = _tiny_model_config()
        tc = TrainConfig(learning_rate=1e-3, steps=300, batch_size=1, seed=0,
                         log_every=300)
        state = init_train_state(ds, cfg, tc)
        cache = ViewCache(ds, cfg)
        start = batch_loss_over_views(state, ds, cache).total
        train_steps(state, ds, cache=cache)
        end = batch_loss_over_views(state, ds, cache).total
        assert end < 0.5 * start, (start, end)

    def test_gradients_reach_every_fit_space(self, tiny_dataset):
        cfg = _tiny_model_config()
        tc = TrainConfig(learning_rate=1e-3, steps=1,
                         batch_size=len(tiny_dataset.instances[0].views) * 2,
                         seed=0)
        state = init_train_state(tiny_dataset, cfg, tc)
        before = {
            "z": state.model.latents.codes.detach().clone(),
            "mapper": copy.deepcopy(state.model.mapper.state_dict()),
            "gen": copy.deepcopy(state.model.generators.state_dict()),
            "unet": copy.deepcopy(state.model.unet.state_dict()),
        }
        train_steps(state, tiny_dataset)
        assert (state.model.latents.codes - before["z"]).norm() > 0
        for name, module in [("mapper", state.model.mapper),
                             ("gen", state.model.generators),
                             ("unet", state.model.unet)]:
            delta = sum(
                (p - before[name][k]).norm().item()
                for k, p in module.state_dict().items()
            )
            assert delta > 0, name

    def test_full_batch_loss_invariant_to_view_order(self, tiny_dataset):
        cfg = _tiny_model_config()
        tc = TrainConfig(learning_rate=1e-3, steps=0, batch_size=4, seed=0)
        state = init_train_state(tiny_dataset, cfg, tc)

        shuffled = Dataset(
            intrinsics=tiny_dataset.intrinsics,
            proxy_roles=list(tiny_dataset.proxy_roles),
            instances=[
                DatasetInstance(
                    instance_id=inst.instance_id,
                    proxies=inst.proxies,
                    views=list(reversed(inst.views)),
                    spec=inst.spec,
                    analytic_proxies=inst.analytic_proxies,
                    seed=inst.seed,
                )
                for inst in tiny_dataset.instances
            ],
            pose_ranges=dict(tiny_dataset.pose_ranges),
        )
        a = batch_loss_over_views(state, tiny_dataset).total
        b = batch_loss_over_views(state, shuffled).total
        assert a == pytest.approx(b, abs=1e-6)

    def test_perceptual_toggle_changes_only_that_component(self, tiny_dataset,
                                                           vgg_fixture):
        cfg = _tiny_model_config()
        state = init_train_state(
            tiny_dataset, cfg, TrainConfig(learning_rate=1e-3, steps=0,
                                           batch_size=2, seed=0)
        )
        cache = ViewCache(tiny_dataset, cfg)
        off = batch_loss_over_views(state, tiny_dataset, cache)
        state.train_config = TrainConfig(learning_rate=1e-3, steps=0,
                                         batch_size=2, seed=0,
                                         perceptual_enabled=True)
        feats = PerceptualFeatures(vgg_fixture)
        on = batch_loss_over_views(state, tiny_dataset, cache, perceptual=feats)
        assert on.l1_premul_rgb == off.l1_premul_rgb
        assert on.l1_alpha == off.l1_alpha
        assert on.l1_composite == off.l1_composite
        assert on.perceptual > 0 and off.perceptual == 0
        assert on.total == pytest.approx(off.total + on.weights[3] * on.perceptual,
                                         rel=1e-5)

    def test_nan_loss_aborts_with_diagnostic(self, tiny_dataset):
        cfg = _tiny_model_config()
        tc = TrainConfig(learning_rate=1e-3, steps=5, batch_size=2, seed=0)
        state = init_train_state(tiny_dataset, cfg, tc)
        with torch.no_grad():
            state.model.latents.codes[0, 0] = float("nan")
        with pytest.raises(TrainingDivergedError):
            train_steps(state, tiny_dataset)

    def test_loss_log_written(self, tiny_dataset, tmp_path):
        import json

        cfg = _tiny_model_config()
        tc = TrainConfig(learning_rate=1e-3, steps=3, batch_size=2, seed=0,
                         log_every=1)
        state = init_train_state(tiny_dataset, cfg, tc)
        log = tmp_path / "loss.jsonl"
        train_steps(state, tiny_dataset, log_path=str(log))
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["step"] for r in records] == [1, 2, 3]
        for r in records:
            assert {"l1_premul_rgb", "l1_alpha", "l1_composite", "perceptual",
                    "total"} <= set(r)


class TestCheckpoints:
    def _trained_state(self, dataset, steps=2):
        cfg = _tiny_model_config()
        tc = TrainConfig(learning_rate=1e-3, steps=steps, batch_size=2, seed=0)
        return train(dataset, cfg, tc)

    def test_roundtrip_forward_bitwise(self, tiny_dataset, tmp_path):
        state = self._trained_state(tiny_dataset)
        path = tmp_path / "ck.pt"
        save_checkpoint(state, str(path))
        loaded = load_checkpoint(str(path))
        inst = tiny_dataset.instances[0]
        proxies = tiny_dataset.proxies_of(inst.instance_id)
        view = inst.views[0]
        with torch.no_grad():
            a = state.model.render_instance(inst.instance_id, view.pose,
                                            proxies, tiny_dataset.intrinsics)
            b = loaded.model.render_instance(inst.instance_id, view.pose,
                                             proxies, tiny_dataset.intrinsics)
        assert torch.equal(a.premul_rgb, b.premul_rgb)
        assert torch.equal(a.alpha, b.alpha)
        for (n1, p1), (n2, p2) in zip(state.model.state_dict().items(),
                                      loaded.model.state_dict().items()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_truncated_file_is_corrupt(self, tiny_dataset, tmp_path):
        state = self._trained_state(tiny_dataset, steps=0)
        path = tmp_path / "ck.pt"
        save_checkpoint(state, str(path))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(str(path))

    def test_version_mismatch_rejected(self, tiny_dataset, tmp_path):
        state = self._trained_state(tiny_dataset, steps=0)
        path = tmp_path / "ck.pt"
        save_checkpoint(state, str(path))
        payload = torch.load(str(path), weights_only=False)
        payload["format_version"] = 999
        torch.save(payload, str(path))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(str(path))

    def test_resume_reproduces_trajectory(self, tiny_dataset, tmp_path):
        cfg = _tiny_model_config()
        tc = TrainConfig(learning_rate=1e-3, steps=3, batch_size=2, seed=0,
                         log_every=1)
        cache = ViewCache(tiny_dataset, cfg)

        state = init_train_state(tiny_dataset, cfg, tc)
        train_steps(state, tiny_dataset, cache=cache)
        path = tmp_path / "resume.pt"
        save_checkpoint(state, str(path))

        continued = train_steps(state, tiny_dataset, cache=cache, steps=10)
        losses_unresumed = [h["total"] for h in continued.history[3:]]

        reloaded = load_checkpoint(str(path))
        resumed = train_steps(reloaded, tiny_dataset, cache=cache, steps=10)
        losses_resumed = [h["total"] for h in resumed.history[3:]]

        assert len(losses_unresumed) == len(losses_resumed) == 10
        np.testing.assert_allclose(losses_resumed, losses_unresumed,
                                   rtol=1e-5, atol=1e-7)
