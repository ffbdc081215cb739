"""Image quality metrics (PSNR, masked PSNR, SSIM, mask IoU) and the
evaluation harness over dataset splits.

PSNR and SSIM are computed on composites over the neutral gray background;
ground truth is RGBA, so a composite is required before any whole-image
comparison. Masked PSNR restricts to (ground-truth alpha > 0.1) dilated by
a Euclidean disc of radius 7 pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .errors import EmptyMaskError, ShapeMismatchError
from .imaging import RgbImage, composite_over_gray

PSNR_CAP_DB = 99.0
MASK_ALPHA_THRESHOLD = 0.1
MASK_DILATION_RADIUS = 7
IOU_THRESHOLD = 0.5

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_rgb_array(img) -> np.ndarray:
    arr = img.rgb if isinstance(img, RgbImage) else np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """10 * log10(1 / MSE) over all pixels and channels, capped at 99 dB."""
    x, y = _as_rgb_array(a), _as_rgb_array(b)
    _check_same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def dilation_disc(radius: int = MASK_DILATION_RADIUS) -> np.ndarray:
    """Euclidean disc structuring element: x^2 + y^2 <= r^2."""
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy ** 2 + xx ** 2) <= radius ** 2


def alpha_mask(gt_alpha: np.ndarray, radius: int = MASK_DILATION_RADIUS) -> np.ndarray:
    """(alpha > 0.1) dilated by a disc of the given radius."""
    base = np.asarray(gt_alpha, dtype=np.float64) > MASK_ALPHA_THRESHOLD
    if not base.any():
        raise EmptyMaskError("ground-truth alpha mask is empty")
    return ndimage.binary_dilation(base, structure=dilation_disc(radius))


def psnr_masked(a, b, gt_alpha) -> float:
    """PSNR restricted to the dilated ground-truth alpha mask."""
    x, y = _as_rgb_array(a), _as_rgb_array(b)
    _check_same_shape(x, y)
    mask = alpha_mask(np.asarray(gt_alpha))
    if mask.shape != x.shape[:2]:
        raise ShapeMismatchError("alpha shape does not match images")
    mse = float(np.mean((x[mask] - y[mask]) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b) -> float:
    """Mean local SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1, averaged over channels and valid windows."""
    x, y = _as_rgb_array(a), _as_rgb_array(b)
    _check_same_shape(x, y)
    h, w = x.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    window = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    half = SSIM_WINDOW // 2
    crop = (slice(half, h - half), slice(half, w - half))

    def local_mean(img2d):
        return ndimage.correlate(img2d, window, mode="constant")[crop]

    scores = []
    for c in range(3):
        xc, yc = x[..., c], y[..., c]
        mu_x = local_mean(xc)
        mu_y = local_mean(yc)
        var_x = local_mean(xc * xc) - mu_x ** 2
        var_y = local_mean(yc * yc) - mu_y ** 2
        cov = local_mean(xc * yc) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def mask_iou(alpha_a, alpha_b) -> float:
    """IoU of alpha masks thresholded at 0.5; two empty masks score 1.0."""
    a = np.asarray(alpha_a, dtype=np.float64) > IOU_THRESHOLD
    b = np.asarray(alpha_b, dtype=np.float64) > IOU_THRESHOLD
    if a.shape != b.shape:
        raise ShapeMismatchError(f"alpha shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


METRIC_NAMES = ("psnr", "psnr_m", "ssim", "mask_iou")


@dataclass
class EvalReport:
    """Per-instance and aggregate metric means over an evaluation split."""

    split: str
    per_instance: dict[str, dict] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)
    view_count: int = 0

    def to_text_table(self) -> str:
        header = f"{'instance':<14}{'views':>6}" + "".join(
            f"{m:>10}" for m in METRIC_NAMES
        )
        lines = [header, "-" * len(header)]
        for iid, row in self.per_instance.items():
            lines.append(
                f"{iid:<14}{row['views']:>6}"
                + "".join(f"{row[m]:>10.4f}" for m in METRIC_NAMES)
            )
        lines.append("-" * len(header))
        lines.append(
            f"{'mean':<14}{self.view_count:>6}"
            + "".join(f"{self.aggregate[m]:>10.4f}" for m in METRIC_NAMES)
        )
        return "\n".join(lines)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            for iid, row in self.per_instance.items():
                fh.write(json.dumps({"instance": iid, "split": self.split, **row}) + "\n")
            fh.write(json.dumps({"instance": "__aggregate__", "split": self.split,
                                 "views": self.view_count, **self.aggregate}) + "\n")


def view_metrics(pred_rgba, gt_rgba) -> dict[str, float]:
    """All four metrics for one premultiplied prediction/ground-truth pair."""
    pred_comp = composite_over_gray(pred_rgba)
    gt_comp = composite_over_gray(gt_rgba)
    return {
        "psnr": psnr(pred_comp, gt_comp),
        "psnr_m": psnr_masked(pred_comp, gt_comp, gt_rgba.alpha),
        "ssim": ssim(pred_comp, gt_comp),
        "mask_iou": mask_iou(pred_rgba.alpha, gt_rgba.alpha),
    }


def evaluate(model, dataset, split: dict[str, list[int]],
             split_name: str = "holdout", mode: str | None = None) -> EvalReport:
    """Render every (instance, view) in the split and aggregate metrics.

    Predictions and ground truth are composited over neutral gray for
    PSNR/SSIM; masked PSNR uses the ground-truth alpha; IoU compares alpha
    channels. Aggregates are means of the per-instance means.
    """
    report = EvalReport(split=split_name)
    model.eval()
    for instance_id, view_indices in split.items():
        inst = dataset.instance(instance_id)
        proxies = dataset.proxies_of(instance_id)
        sums = {m: 0.0 for m in METRIC_NAMES}
        for v_idx in view_indices:
            if not (0 <= v_idx < len(inst.views)):
                raise ValueError(
                    f"instance {instance_id!r} has no view {v_idx} "
                    "(missing ground truth)"
                )
            view = inst.views[v_idx]
            with torch.no_grad():
                out = model.render_instance(
                    instance_id, view.pose, proxies, dataset.intrinsics, mode=mode
                )
            gt = view.get_premultiplied()
            for m, value in view_metrics(out.to_rgba(), gt).items():
                sums[m] += value
        n = len(view_indices)
        report.per_instance[instance_id] = {
            "views": n, **{m: sums[m] / n for m in METRIC_NAMES}
        }
        report.view_count += n
    for m in METRIC_NAMES:
        vals = [row[m] for row in report.per_instance.values()]
        report.aggregate[m] = float(np.mean(vals)) if vals else float("nan")
    return report
