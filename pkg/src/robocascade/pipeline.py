"""Cascade inference, the three-way evaluation and result presentation."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .jointnet import Normalization, joint_errors, overlay, predict_joints, select_points
from .masknet import binarize_mask, mask_accuracy, predict_mask
from .neuralcore import Network
from .scene import BehindCamera, CameraModel, SplitArrays, project_point, to_uint8

# Distinct circle colors, indexed by point.
JOINT_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
]

TABLE_ROWS = (
    ("mask_accuracy", "Mask Accuracy, %", 1.0),
    ("joint_error_separate_m", "Coordinates Error (separate), cm", 100.0),
    ("joint_error_full_m", "Coordinates Error (full system), cm", 100.0),
)


def resize_float(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Box-resample an (H, W) or (H, W, C) float image."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape[:2] == (height, width):
        return img
    if img.ndim == 2:
        return np.asarray(Image.fromarray(img, mode="F").resize((width, height), Image.BOX))
    return np.stack([resize_float(img[..., c], width, height) for c in range(img.shape[2])], axis=-1)


def fit_mask(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    if mask.shape == (height, width):
        return mask
    return (resize_float(mask.astype(np.float32), width, height) >= 0.5).astype(np.uint8)


@dataclass
class CascadeResult:
    prob: np.ndarray
    mask: np.ndarray
    overlay: np.ndarray
    joints: np.ndarray
    timings_ms: dict[str, float] = field(default_factory=dict)


def run_cascade(seg_net: Network, joint_net: Network, norm: Normalization, color: np.ndarray,
                threshold: float = 0.5, soft: bool = False) -> CascadeResult:
    """Mask prediction, thresholding, overlay, joint regression on one (H, W, 3) image.

    ``soft=True`` weights the overlay by the probability map instead of the
    thresholded mask.
    """
    _, sh, sw = seg_net.input_shape
    _, jh, jw = joint_net.input_shape
    t0 = time.perf_counter()
    prob = predict_mask(seg_net, resize_float(color, sw, sh))
    t1 = time.perf_counter()
    mask = binarize_mask(prob, threshold)
    jcolor = resize_float(color, jw, jh)
    if soft:
        over = jcolor * resize_float(prob, jw, jh)[..., None]
    else:
        over = overlay(jcolor, fit_mask(mask, jw, jh))
    t2 = time.perf_counter()
    joints = predict_joints(joint_net, norm, over)
    t3 = time.perf_counter()
    timings = {"mask": (t1 - t0) * 1e3, "overlay": (t2 - t1) * 1e3, "joints": (t3 - t2) * 1e3}
    return CascadeResult(prob, mask, over, joints, timings)


class OracleSegmenter:
    """Test seam: returns the ground-truth masks as probabilities."""

    def __init__(self, split: SplitArrays):
        self._masks = split.masks

    def predict(self, colors: np.ndarray) -> np.ndarray:
        return self._masks.astype(np.float32)


class NetSegmenter:
    def __init__(self, net: Network, batch: int = 32):
        self.net = net
        self.batch = batch

    def predict(self, colors: np.ndarray) -> np.ndarray:
        _, h, w = self.net.input_shape
        if colors.shape[1:3] != (h, w):
            colors = np.stack([resize_float(c, w, h) for c in colors])
        return np.concatenate([predict_mask(self.net, colors[i:i + self.batch])
                               for i in range(0, len(colors), self.batch)])


def _require(split: SplitArrays):
    if split is None or len(split.ids) == 0:
        raise ValueError("evaluation split is empty")


def evaluate_mask(segmenter, split: SplitArrays, threshold: float = 0.5) -> tuple[float, np.ndarray]:
    """Mean pixel accuracy (%) over the split and the per-sample values."""
    _require(split)
    prob = segmenter.predict(split.colors)
    acc = np.array([mask_accuracy(binarize_mask(p, threshold), g) for p, g in zip(prob, split.masks)])
    return float(acc.mean()), acc


def _predict_batched(joint_net, norm, overlays, batch=32):
    return np.concatenate([predict_joints(joint_net, norm, overlays[i:i + batch])
                           for i in range(0, len(overlays), batch)])


def evaluate_with_masks(joint_net: Network, norm: Normalization, split: SplitArrays,
                        masks: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean joint error (m) with the given binary masks feeding the overlay.

    Returns (mean, per-sample errors, per-point mean errors).
    """
    _require(split)
    _, h, w = joint_net.input_shape
    colors = split.colors
    if colors.shape[1:3] != (h, w):
        colors = np.stack([resize_float(c, w, h) for c in colors])
    masks = np.stack([fit_mask(m, w, h) for m in masks])
    est = _predict_batched(joint_net, norm, overlay(colors, masks))
    gt = select_points(split.joints, est.shape[1])
    err = joint_errors(est, gt)
    return float(err.mean()), err.mean(axis=1), err.mean(axis=0)


def evaluate_separate(joint_net: Network, norm: Normalization, split: SplitArrays):
    """Joint error with ground-truth mask overlays as input."""
    _require(split)
    return evaluate_with_masks(joint_net, norm, split, split.masks)


def evaluate_full(segmenter, joint_net: Network, norm: Normalization, split: SplitArrays,
                  threshold: float = 0.5):
    """Joint error when the segmenter's thresholded masks feed the overlay."""
    _require(split)
    masks = binarize_mask(segmenter.predict(split.colors), threshold)
    return evaluate_with_masks(joint_net, norm, split, masks)


def centroid_baseline(train_joints: np.ndarray, split: SplitArrays, n_points: int) -> float:
    """Error of always predicting the mean training coordinates."""
    centroid = select_points(train_joints, n_points).mean(axis=0)
    gt = select_points(split.joints, n_points)
    return float(joint_errors(np.broadcast_to(centroid, gt.shape), gt).mean())


@dataclass
class EvalReport:
    robot: str
    sample_count: int
    mask_accuracy: float | None = None
    joint_error_separate_m: float | None = None
    joint_error_full_m: float | None = None
    per_point_separate_m: list[float] | None = None
    per_point_full_m: list[float] | None = None
    baseline_centroid_m: float | None = None
    all_background_accuracy: float | None = None
    per_recording: dict[str, dict] = field(default_factory=dict)
    test_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _group(values: np.ndarray, keys: list[str]) -> dict[str, float]:
    out: dict[str, list] = {}
    for v, k in zip(values, keys):
        out.setdefault(k, []).append(float(v))
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}


def build_reports(split: SplitArrays, train_ids: list[str], *, segmenter=None, joint_net=None, norm=None,
                  train_joints=None, metrics=("mask", "separate", "full"), threshold: float = 0.5) -> list[EvalReport]:
    """One EvalReport per robot tag in ``split`` (test data only)."""
    _require(split)
    leaked = set(split.ids) & set(train_ids)
    if leaked:
        raise ValueError(f"{len(leaked)} training samples found in the evaluation split")
    reports = []
    for robot in sorted(set(split.robots)):
        sel = [i for i, r in enumerate(split.robots) if r == robot]
        sub = _subset(split, sel)
        rep = EvalReport(robot, len(sel), test_ids=list(sub.ids))
        rep.all_background_accuracy = 100.0 * (1.0 - float(sub.masks.mean()))
        per_rec: dict[str, dict] = {k: {} for k in sorted(set(sub.recordings))}
        if "mask" in metrics:
            rep.mask_accuracy, acc = evaluate_mask(segmenter, sub, threshold)
            for k, v in _group(acc, sub.recordings).items():
                per_rec[k]["mask_accuracy"] = v
        if "separate" in metrics:
            rep.joint_error_separate_m, per_sample, per_point = evaluate_separate(joint_net, norm, sub)
            rep.per_point_separate_m = per_point.tolist()
            for k, v in _group(per_sample, sub.recordings).items():
                per_rec[k]["joint_error_separate_m"] = v
        if "full" in metrics:
            rep.joint_error_full_m, per_sample, per_point = evaluate_full(segmenter, joint_net, norm, sub, threshold)
            rep.per_point_full_m = per_point.tolist()
            for k, v in _group(per_sample, sub.recordings).items():
                per_rec[k]["joint_error_full_m"] = v
        if train_joints is not None and joint_net is not None:
            rep.baseline_centroid_m = centroid_baseline(train_joints, sub, joint_net.output_shape[0] // 3)
        rep.per_recording = per_rec
        reports.append(rep)
    return reports


def _subset(split: SplitArrays, sel: list[int]) -> SplitArrays:
    pick = lambda seq: [seq[i] for i in sel]  # noqa: E731
    return SplitArrays(pick(split.ids), split.colors[sel], split.masks[sel], split.joints[sel],
                       pick(split.recordings), pick(split.robots), pick(split.cameras),
                       pick(split.color_paths), pick(split.mask_paths))


def render_joint_overlay(camera: CameraModel, color: np.ndarray, joints: np.ndarray,
                         radius: float | None = None) -> tuple[np.ndarray, int]:
    """Draw one colored circle per camera-frame point; returns (uint8 image, skipped count)."""
    img = Image.fromarray(to_uint8(color) if np.asarray(color).dtype != np.uint8 else np.asarray(color))
    if radius is None:
        radius = max(1.5, img.width / 64.0)
    draw = ImageDraw.Draw(img)
    skipped = 0
    for i, p in enumerate(np.asarray(joints, dtype=float)):
        try:
            u, v = project_point(camera, p)
        except BehindCamera:
            skipped += 1
            continue
        draw.ellipse([u - radius, v - radius, u + radius, v + radius],
                     outline=JOINT_PALETTE[i % len(JOINT_PALETTE)], width=max(1, int(radius // 2)))
    return np.asarray(img), skipped


def _fmt(value: float | None, factor: float) -> str:
    if value is None:
        return ""
    return f"{round(value * factor, 2):g}"


def results_table(reports: list[EvalReport]) -> tuple[str, str]:
    """Metrics-by-robot table as (CSV text, aligned text); errors shown in centimeters."""
    if not reports:
        raise ValueError("no reports to tabulate")
    header = ["metric"] + [r.robot for r in reports]
    rows = [[label] + [_fmt(getattr(r, attr), factor) for r in reports] for attr, label, factor in TABLE_ROWS]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    widths = [max(len(row[c]) for row in [header] + rows) for c in range(len(header))]
    lines = []
    for row in [header] + rows:
        cells = [row[0].ljust(widths[0])] + [(row[c] or "-").rjust(widths[c]) for c in range(1, len(row))]
        lines.append(" | ".join(cells))
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return buf.getvalue(), "\n".join(lines) + "\n"
