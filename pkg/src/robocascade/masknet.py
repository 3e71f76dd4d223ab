"""Robot-body segmentation network: dilated conv stack, class-balanced loss, training."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .neuralcore import Network, NonFiniteError, Schedule, SGDMomentum, load_checkpoint

log = logging.getLogger(__name__)

WEIGHT_CLAMP = 1e-4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MaskNetConfig:
    width: int = 64
    height: int = 53
    filters: int = 32
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    kernel: int = 3
    epochs: int = 200
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    momentum: float = 0.9
    clip_eps: float = 1e-7

    @classmethod
    def profile(cls, name: str, **overrides) -> "MaskNetConfig":
        if name == "desk":
            # 25x fewer epochs: start higher, keep the 1000x decay ratio.
            cfg = cls(lr_start=0.03, lr_end=3e-5)
        elif name == "full":
            cfg = cls(width=256, height=212, batch_size=128, epochs=5000)
        else:
            raise ValueError(f"unknown profile {name!r}")
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg

    def schedule(self) -> Schedule:
        return Schedule(self.lr_start, self.lr_end, self.epochs, "exponential")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


def masknet_specs(cfg: MaskNetConfig) -> list[dict]:
    specs = []
    cin = 3
    for d in cfg.dilations:
        specs += [
            {"kind": "conv2d", "in_channels": cin, "out_channels": cfg.filters, "kernel": cfg.kernel,
             "dilation": d, "stride": 1},
            {"kind": "relu"},
        ]
        cin = cfg.filters
    specs += [
        {"kind": "conv2d", "in_channels": cin, "out_channels": 1, "kernel": cfg.kernel, "dilation": 1, "stride": 1},
        {"kind": "sigmoid"},
    ]
    return specs


def build_masknet(cfg: MaskNetConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network.from_specs(masknet_specs(cfg), (3, cfg.height, cfg.width), seed=seed, dtype=dtype)


@dataclass(frozen=True)
class ClassWeights:
    w_fg: float
    w_bg: float
    p_fg: float


def class_weights(mask: np.ndarray) -> ClassWeights:
    """Inverse class probabilities of a binary mask, with P(fg) clamped away from 0 and 1."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("mask has no pixels")
    p = float(np.count_nonzero(mask)) / mask.size
    p = min(max(p, WEIGHT_CLAMP), 1.0 - WEIGHT_CLAMP)
    return ClassWeights(1.0 / p, 1.0 / (1.0 - p), p)


def _pixel_terms(est, gt, w_fg, w_bg, clip_eps):
    e = np.clip(est, clip_eps, 1.0 - clip_eps)
    return -(w_fg * gt * np.log(e) + w_bg * (1.0 - gt) * np.log(1.0 - e))


def seg_loss(est: np.ndarray, gt: np.ndarray, weights: ClassWeights, clip_eps: float = 1e-7,
             literal: bool = False) -> float:
    """Class-weighted cross-entropy averaged over the image's pixels.

    ``literal=True`` swaps the roles of estimate and ground truth inside the
    logarithm (clipping the ground truth instead); it is for reporting only,
    since its gradient vanishes on binary ground truth.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {gt.shape}")
    if literal:
        terms = _pixel_terms(gt, est, weights.w_fg, weights.w_bg, clip_eps)
    else:
        terms = _pixel_terms(est, gt, weights.w_fg, weights.w_bg, clip_eps)
    return float(terms.sum() / terms.size)


def seg_loss_grad(est: np.ndarray, gt: np.ndarray, weights: ClassWeights, clip_eps: float = 1e-7) -> np.ndarray:
    """d seg_loss / d est (zero where the clip is active)."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    inside = (est > clip_eps) & (est < 1.0 - clip_eps)
    e = np.clip(est, clip_eps, 1.0 - clip_eps)
    g = -(weights.w_fg * gt / e) + weights.w_bg * (1.0 - gt) / (1.0 - e)
    return np.where(inside, g, 0.0) / est.size


def batch_seg_loss(est: np.ndarray, gt: np.ndarray, w: np.ndarray, clip_eps: float):
    """Mean per-image loss of an (N, 1, H, W) batch and its gradient.

    ``w`` holds per-image (w_fg, w_bg) rows.
    """
    n = est.shape[0]
    e64 = est.astype(np.float64)
    g64 = gt.reshape(est.shape).astype(np.float64)
    wf = w[:, 0].reshape(n, 1, 1, 1)
    wb = w[:, 1].reshape(n, 1, 1, 1)
    npix = est[0].size
    e = np.clip(e64, clip_eps, 1.0 - clip_eps)
    terms = -(wf * g64 * np.log(e) + wb * (1.0 - g64) * np.log(1.0 - e))
    loss = float(terms.sum() / (npix * n))
    inside = (e64 > clip_eps) & (e64 < 1.0 - clip_eps)
    grad = np.where(inside, -(wf * g64 / e) + wb * (1.0 - g64) / (1.0 - e), 0.0) / (npix * n)
    return loss, grad.astype(est.dtype)


def to_chw(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) or (H, W, 3) float images to (N, 3, H, W)."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


@dataclass
class TrainResult:
    net: Network
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    seconds: float = 0.0


def train_masknet(images: np.ndarray, masks: np.ndarray, cfg: MaskNetConfig, seed: int = 0,
                  progress=None) -> TrainResult:
    """SGD with momentum on shuffled mini-batches; per-image class weights.

    ``images`` is (N, H, W, 3) in [0, 1] at the configured size, ``masks``
    (N, H, W) binary. ``curve`` rows are (epoch, mean loss, learning rate).
    """
    n = len(images)
    if n == 0:
        raise ValueError("training split is empty")
    if images.shape[1:3] != (cfg.height, cfg.width):
        raise ValueError(f"images are {images.shape[1:3]}, config expects {(cfg.height, cfg.width)}")
    x_all = to_chw(images)
    m_all = np.asarray(masks, dtype=np.float32)
    w_all = np.array([[cw.w_fg, cw.w_bg] for cw in map(class_weights, masks)])

    net = build_masknet(cfg, seed)
    params = net.named_params()
    opt = SGDMomentum(params, cfg.lr_start, cfg.momentum)
    sched = cfg.schedule()
    order_rng = np.random.default_rng([seed, 1])
    result = TrainResult(net)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        opt.lr = sched.value(epoch)
        order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                est = net.forward(x_all[idx])
                loss, grad = batch_seg_loss(est, m_all[idx], w_all[idx], cfg.clip_eps)
                if not np.isfinite(loss):
                    raise NonFiniteError("loss is not finite")
                net.backward(grad)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch at {start}: {exc}") from exc
            opt.step(params, net.named_grads())
            total += loss * len(idx)
        mean = total / n
        result.curve.append((epoch, mean, opt.lr))
        if progress is not None:
            progress(epoch, mean, opt.lr)
    result.seconds = time.perf_counter() - t0
    return result


def predict_mask(net: Network, image: np.ndarray) -> np.ndarray:
    """Foreground probability for one (H, W, 3) image or an (N, H, W, 3) batch."""
    single = np.asarray(image).ndim == 3
    x = to_chw(image)
    c, h, w = net.input_shape
    if x.shape[1:] != (c, h, w):
        raise ValueError(f"checkpoint expects {w}x{h} input, got {x.shape[3]}x{x.shape[2]}")
    # One sample per forward pass keeps results independent of batch size.
    out = np.concatenate([net.forward(x[i:i + 1])[:, 0] for i in range(len(x))])
    return out[0] if single else out


def binarize_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def mask_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    """Percentage of pixels where the binary prediction equals the ground truth."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return 100.0 * float(np.count_nonzero((pred != 0) == (gt != 0))) / pred.size


def load_masknet(directory) -> tuple[Network, dict]:
    net, meta = load_checkpoint(directory)
    if meta.get("model") != "masknet":
        raise ValueError(f"{directory} does not hold a mask network checkpoint")
    return net, meta
