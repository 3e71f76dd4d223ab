"""Joint-coordinate regression network on mask-overlaid color images."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .masknet import TrainingDiverged, to_chw
from .neuralcore import Network, NonFiniteError, Schedule, SGDMomentum, load_checkpoint


@dataclass
class JointNetConfig:
    width: int = 64
    height: int = 53
    filters: tuple[int, ...] = (32, 64, 128)
    dilations: tuple[int, ...] = (1, 2, 4)
    kernel: int = 3
    pool: int = 2
    n_points: int = 7
    epochs: int = 200
    batch_size: int = 32
    lr_start: float = 0.03
    lr_end: float = 1e-4
    momentum_start: float = 0.9
    momentum_end: float = 0.999

    @classmethod
    def profile(cls, name: str, **overrides) -> "JointNetConfig":
        if name == "desk":
            cfg = cls()
        elif name == "full":
            cfg = cls(width=256, height=212, batch_size=128, epochs=5000)
        else:
            raise ValueError(f"unknown profile {name!r}")
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg

    def lr_schedule(self) -> Schedule:
        return Schedule(self.lr_start, self.lr_end, self.epochs, "exponential")

    def momentum_schedule(self) -> Schedule:
        return Schedule(self.momentum_start, self.momentum_end, self.epochs, "linear")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["dilations"] = list(self.dilations)
        return d


def jointnet_specs(cfg: JointNetConfig) -> list[dict]:
    if len(cfg.filters) != len(cfg.dilations):
        raise ValueError("one dilation per convolution is required")
    specs = []
    cin = 3
    for i, (f, d) in enumerate(zip(cfg.filters, cfg.dilations)):
        specs += [
            {"kind": "conv2d", "in_channels": cin, "out_channels": f, "kernel": cfg.kernel, "dilation": d, "stride": 1},
            {"kind": "relu"},
        ]
        if i < len(cfg.filters) - 1:
            specs.append({"kind": "maxpool2d", "window": cfg.pool, "stride": cfg.pool})
        cin = f
    h, w = cfg.height, cfg.width
    for _ in range(len(cfg.filters) - 1):
        h, w = h // cfg.pool, w // cfg.pool
    specs.append({"kind": "dense", "in_features": cin * h * w, "out_features": 3 * cfg.n_points})
    return specs


def build_jointnet(cfg: JointNetConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network.from_specs(jointnet_specs(cfg), (3, cfg.height, cfg.width), seed=seed, dtype=dtype)


def overlay(color: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero every background pixel of ``color`` (..., H, W, 3) under binary ``mask`` (..., H, W)."""
    color = np.asarray(color)
    mask = np.asarray(mask)
    if color.shape[:-1] != mask.shape:
        raise ValueError(f"color {color.shape} and mask {mask.shape} do not align")
    return color * (mask != 0)[..., None].astype(color.dtype)


def joint_errors(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-point Euclidean distances; works on (K, 3) or batched (N, K, 3)."""
    est, gt = np.asarray(est, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"point count mismatch: {est.shape} vs {gt.shape}")
    return np.linalg.norm(est - gt, axis=-1)


def joint_loss(est: np.ndarray, gt: np.ndarray) -> float:
    """Mean over points of the Euclidean distance between estimate and ground truth."""
    return float(joint_errors(est, gt).mean())


def joint_error(est: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    per_point = joint_errors(est, gt)
    return float(per_point.mean()), per_point


def joint_loss_grad(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Gradient of the batch-mean joint loss w.r.t. ``est`` (N, K, 3); zero at coincident points."""
    diff = np.asarray(est, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    n, k = diff.shape[0], diff.shape[1]
    return np.where(norm > 1e-12, diff / np.maximum(norm, 1e-12), 0.0) / (n * k)


@dataclass
class Normalization:
    mean: np.ndarray   # (3,)
    scale: np.ndarray  # (3,)

    @classmethod
    def fit(cls, joints: np.ndarray) -> "Normalization":
        pts = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
        scale = pts.std(axis=0)
        return cls(pts.mean(axis=0), np.where(scale > 1e-9, scale, 1.0))

    def encode(self, pts):
        return (np.asarray(pts) - self.mean) / self.scale

    def decode(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def select_points(joints: np.ndarray, n_points: int) -> np.ndarray:
    """Keep the first ``n_points`` of each (.., K, 3) label (dropping the end-effector when K - 1)."""
    joints = np.asarray(joints)
    if n_points > joints.shape[-2]:
        raise ValueError(f"labels hold {joints.shape[-2]} points, {n_points} requested")
    return joints[..., :n_points, :]


@dataclass
class JointTrainResult:
    net: Network
    norm: Normalization
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)
    seconds: float = 0.0


def train_jointnet(overlays: np.ndarray, joints: np.ndarray, cfg: JointNetConfig, seed: int = 0,
                   progress=None) -> JointTrainResult:
    """Fit the regressor to camera-frame points.

    ``overlays`` (N, H, W, 3) are mask-overlaid colors, ``joints`` (N, K, 3)
    meters. The network predicts normalized coordinates; the loss is the
    metric joint loss after denormalization. ``curve`` rows are
    (epoch, mean loss in meters, learning rate, momentum).
    """
    n = len(overlays)
    if n == 0:
        raise ValueError("training split is empty")
    if overlays.shape[1:3] != (cfg.height, cfg.width):
        raise ValueError(f"images are {overlays.shape[1:3]}, config expects {(cfg.height, cfg.width)}")
    targets = select_points(joints, cfg.n_points).astype(np.float64)
    norm = Normalization.fit(targets)
    x_all = to_chw(overlays)
    net = build_jointnet(cfg, seed)
    params = net.named_params()
    opt = SGDMomentum(params, cfg.lr_start, cfg.momentum_start)
    lr_s, mu_s = cfg.lr_schedule(), cfg.momentum_schedule()
    order_rng = np.random.default_rng([seed, 1])
    result = JointTrainResult(net, norm)
    k = cfg.n_points
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        opt.lr = lr_s.value(epoch)
        opt.momentum = mu_s.value(epoch)
        order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                out = net.forward(x_all[idx])
                est = norm.decode(out.reshape(len(idx), k, 3))
                loss = float(joint_errors(est, targets[idx]).mean())
                if not np.isfinite(loss):
                    raise NonFiniteError("loss is not finite")
                grad = joint_loss_grad(est, targets[idx]) * norm.scale
                net.backward(grad.reshape(len(idx), 3 * k).astype(out.dtype))
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch at {start}: {exc}") from exc
            opt.step(params, net.named_grads())
            total += loss * len(idx)
        mean = total / n
        result.curve.append((epoch, mean, opt.lr, opt.momentum))
        if progress is not None:
            progress(epoch, mean, opt.lr)
    result.seconds = time.perf_counter() - t0
    return result


def predict_joints(net: Network, norm: Normalization, image: np.ndarray) -> np.ndarray:
    """(K, 3) camera-frame meters for one (H, W, 3) overlay, or (N, K, 3) for a batch."""
    single = np.asarray(image).ndim == 3
    x = to_chw(image)
    if x.shape[1:] != net.input_shape:
        c, h, w = net.input_shape
        raise ValueError(f"checkpoint expects {w}x{h} input, got {x.shape[3]}x{x.shape[2]}")
    out = np.concatenate([net.forward(x[i:i + 1]) for i in range(len(x))])
    pts = norm.decode(out.reshape(len(x), -1, 3))
    return pts[0] if single else pts


def load_jointnet(directory) -> tuple[Network, Normalization, dict]:
    net, meta = load_checkpoint(directory)
    if meta.get("model") != "jointnet":
        raise ValueError(f"{directory} does not hold a joint network checkpoint")
    return net, Normalization.from_dict(meta["normalization"]), meta
