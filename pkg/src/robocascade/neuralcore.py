"""Small numpy network substrate: five layer kinds, SGD with momentum,
schedules, finite-difference gradient checking and a binary checkpoint format.

Activations travel through the network in (C, N, H, W) order so that every
convolution is a single matrix product against an im2col buffer without a
transpose. ``Network.forward`` takes and returns the usual (N, C, H, W).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "robocascade-checkpoint/1"


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


def _check_finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return a


# --- layers ----------------------------------------------------------------

class Layer:
    kind = ""
    params: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}

    def spec(self) -> dict:
        return {"kind": self.kind}

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def init(self, rng: np.random.Generator, dtype) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Layer):
    """Dilated cross-correlation with zero "same" padding."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, dilation: int = 1, stride: int = 1):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if dilation < 1 or stride < 1:
            raise ValueError("dilation and stride must be >= 1")
        self.cin, self.cout = in_channels, out_channels
        self.k, self.d, self.s = kernel, dilation, stride
        self.pad = dilation * (kernel - 1) // 2

    @property
    def receptive_field(self) -> int:
        return self.d * (self.k - 1) + 1

    def spec(self) -> dict:
        return {"kind": self.kind, "in_channels": self.cin, "out_channels": self.cout,
                "kernel": self.k, "dilation": self.d, "stride": self.s}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise ValueError(f"conv2d expects {self.cin} channels, got {c}")
        span = self.receptive_field
        return (self.cout, (h + 2 * self.pad - span) // self.s + 1, (w + 2 * self.pad - span) // self.s + 1)

    def init(self, rng, dtype):
        fan_in = self.cin * self.k * self.k
        self.params["weight"] = fan_in_uniform(rng, (self.cout, self.cin, self.k, self.k), fan_in, dtype)
        self.params["bias"] = np.zeros(self.cout, dtype=dtype)

    def forward(self, x):
        C, N, H, W = x.shape
        if C != self.cin:
            raise ValueError(f"conv2d expects {self.cin} input channels, got {C}")
        k, d, s, p = self.k, self.d, self.s, self.pad
        _, Ho, Wo = self.output_shape((C, H, W))
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((C, k, k, N, Ho, Wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i * d:i * d + s * (Ho - 1) + 1:s, j * d:j * d + s * (Wo - 1) + 1:s]
        cols = cols.reshape(C * k * k, N * Ho * Wo)
        w = self.params["weight"].reshape(self.cout, -1)
        out = w @ cols
        out += self.params["bias"][:, None]
        self._cache = (cols, x.shape, (Ho, Wo))
        return out.reshape(self.cout, N, Ho, Wo)

    def backward(self, g, need_input_grad=True):
        cols, (C, N, H, W), (Ho, Wo) = self._cache
        g2 = g.reshape(self.cout, -1)
        w = self.params["weight"]
        self.grads["weight"] = (g2 @ cols.T).reshape(w.shape)
        self.grads["bias"] = g2.sum(axis=1)
        if not need_input_grad:
            return None
        k, d, s, p = self.k, self.d, self.s, self.pad
        dcols = (w.reshape(self.cout, -1).T @ g2).reshape(C, k, k, N, Ho, Wo)
        dxp = np.zeros((C, N, H + 2 * p, W + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i * d:i * d + s * (Ho - 1) + 1:s, j * d:j * d + s * (Wo - 1) + 1:s] += dcols[:, i, j]
        return dxp[:, :, p:p + H, p:p + W] if p else dxp


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, window: int = 2, stride: int | None = None):
        super().__init__()
        if window < 2:
            raise ValueError("pooling window must be >= 2")
        self.window = window
        self.stride = window if stride is None else stride
        if self.stride != self.window:
            raise ValueError("only non-overlapping pooling (stride == window) is supported")

    def spec(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.window or w < self.window:
            raise ValueError(f"pool window {self.window} larger than input {h}x{w}")
        return (c, h // self.window, w // self.window)

    def forward(self, x):
        C, N, H, W = x.shape
        _, Ho, Wo = self.output_shape((C, H, W))
        k = self.window
        blocks = (x[:, :, :Ho * k, :Wo * k]
                  .reshape(C, N, Ho, k, Wo, k)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(C, N, Ho, Wo, k * k))
        self.argmax = blocks.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, g, need_input_grad=True):
        C, N, H, W = self._shape
        k = self.window
        Ho, Wo = g.shape[2], g.shape[3]
        blocks = np.zeros((C, N, Ho, Wo, k * k), dtype=g.dtype)
        np.put_along_axis(blocks, self.argmax[..., None], g[..., None], axis=-1)
        dx = np.zeros((C, N, H, W), dtype=g.dtype)
        dx[:, :, :Ho * k, :Wo * k] = (blocks.reshape(C, N, Ho, Wo, k, k)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(C, N, Ho * k, Wo * k))
        return dx


class Dense(Layer):
    """Fully connected layer ``W x + b``; flattens (C, N, H, W) input per sample."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.nin, self.nout = in_features, out_features

    def spec(self):
        return {"kind": self.kind, "in_features": self.nin, "out_features": self.nout}

    def output_shape(self, shape):
        if math.prod(shape) != self.nin:
            raise ValueError(f"dense expects {self.nin} inputs, got {shape}")
        return (self.nout,)

    def init(self, rng, dtype):
        self.params["weight"] = fan_in_uniform(rng, (self.nout, self.nin), self.nin, dtype)
        self.params["bias"] = np.zeros(self.nout, dtype=dtype)

    def forward(self, x):
        self._in_shape = x.shape
        if x.ndim == 4:
            x = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
        if x.shape[1] != self.nin:
            raise ValueError(f"dense expects {self.nin} inputs, got {x.shape[1]}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, g, need_input_grad=True):
        self.grads["weight"] = g.T @ self._x
        self.grads["bias"] = g.sum(axis=0)
        if not need_input_grad:
            return None
        dx = g @ self.params["weight"]
        if len(self._in_shape) == 4:
            C, N, H, W = self._in_shape
            dx = dx.reshape(N, C, H, W).transpose(1, 0, 2, 3)
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._on = x > 0
        return np.where(self._on, x, 0).astype(x.dtype, copy=False)

    def backward(self, g, need_input_grad=True):
        return np.where(self._on, g, 0).astype(g.dtype, copy=False)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        # exp of -|x| never overflows
        e = np.exp(-np.abs(x))
        self._y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        return self._y

    def backward(self, g, need_input_grad=True):
        return g * self._y * (1 - self._y)


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, MaxPool2d, Dense, ReLU, Sigmoid)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**spec)


# --- network ---------------------------------------------------------------

class Network:
    """A sequential stack of layers with named parameters ``"<index>.<name>"``."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.output_shape = self.shape_trace()[-1]

    @classmethod
    def from_specs(cls, specs: list[dict], input_shape, seed: int | None = 0, dtype=np.float32) -> "Network":
        net = cls([layer_from_spec(s) for s in specs], input_shape)
        if seed is not None:
            net.initialize(seed, dtype)
        return net

    def shape_trace(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def initialize(self, seed: int, dtype=np.float32) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng, dtype)

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        expected = self.named_params()
        if set(params) != set(expected):
            raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(expected))}")
        for i, layer in enumerate(self.layers):
            for k, old in layer.params.items():
                new = np.asarray(params[f"{i}.{k}"])
                if new.shape != old.shape:
                    raise ValueError(f"parameter {i}.{k}: shape {new.shape} != {old.shape}")
                layer.params[k] = new

    def astype(self, dtype) -> "Network":
        net = Network([layer_from_spec(s) for s in self.specs()], self.input_shape)
        for src, dst in zip(self.layers, net.layers):
            dst.params = {k: v.astype(dtype) for k, v in src.params.items()}
        return net

    @property
    def dtype(self):
        for v in self.named_params().values():
            return v.dtype
        return np.dtype(np.float32)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run (N, C, H, W) input; returns (N, C', H', W') or (N, F)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"network expects input {self.input_shape}, got {tuple(x.shape[1:])}")
        h = np.ascontiguousarray(_check_finite(x, "network input").transpose(1, 0, 2, 3))
        for i, layer in enumerate(self.layers):
            h = _check_finite(layer.forward(h), f"forward of layer {i} ({layer.kind})")
        return h.transpose(1, 0, 2, 3) if h.ndim == 4 else h

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = False) -> np.ndarray | None:
        """Back-propagate dLoss/dOutput; fills each layer's ``grads``."""
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.ndim == 4:
            g = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = layer.backward(g, need_input_grad=need_input_grad or i > 0)
            if g is not None:
                _check_finite(g, f"backward of layer {i} ({layer.kind})")
        if g is None:
            return None
        return g.transpose(1, 0, 2, 3)


# --- optimisation ----------------------------------------------------------

@dataclass
class Schedule:
    start: float
    end: float
    total: int
    kind: str = "exponential"

    def __post_init__(self):
        if self.kind not in ("exponential", "linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total < 1:
            raise ValueError("schedule needs at least one epoch")
        if self.kind == "exponential" and (self.start <= 0 or self.end <= 0):
            raise ValueError("exponential schedule needs positive endpoints")

    def value(self, epoch: int) -> float:
        if not 0 <= epoch < self.total:
            raise ValueError(f"epoch {epoch} outside [0, {self.total})")
        if epoch == 0 or self.total == 1:
            return self.start
        if epoch == self.total - 1:
            return self.end
        frac = epoch / (self.total - 1)
        if self.kind == "linear":
            return self.start + (self.end - self.start) * frac
        return self.start * (self.end / self.start) ** frac

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def schedule_value(schedule: Schedule, epoch: int) -> float:
    return schedule.value(epoch)


class SGDMomentum:
    """``v <- mu v - lr g``; ``p <- p + v``."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        for name, p in params.items():
            v = self.velocity[name]
            if v.shape != p.shape:
                raise ValueError(f"velocity shape mismatch for {name}")
            v *= self.momentum
            v -= self.lr * grads[name]
            p += v


def sgd_momentum_step(params, grads, optimizer: SGDMomentum) -> dict[str, np.ndarray]:
    optimizer.step(params, grads)
    return params


# --- gradient checking -----------------------------------------------------

def _branches(net: Network) -> list[np.ndarray]:
    """Which side of every ReLU and which max-pool winner the last forward pass took."""
    out = []
    for layer in net.layers:
        if isinstance(layer, ReLU):
            out.append(layer._on.copy())
        elif isinstance(layer, MaxPool2d):
            out.append(layer.argmax.copy())
    return out


def grad_check(net: Network, loss_fn, x: np.ndarray, eps: float = 1e-4, n_coords: int = 120,
               seed: int = 0, include_input: bool = True, skip_kinks: bool = True) -> float:
    """Max relative error between back-propagated and central-difference gradients.

    ``loss_fn(output) -> (loss, dloss/doutput)``. Works on a float64 copy of
    ``net``. Coordinates are drawn from every parameter tensor (and the input).
    With ``skip_kinks`` a coordinate whose +-eps evaluations switch any ReLU or
    max-pool branch is replaced by a fresh one: the difference quotient spans a
    non-differentiable point there and says nothing about the backward pass.
    ``last_skipped`` on the function records how many were replaced.
    """
    net = net.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)

    def loss_at() -> float:
        return float(loss_fn(net.forward(x))[0])

    _, g = loss_fn(net.forward(x))
    base = _branches(net)
    gx = net.backward(g, need_input_grad=include_input)
    analytic = dict(net.named_grads())
    tensors = dict(net.named_params())
    if include_input:
        analytic["input"] = gx
        tensors["input"] = x

    rng = np.random.default_rng(seed)
    names = sorted(tensors)
    total = sum(t.size for t in tensors.values())
    picks = []
    for name in names:
        size = tensors[name].size
        n = min(size, max(2, int(round(n_coords * size / total))))
        picks += [(name, int(i)) for i in rng.choice(size, size=n, replace=False)]

    def crossed() -> bool:
        return skip_kinks and any(not np.array_equal(a, b) for a, b in zip(base, _branches(net)))

    worst = 0.0
    checked = skipped = 0
    while checked < max(n_coords, len(picks)):
        if picks:
            name, idx = picks.pop()
        else:
            name = names[rng.integers(len(names))]
            idx = int(rng.integers(tensors[name].size))
        t = tensors[name].reshape(-1)
        orig = t[idx]
        t[idx] = orig + eps
        up = loss_at()
        kink = crossed()
        t[idx] = orig - eps
        down = loss_at()
        kink = kink or crossed()
        t[idx] = orig
        if kink:
            skipped += 1
            if skipped > 20 * n_coords:
                raise RuntimeError("almost every coordinate crosses a kink; use a smaller eps")
            continue
        numeric = (up - down) / (2 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    grad_check.last_skipped = skipped
    return worst


grad_check.last_skipped = 0


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(net: Network, directory: str | Path, meta: dict | None = None) -> Path:
    """Write ``checkpoint.json`` (descriptor + tensor table) and ``checkpoint.bin`` (f32 little-endian)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    with open(directory / "checkpoint.bin", "wb") as fh:
        for name, value in net.named_params().items():
            data = np.ascontiguousarray(value, dtype="<f4").tobytes()
            table.append({"name": name, "shape": list(value.shape), "offset": offset, "dtype": "f32le"})
            fh.write(data)
            offset += len(data)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "architecture": {"input_shape": list(net.input_shape), "layers": net.specs()},
        "tensors": table,
        "meta": meta or {},
    }
    path = directory / "checkpoint.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(directory: str | Path) -> tuple[Network, dict]:
    directory = Path(directory)
    doc_path = directory / "checkpoint.json"
    if not doc_path.is_file():
        raise FileNotFoundError(f"no checkpoint.json in {directory}")
    doc = json.loads(doc_path.read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    arch = doc["architecture"]
    net = Network.from_specs(arch["layers"], tuple(arch["input_shape"]), seed=None)
    blob = (directory / "checkpoint.bin").read_bytes()
    params = {}
    for entry in doc["tensors"]:
        if entry["dtype"] != "f32le":
            raise ValueError(f"unsupported tensor dtype {entry['dtype']!r}")
        n = math.prod(entry["shape"])
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"])
        params[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    # set_params checks names against the architecture, so allocate first
    net.initialize(0, np.float32)
    net.set_params(params)
    return net, doc.get("meta", {})
