"""Pinhole camera, capsule renderer and synthetic dataset generation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .kinematics import (
    KinematicChain,
    forward_kinematics,
    step_for_count,
    sweep_configurations,
    validate_configuration,
)
from .schemas import validate_manifest

log = logging.getLogger(__name__)

FG_FRACTION_RANGE = (0.02, 0.30)
DESK_RESOLUTION = (128, 106)
FULL_RESOLUTION = (512, 424)
# Vertical field of view of the synthetic sensor.
DEFAULT_VFOV_DEG = 16.0
# Camera distance from the look-at point, in multiples of the chain reach.
SHELL = (1.5, 3.0)


class BehindCamera(ValueError):
    pass


class SampleRejected(Exception):
    """Rendered sample violates the framing gate; the caller should pick another camera."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("extrinsic rotation is not a proper rotation")

    @classmethod
    def from_fov(cls, width: int, height: int, vfov_deg: float = DEFAULT_VFOV_DEG, **extrinsic) -> "CameraModel":
        f = (height / 2.0) / math.tan(math.radians(vfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height, **extrinsic)

    def with_extrinsic(self, rotation, translation) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, rotation, translation)

    def resized(self, width: int, height: int) -> "CameraModel":
        """Same sensor sampled at another resolution (pixel-center convention kept)."""
        sx, sy = width / self.width, height / self.height
        return CameraModel(
            self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            width, height, self.rotation, self.translation,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["rotation"]), np.array(d["translation"]))


def transform_to_camera(camera: CameraModel, p_base) -> np.ndarray:
    """Map base-frame point(s) of shape (3,) or (n, 3) into the camera frame."""
    p = np.asarray(p_base, dtype=float)
    return p @ camera.rotation.T + camera.translation


def transform_to_base(camera: CameraModel, p_cam) -> np.ndarray:
    p = np.asarray(p_cam, dtype=float)
    return (p - camera.translation) @ camera.rotation


def project_point(camera: CameraModel, p_cam) -> np.ndarray:
    """Pinhole projection to continuous pixel coordinates (u right, v down).

    Pixel centers sit on integer coordinates. Accepts (3,) or (n, 3).
    """
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point at or behind the camera plane")
    u = camera.fx * p[..., 0] / z + camera.cx
    v = camera.fy * p[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Extrinsic (R, t) for a camera at ``eye`` looking at ``target``.

    Camera axes: z forward, x right, y down in the image.
    """
    eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (1.0, 0.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def sample_camera_pose(intrinsics: CameraModel, target, reach: float, rng: np.random.Generator,
                       shell=SHELL) -> CameraModel:
    """Camera uniformly placed on the upper half of a spherical shell around ``target``."""
    while True:
        d = rng.normal(size=3)
        d[2] = abs(d[2])
        n = np.linalg.norm(d)
        if n > 1e-6 and d[2] / n < 0.95:
            break
    radius = rng.uniform(shell[0] * reach, shell[1] * reach)
    R, t = look_at(np.asarray(target) + radius * d / n, target)
    return intrinsics.with_extrinsic(R, t)


@dataclass
class RobotSample:
    color: np.ndarray          # H x W x 3 float in [0, 1]
    mask: np.ndarray           # H x W uint8 in {0, 1}
    angles: np.ndarray
    joints_cam: np.ndarray     # K x 3, meters
    camera: CameraModel
    robot: str

    @property
    def fg_fraction(self) -> float:
        return float(self.mask.mean())


_LINK_COLORS = np.array([
    [0.22, 0.26, 0.32],
    [0.62, 0.70, 0.82],
    [0.80, 0.83, 0.86],
    [0.62, 0.70, 0.82],
    [0.80, 0.83, 0.86],
    [0.62, 0.70, 0.82],
    [0.30, 0.33, 0.38],
])


def _pixel_rays(camera: CameraModel) -> np.ndarray:
    v, u = np.mgrid[0:camera.height, 0:camera.width].astype(float)
    d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    return (d / np.linalg.norm(d, axis=-1, keepdims=True)).reshape(-1, 3)


def _ray_segment_distance(rays: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distance from each ray (through the camera center) to segment [a, b], and the depth along the ray."""
    e = b - a
    ad = rays @ a
    ed = rays @ e
    a_perp = a[None, :] - ad[:, None] * rays
    e_perp = e[None, :] - ed[:, None] * rays
    ee = np.einsum("ij,ij->i", e_perp, e_perp)
    ae = np.einsum("ij,ij->i", a_perp, e_perp)
    s = np.where(ee > 1e-18, -ae / np.maximum(ee, 1e-18), 0.0)
    s = np.clip(s, 0.0, 1.0)
    closest = a_perp + s[:, None] * e_perp
    dist = np.linalg.norm(closest, axis=1)
    depth = ad + s * ed
    return dist, depth


def render_sample(chain: KinematicChain, angles, camera: CameraModel, background: np.ndarray,
                  seed: int, gate: bool = True) -> RobotSample:
    """Render one sample: capsule mask, shaded color image and camera-frame joints.

    Raises SampleRejected when a joint projects outside the image or the
    foreground fraction leaves FG_FRACTION_RANGE (``gate=False`` skips the
    fraction check).
    """
    angles = np.asarray(angles, dtype=float)
    H, W = camera.height, camera.width
    if background.shape != (H, W, 3):
        raise ValueError(f"background shape {background.shape} does not match camera {(H, W, 3)}")
    joints_cam = transform_to_camera(camera, forward_kinematics(chain, angles))
    if np.any(joints_cam[:, 2] <= chain.link_radius):
        raise SampleRejected("joint behind or too close to the camera")
    uv = project_point(camera, joints_cam)
    if np.any(uv < -0.5) or np.any(uv[:, 0] >= W - 0.5) or np.any(uv[:, 1] >= H - 0.5):
        raise SampleRejected("joint projects outside the image")

    rays = _pixel_rays(camera)
    best_depth = np.full(rays.shape[0], np.inf)
    best_link = np.full(rays.shape[0], -1)
    best_dist = np.zeros(rays.shape[0])
    r = chain.link_radius
    for i in range(len(joints_cam) - 1):
        if np.linalg.norm(joints_cam[i + 1] - joints_cam[i]) < 1e-12:
            continue  # zero-length link: nothing to draw
        dist, depth = _ray_segment_distance(rays, joints_cam[i], joints_cam[i + 1])
        hit = (dist < r) & (depth < best_depth)
        best_depth[hit] = depth[hit]
        best_link[hit] = i
        best_dist[hit] = dist[hit]
    fg = best_link >= 0
    mask = fg.reshape(H, W).astype(np.uint8)
    frac = float(mask.mean())
    if gate and not FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
        raise SampleRejected(f"foreground fraction {frac:.4f} outside {FG_FRACTION_RANGE}")

    rng = np.random.default_rng(seed)
    tint = 1.0 + rng.uniform(-0.12, 0.12, size=3)
    color = background.reshape(-1, 3).astype(float).copy()
    if fg.any():
        links = best_link[fg]
        base = _LINK_COLORS[links % len(_LINK_COLORS)] * tint
        d = best_depth[fg]
        span = max(float(d.max() - d.min()), 1e-9)
        depth_shade = 1.0 - 0.35 * (d - d.min()) / span
        radial = 1.0 - 0.3 * (best_dist[fg] / max(r, 1e-12)) ** 2
        color[fg] = base * (depth_shade * radial)[:, None]
    color = np.clip(color, 0.0, 1.0).reshape(H, W, 3)
    return RobotSample(color, mask, angles, joints_cam, camera, chain.name)


def noise_background(width: int, height: int, rng: np.random.Generator, octaves=(3, 6, 12, 24)) -> np.ndarray:
    """Multi-octave value noise, tinted with random per-octave colors."""
    img = np.zeros((height, width, 3))
    total = 0.0
    for k, cells in enumerate(octaves):
        amp = 0.5 ** k
        grid = rng.random((cells + 1, cells + 1, 3)).astype(np.float32)
        layer = np.stack([
            np.asarray(Image.fromarray(grid[..., c], mode="F").resize((width, height), Image.BICUBIC))
            for c in range(3)
        ], axis=-1)
        img += amp * layer
        total += amp
    img /= total
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-9)
    gain = rng.uniform(0.5, 1.0, size=3)
    return np.clip(img * gain + rng.uniform(0.0, 0.3, size=3), 0.0, 1.0)


def load_background_dir(path: str | Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return sorted(p for p in Path(path).iterdir() if p.suffix.lower() in exts)


def _load_background(path: Path, width: int, height: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((width, height), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


# --- on-disk formats -------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_sample(sample: RobotSample, out_dir: Path, sample_id: str, recording: str) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    color_path = out_dir / f"{sample_id}_color.png"
    mask_path = out_dir / f"{sample_id}_mask.png"
    label_path = out_dir / f"{sample_id}_label.json"
    Image.fromarray(to_uint8(sample.color), mode="RGB").save(color_path)
    Image.fromarray((sample.mask * 255).astype(np.uint8), mode="L").save(mask_path)
    label = {
        "id": sample_id,
        "robot": sample.robot,
        "recording": recording,
        "angles": [float(a) for a in sample.angles],
        "joints_cam": sample.joints_cam.tolist(),
        "camera": sample.camera.to_dict(),
        "fg_fraction": sample.fg_fraction,
    }
    label_path.write_text(json.dumps(label, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return label


def load_color(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an RGB image as float32 H x W x 3 in [0, 1], optionally resized to (width, height)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.BOX)
        return np.asarray(im, dtype=np.float32) / np.float32(255.0)


def load_mask(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read a mask PNG as uint8 {0, 1}; downscaling averages then thresholds at one half."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.BOX)
        return (np.asarray(im) >= 128).astype(np.uint8)


# --- dataset generation ----------------------------------------------------

@dataclass
class GeneratorConfig:
    robot: str
    counts: list[int] | None = None
    steps: list[float] | None = None
    seed: int = 0
    width: int = DESK_RESOLUTION[0]
    height: int = DESK_RESOLUTION[1]
    vfov_deg: float = DEFAULT_VFOV_DEG
    backgrounds: str | None = None
    train_ratio: float = 0.8
    max_pose_attempts: int = 50

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def workspace_center(chain: KinematicChain, configs) -> np.ndarray:
    pts = np.concatenate([forward_kinematics(chain, q) for q in configs])
    return 0.5 * (pts.min(axis=0) + pts.max(axis=0))


def recording_pool(chain: KinematicChain, count: int | None, seed: int, oversample: int = 3,
                   step: float | None = None) -> list[np.ndarray]:
    """Collision-free sweep configurations for one recording.

    With ``step`` the sweep uses it directly. Otherwise the step is the
    coarsest one whose collision-free subset holds ``oversample * count``
    poses, so the pool stays a regular sweep of the joint ranges.
    """
    if step is not None:
        configs = [q for q in sweep_configurations(chain, step, seed) if validate_configuration(chain, q)]
        if not configs:
            raise ValueError(f"sweep with step {step} contains no collision-free configuration")
        return configs
    if count is None or count < 1:
        raise ValueError("a recording needs at least one sample")
    want = oversample * count
    step = step_for_count(chain, want)
    while True:
        configs = [q for q in sweep_configurations(chain, step, seed) if validate_configuration(chain, q)]
        if len(configs) >= want or step < 1e-3:
            break
        step *= 0.9
    if not configs:
        raise ValueError("sweep contains no collision-free configuration")
    return configs


def in_frame(chain: KinematicChain, q, camera: CameraModel) -> bool:
    pts = transform_to_camera(camera, forward_kinematics(chain, q))
    if np.any(pts[:, 2] <= chain.link_radius):
        return False
    uv = project_point(camera, pts)
    return bool(np.all(uv >= -0.5) and np.all(uv[:, 0] < camera.width - 0.5)
                and np.all(uv[:, 1] < camera.height - 0.5))


def split_ids(ids: list[str], ratio: float = 0.8, seed: int = 0) -> tuple[list[str], list[str]]:
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    if not ids:
        raise ValueError("cannot split an empty record list")
    n_train = max(1, int(round(ratio * len(ids))))
    order = np.random.default_rng(seed).permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


def split_dataset(manifest: dict, ratio: float = 0.8, seed: int = 0) -> dict:
    ids = [r["id"] for r in manifest["records"]]
    train, test = split_ids(ids, ratio, seed)
    return {**manifest, "splits": {"train": train, "test": test}}


def _recording_targets(config: GeneratorConfig) -> list[tuple[int | None, float | None]]:
    if config.counts and config.steps:
        raise ValueError("give either per-recording counts or steps, not both")
    if config.counts:
        if any(c < 1 for c in config.counts):
            raise ValueError("every recording needs a positive sample count")
        return [(int(c), None) for c in config.counts]
    if config.steps:
        if any(not s > 0 for s in config.steps):
            raise ValueError("sweep steps must be positive")
        return [(None, float(s)) for s in config.steps]
    raise ValueError("no recordings requested")


def generate_dataset(config: GeneratorConfig, chain: KinematicChain, out_dir: str | Path) -> dict:
    """Render every recording to ``out_dir`` and write ``manifest.json``.

    Each recording draws one camera pose and keeps it for all its samples.
    Pool configurations that leave the frame or fail the foreground gate
    under that pose are skipped, as a fixed camera cannot record them; when
    a pose cannot supply the requested count (or, in step mode, at least half
    the sweep), another pose is drawn.
    """
    targets = _recording_targets(config)
    out = Path(out_dir)
    samples_dir = out / "samples"
    try:
        samples_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    bg_files = load_background_dir(config.backgrounds) if config.backgrounds else []
    if config.backgrounds and not bg_files:
        raise ValueError(f"no background images in {config.backgrounds}")
    intr = CameraModel.from_fov(config.width, config.height, config.vfov_deg)

    def background_for(srng):
        if bg_files:
            return _load_background(bg_files[srng.integers(len(bg_files))], config.width, config.height)
        return noise_background(config.width, config.height, srng)

    records = []
    index = 0
    for rec_no, (count, step) in enumerate(targets, start=1):
        rec_id = f"rec{rec_no}"
        pool = recording_pool(chain, count, seed=config.seed * 1000 + rec_no, step=step)
        need = count if count is not None else max(1, (len(pool) + 1) // 2)
        center = workspace_center(chain, pool)
        pose_rng = sample_rng(config.seed, rec_no, 0)
        rendered = None
        for _ in range(config.max_pose_attempts):
            camera = sample_camera_pose(intr, center, chain.reach, pose_rng)
            visible = [i for i, q in enumerate(pool) if in_frame(chain, q, camera)]
            if len(visible) < need:
                continue
            if count is not None:
                visible = np.random.default_rng([config.seed, rec_no, 1]).permutation(visible)
            accepted = {}
            for i in visible:
                srng = sample_rng(config.seed, rec_no, int(i) + 1)
                background = background_for(srng)
                try:
                    accepted[int(i)] = render_sample(chain, pool[i], camera, background, int(srng.integers(2**31)))
                except SampleRejected:
                    continue
                if count is not None and len(accepted) == count:
                    break
            if len(accepted) >= need and (count is None or len(accepted) == count):
                rendered = [accepted[i] for i in sorted(accepted)]
                break
        if rendered is None:
            raise SampleRejected(f"no camera pose frames {need} samples for recording {rec_id}")
        for sample in rendered:
            index += 1
            sid = f"{index:06d}"
            save_sample(sample, samples_dir, sid, rec_id)
            records.append({
                "id": sid,
                "color": f"samples/{sid}_color.png",
                "mask": f"samples/{sid}_mask.png",
                "label": f"samples/{sid}_label.json",
                "robot": chain.name,
                "recording": rec_id,
            })
        log.info("%s: %d samples", rec_id, len(rendered))
    manifest = {
        "format": "robocascade-dataset/1",
        "seed": config.seed,
        "generator": config.to_dict(),
        "chain": chain.to_dict(),
        "records": records,
    }
    manifest = split_dataset(manifest, config.train_ratio, config.seed)
    write_manifest(manifest, out)
    return manifest


def write_manifest(manifest: dict, out_dir: str | Path) -> Path:
    validate_manifest(manifest)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def manifest_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def recording_summary(manifest: dict) -> list[tuple[str, str, int]]:
    """(recording, robot, sample count) rows in recording order."""
    rows: dict[str, list] = {}
    for r in manifest["records"]:
        rows.setdefault(r["recording"], [r["recording"], r["robot"], 0])[2] += 1
    return [tuple(v) for v in rows.values()]


@dataclass
class SplitArrays:
    ids: list[str]
    colors: np.ndarray      # N x H x W x 3 float32
    masks: np.ndarray       # N x H x W uint8
    joints: np.ndarray      # N x K x 3 float64, camera frame
    recordings: list[str]
    robots: list[str]
    cameras: list[CameraModel]
    color_paths: list[Path]
    mask_paths: list[Path]


def load_split(root: str | Path, manifest: dict, split: str, size: tuple[int, int]) -> SplitArrays:
    """Load one split resized to ``size`` = (width, height)."""
    root = Path(root)
    splits = manifest.get("splits") or {}
    if split not in splits:
        raise KeyError(f"dataset manifest has no {split!r} split")
    ids = list(splits[split])
    if not ids:
        raise ValueError(f"{split!r} split is empty")
    by_id = {r["id"]: r for r in manifest["records"]}
    colors, masks, joints, recs, robots, cams, cps, mps = [], [], [], [], [], [], [], []
    for sid in ids:
        r = by_id[sid]
        cp, mp = root / r["color"], root / r["mask"]
        label = json.loads((root / r["label"]).read_text(encoding="utf-8"))
        colors.append(load_color(cp, size))
        masks.append(load_mask(mp, size))
        joints.append(label["joints_cam"])
        recs.append(r["recording"])
        robots.append(r["robot"])
        cams.append(CameraModel.from_dict(label["camera"]))
        cps.append(cp)
        mps.append(mp)
    return SplitArrays(ids, np.stack(colors), np.stack(masks), np.asarray(joints, dtype=np.float64),
                       recs, robots, cams, cps, mps)
