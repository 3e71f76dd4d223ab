"""Revolute kinematic chains for UR-like arms.

A chain is an ordered list of revolute joints. Joint ``i`` sits at point
``i`` and rotates about its axis (expressed in the parent frame); its
``offset`` is the link vector from that joint to the next point, expressed in
the joint's rotated frame. Forward kinematics therefore returns ``N_j + 1``
points: the base (first joint origin), the remaining joint origins and the
end-effector.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class LimitViolation(ValueError):
    """A joint angle lies outside its limits."""


@dataclass(frozen=True)
class JointSpec:
    axis: tuple[float, float, float]
    offset: tuple[float, float, float]
    limit_lo: float
    limit_hi: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError(f"joint axis must be a unit 3-vector, got {self.axis}")
        offset = np.asarray(self.offset, dtype=float)
        if offset.shape != (3,) or not np.all(np.isfinite(offset)):
            raise ValueError(f"joint offset must be a finite 3-vector, got {self.offset}")
        if not self.limit_lo <= self.limit_hi:
            raise ValueError(f"limit_lo {self.limit_lo} > limit_hi {self.limit_hi}")
        object.__setattr__(self, "axis", tuple(float(a) for a in axis))
        object.__setattr__(self, "offset", tuple(float(o) for o in offset))

    @property
    def span(self) -> float:
        return self.limit_hi - self.limit_lo


@dataclass(frozen=True)
class KinematicChain:
    name: str
    joints: tuple[JointSpec, ...]
    link_radius: float
    # Offsets are stored in meters already multiplied by this factor; it is
    # kept as a record of which size variant the chain is.
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if len(self.joints) < 2:
            raise ValueError("a chain needs at least 2 joints")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not self.link_radius >= 0:
            raise ValueError("link_radius must be non-negative")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def reach(self) -> float:
        """Sum of link lengths; an upper bound on any point's distance from the base."""
        return float(sum(np.linalg.norm(j.offset) for j in self.joints))

    def home(self) -> np.ndarray:
        return np.array([min(max(0.0, j.limit_lo), j.limit_hi) for j in self.joints])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "scale": self.scale,
            "link_radius": self.link_radius,
            "joints": [{**asdict(j), "axis": list(j.axis), "offset": list(j.offset)} for j in self.joints],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicChain":
        joints = [
            JointSpec(tuple(j["axis"]), tuple(j["offset"]), float(j["limit_lo"]), float(j["limit_hi"]))
            for j in d["joints"]
        ]
        return cls(d["name"], tuple(joints), float(d["link_radius"]), float(d.get("scale", 1.0)))


# Nominal UR-style geometry at scale 1: base column, shoulder, upper arm,
# forearm, two wrist links and a tool flange. Lengths in meters.
_NOMINAL = [
    # axis, offset, limits
    ((0, 0, 1), (0.0, 0.0, 0.26), (-0.35 * math.pi, 0.35 * math.pi)),
    ((0, 1, 0), (0.62, 0.0, 0.0), (-0.7 * math.pi, -0.25 * math.pi)),
    ((0, 1, 0), (0.55, 0.0, 0.0), (0.05 * math.pi, 0.75 * math.pi)),
    ((0, 1, 0), (0.0, 0.0, -0.24), (-0.4 * math.pi, 0.4 * math.pi)),
    ((0, 0, 1), (0.0, 0.22, 0.0), (-0.6 * math.pi, 0.6 * math.pi)),
    ((0, 1, 0), (0.2, 0.0, 0.0), (-0.3 * math.pi, 0.3 * math.pi)),
]
_NOMINAL_RADIUS = 0.085

PRESET_SCALES = {"ur3like": 0.5, "ur5like": 0.85, "ur10like": 1.3}


def preset(name: str) -> KinematicChain:
    """Built-in UR-like chain; the three presets differ only in size."""
    try:
        s = PRESET_SCALES[name]
    except KeyError:
        raise ValueError(f"unknown robot preset {name!r}; choose from {sorted(PRESET_SCALES)}") from None
    joints = tuple(
        JointSpec(axis, tuple(s * o for o in offset), lo, hi) for axis, offset, (lo, hi) in _NOMINAL
    )
    return KinematicChain(name, joints, link_radius=_NOMINAL_RADIUS * s, scale=s)


def load_chain(spec: str | Path) -> KinematicChain:
    """Resolve ``--robot`` values: a preset name or a path to a chain JSON file."""
    if str(spec) in PRESET_SCALES:
        return preset(str(spec))
    path = Path(spec)
    if not path.is_file():
        raise ValueError(f"{spec!r} is neither a robot preset nor a chain JSON file")
    return KinematicChain.from_dict(json.loads(path.read_text(encoding="utf-8")))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def check_config(chain: KinematicChain, angles) -> np.ndarray:
    q = np.asarray(angles, dtype=float)
    if q.shape != (chain.n_joints,):
        raise ValueError(f"expected {chain.n_joints} joint angles, got shape {q.shape}")
    for i, (a, j) in enumerate(zip(q, chain.joints)):
        if not j.limit_lo - 1e-12 <= a <= j.limit_hi + 1e-12:
            raise LimitViolation(f"joint {i} angle {a:.6g} outside [{j.limit_lo:.6g}, {j.limit_hi:.6g}]")
    return q


def forward_kinematics(chain: KinematicChain, angles) -> np.ndarray:
    """Return the (N_j + 1, 3) base-frame points of the chain in meters."""
    q = check_config(chain, angles)
    R = np.eye(3)
    p = np.zeros(3)
    points = [p]
    for a, joint in zip(q, chain.joints):
        R = R @ axis_angle_matrix(joint.axis, a)
        p = p + R @ np.asarray(joint.offset)
        points.append(p)
    return np.array(points)


def _grid(joint: JointSpec, step: float, phase: float) -> np.ndarray:
    n = int(math.floor(joint.span / step + 1e-9)) + 1
    if n == 1:
        return np.array([min(max(0.0, joint.limit_lo), joint.limit_hi)])
    slack = max(joint.span - (n - 1) * step, 0.0)
    return np.clip(joint.limit_lo + phase * slack + step * np.arange(n), joint.limit_lo, joint.limit_hi)


def sweep_size(chain: KinematicChain, step: float) -> int:
    if not step > 0:
        raise ValueError("step must be positive")
    return math.prod(int(math.floor(j.span / step + 1e-9)) + 1 for j in chain.joints)


def sweep_configurations(chain: KinematicChain, step: float, seed: int | None = None) -> list[np.ndarray]:
    """Grid sweep over every joint range, base joint outermost.

    With ``seed`` set, each joint grid is shifted by a random fraction of the
    range left over after fitting whole steps, so recordings with the same
    step visit different poses. Without it the leftover is split evenly.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if seed is None:
        phases = np.full(chain.n_joints, 0.5)
    else:
        phases = np.random.default_rng(seed).random(chain.n_joints)
    grids = [_grid(j, step, ph) for j, ph in zip(chain.joints, phases)]
    return [np.array(c) for c in itertools.product(*grids)]


def step_for_count(chain: KinematicChain, target: int) -> float:
    """Largest step whose sweep has at least ``target`` configurations."""
    if target <= 1:
        return 2.0 * max(j.span for j in chain.joints) + 1.0
    lo, hi = 1e-4, max(j.span for j in chain.joints) + 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if sweep_size(chain, mid) >= target:
            lo = mid
        else:
            hi = mid
    return lo


def segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments [p0, p1] and [q0, q1]."""
    p0, p1, q0, q1 = (np.asarray(v, dtype=float) for v in (p0, p1, q0, q1))
    d1, d2, r = p1 - p0, q1 - q0, p0 - q0
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    eps = 1e-15
    if a <= eps and e <= eps:
        return float(np.linalg.norm(r))
    if a <= eps:
        s, t = 0.0, min(max(f / e, 0.0), 1.0)
    else:
        c = d1 @ r
        if e <= eps:
            t, s = 0.0, min(max(-c / a, 0.0), 1.0)
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = min(max((b * f - c * e) / denom, 0.0), 1.0) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, min(max(-c / a, 0.0), 1.0)
            elif t > 1.0:
                t, s = 1.0, min(max((b - c) / a, 0.0), 1.0)
    return float(np.linalg.norm((p0 + d1 * s) - (q0 + d2 * t)))


def validate_configuration(chain: KinematicChain, angles) -> bool:
    """False if two non-adjacent link capsules touch (axis distance < 2 * radius)."""
    q = np.asarray(angles, dtype=float)
    if q.shape != (chain.n_joints,):
        raise ValueError(f"expected {chain.n_joints} joint angles, got shape {q.shape}")
    pts = forward_kinematics(chain, q)
    n_links = len(pts) - 1
    limit = 2.0 * chain.link_radius
    for i in range(n_links):
        for j in range(i + 2, n_links):
            if segment_distance(pts[i], pts[i + 1], pts[j], pts[j + 1]) < limit:
                return False
    return True
