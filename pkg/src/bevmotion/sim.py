"""Synthetic urban scenes with exact kinematic ground truth.

Objects are rectangles moving under one of three models (constant velocity,
constant turn, stop-and-go).  Points are sampled on object perimeters, the way
surface returns cluster in real sweeps, plus static background clutter.
Everything is driven by a single PCG64 stream, so a config with the same seed
reproduces the same scene bit for bit on any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, ContractError, GenerationError
from .grid import (
    CLASS_NAMES,
    GridSpec,
    PointSequence,
    SceneLabels,
    SceneTruth,
    TrackState,
    rasterize_labels,
)
from .pmds import write_dataset

GROUND_Z = -1.0

#: (length, width, height) per category, meters
FOOTPRINTS = {
    "car": (4.5, 1.9, 1.5),
    "pedestrian": (0.6, 0.6, 1.7),
    "bike": (1.8, 0.6, 1.4),
    "others": (1.2, 1.2, 1.0),
}

MOTION_MODELS = ("constant_velocity", "constant_turn", "stop_and_go")


@dataclass(frozen=True)
class SceneConfig:
    """Declarative description of one scene draw."""

    n_cars: int = 4
    n_pedestrians: int = 2
    n_bikes: int = 1
    n_others: int = 1
    car_speed: tuple[float, float] = (2.0, 8.0)
    pedestrian_speed: tuple[float, float] = (0.0, 1.5)
    bike_speed: tuple[float, float] = (1.0, 6.0)
    others_speed: tuple[float, float] = (0.0, 0.8)
    point_density: float = 10.0        # points per m^2 of object footprint
    clutter_density: float = 0.01      # background points per m^2 of grid area
    sparsity_factor: float = 0.0       # fraction of points randomly removed
    sensor_noise_sigma: float = 0.02   # meters
    turn_fraction: float = 0.2         # share of moving objects on an arc
    stop_and_go_fraction: float = 0.1  # share of moving objects that stop or start
    max_turn_rate: float = 0.3         # rad/s, keeps arcs cell-continuous
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_cars", "n_pedestrians", "n_bikes", "n_others"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        for name in ("point_density", "clutter_density", "sensor_noise_sigma"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not 0.0 <= self.sparsity_factor <= 1.0:
            raise ContractError("sparsity_factor must lie in [0, 1]")
        for name in ("car_speed", "pedestrian_speed", "bike_speed", "others_speed"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ContractError(f"{name} must satisfy 0 <= lo <= hi")

    def speed_range(self, category: int) -> tuple[float, float]:
        return {
            1: self.car_speed,
            2: self.pedestrian_speed,
            3: self.bike_speed,
            4: self.others_speed,
        }[category]

    def counts(self) -> dict[int, int]:
        return {1: self.n_cars, 2: self.n_pedestrians, 3: self.n_bikes, 4: self.n_others}

    def to_dict(self) -> dict:
        d = {}
        for f_ in self.__dataclass_fields__.values():
            v = getattr(self, f_.name)
            d[f_.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for name in ("car_speed", "pedestrian_speed", "bike_speed", "others_speed"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


@dataclass
class ObjectTrack:
    """One simulated object: footprint, category, and poses for all frames."""

    instance_id: int
    category: int
    length: float
    width: float
    height: float
    speed: float
    motion_model: str
    poses: np.ndarray  # (input_frames + output_steps, 3) of (x, y, heading)


def _integrate_poses(
    start: np.ndarray,
    speed: float,
    model: str,
    turn_rate: float,
    stop_switch: int,
    starts_stopped: bool,
    n_frames: int,
    current_index: int,
    dt: float,
) -> np.ndarray:
    """Unicycle integration; ``start`` is the pose at ``current_index``."""
    poses = np.zeros((n_frames, 3), dtype=np.float64)
    poses[current_index] = start

    def step(pose: np.ndarray, frame: int, direction: float) -> np.ndarray:
        v = speed
        if model == "stop_and_go":
            moving = frame >= stop_switch if starts_stopped else frame < stop_switch
            v = speed if moving else 0.0
        w = turn_rate if model == "constant_turn" else 0.0
        x, y, h = pose
        h2 = h + direction * w * dt
        # midpoint heading keeps arc length consistent forward and backward
        hm = 0.5 * (h + h2)
        return np.array([x + direction * v * dt * math.cos(hm),
                         y + direction * v * dt * math.sin(hm), h2])

    for t in range(current_index + 1, n_frames):
        poses[t] = step(poses[t - 1], t - 1, +1.0)
    for t in range(current_index - 1, -1, -1):
        poses[t] = step(poses[t + 1], t, -1.0)
    return poses


def _perimeter_points(rng: np.random.Generator, n: int, length: float, width: float) -> np.ndarray:
    """Sample n points uniformly on the rectangle outline, object frame."""
    s = rng.uniform(0.0, 2.0 * (length + width), size=n)
    pts = np.zeros((n, 2))
    hl, hw = length / 2.0, width / 2.0
    m = s < length
    pts[m] = np.column_stack([s[m] - hl, np.full(m.sum(), -hw)])
    m = (s >= length) & (s < length + width)
    pts[m] = np.column_stack([np.full(m.sum(), hl), (s[m] - length) - hw])
    m = (s >= length + width) & (s < 2 * length + width)
    pts[m] = np.column_stack([hl - (s[m] - length - width), np.full(m.sum(), hw)])
    m = s >= 2 * length + width
    pts[m] = np.column_stack([np.full(m.sum(), -hl), hw - (s[m] - 2 * length - width)])
    return pts


def _pose_transform(points_xy: np.ndarray, pose: np.ndarray) -> np.ndarray:
    x, y, h = pose
    c, s = math.cos(h), math.sin(h)
    out = np.empty_like(points_xy)
    out[:, 0] = x + c * points_xy[:, 0] - s * points_xy[:, 1]
    out[:, 1] = y + s * points_xy[:, 0] + c * points_xy[:, 1]
    return out


def _place_objects(cfg: SceneConfig, spec: GridSpec, rng: np.random.Generator) -> list[ObjectTrack]:
    n_frames = spec.input_frames + spec.output_steps
    current = spec.input_frames - 1
    tracks: list[ObjectTrack] = []
    margin = 1.0
    placed: list[tuple[float, float, float]] = []  # (x, y, clearance radius)

    next_id = 1
    for category in (1, 2, 3, 4):
        lo, hi = cfg.speed_range(category)
        length, width, height = FOOTPRINTS[CLASS_NAMES[category]]
        radius = 0.5 * math.hypot(length, width)
        for _ in range(cfg.counts()[category]):
            speed = rng.uniform(lo, hi) if hi > lo else lo
            heading = rng.uniform(0.0, 2.0 * math.pi)
            model = "constant_velocity"
            if speed > 0:
                u = rng.random()
                if u < cfg.turn_fraction:
                    model = "constant_turn"
                elif u < cfg.turn_fraction + cfg.stop_and_go_fraction:
                    model = "stop_and_go"
            turn_rate = rng.uniform(-cfg.max_turn_rate, cfg.max_turn_rate)
            stop_switch = int(rng.integers(1, n_frames))
            starts_stopped = bool(rng.random() < 0.5)

            for attempt in range(200):
                x = rng.uniform(spec.x_range[0] + margin + radius, spec.x_range[1] - margin - radius)
                y = rng.uniform(spec.y_range[0] + margin + radius, spec.y_range[1] - margin - radius)
                if all((x - px) ** 2 + (y - py) ** 2 > (radius + pr) ** 2 for px, py, pr in placed):
                    break
            else:
                raise GenerationError(
                    f"could not place object {next_id} after 200 attempts; area too crowded"
                )
            placed.append((x, y, radius))
            poses = _integrate_poses(
                np.array([x, y, heading]), speed, model, turn_rate,
                stop_switch, starts_stopped, n_frames, current, spec.frame_interval,
            )
            tracks.append(
                ObjectTrack(
                    instance_id=next_id, category=category, length=length, width=width,
                    height=height, speed=speed, motion_model=model, poses=poses,
                )
            )
            next_id += 1
    return tracks


def generate_sequence(
    cfg: SceneConfig, spec: GridSpec
) -> tuple[PointSequence, SceneLabels, list[ObjectTrack]]:
    """Draw one scene: input frames, exact labels, and the generating tracks."""
    rng = np.random.default_rng(cfg.rng_seed)
    tracks = _place_objects(cfg, spec, rng)
    current = spec.input_frames - 1

    area = (spec.x_range[1] - spec.x_range[0]) * (spec.y_range[1] - spec.y_range[0])
    n_clutter = int(round(cfg.clutter_density * area))
    clutter = np.zeros((n_clutter, 3))
    if n_clutter:
        clutter[:, 0] = rng.uniform(spec.x_range[0], spec.x_range[1], n_clutter)
        clutter[:, 1] = rng.uniform(spec.y_range[0], spec.y_range[1], n_clutter)
        clutter[:, 2] = rng.uniform(GROUND_Z, min(GROUND_Z + 2.0, spec.z_range[1]), n_clutter)

    frames: list[np.ndarray] = []
    current_instances: np.ndarray | None = None
    for t in range(spec.input_frames):
        pieces = []
        instances = []
        for track in tracks:
            n = max(3, int(round(cfg.point_density * track.length * track.width)))
            local = _perimeter_points(rng, n, track.length, track.width)
            xy = _pose_transform(local, track.poses[t])
            z = rng.uniform(GROUND_Z, GROUND_Z + track.height, size=n)
            pieces.append(np.column_stack([xy, z]))
            instances.append(np.full(n, track.instance_id, dtype=np.int32))
        if n_clutter:
            pieces.append(clutter.copy())
            instances.append(np.zeros(n_clutter, dtype=np.int32))
        pts = np.concatenate(pieces, axis=0) if pieces else np.zeros((0, 3))
        inst = np.concatenate(instances, axis=0) if instances else np.zeros(0, dtype=np.int32)
        if cfg.sensor_noise_sigma > 0 and pts.shape[0]:
            pts = pts + rng.normal(0.0, cfg.sensor_noise_sigma, size=pts.shape)
        if cfg.sparsity_factor > 0 and pts.shape[0]:
            keep = rng.random(pts.shape[0]) >= cfg.sparsity_factor
            pts, inst = pts[keep], inst[keep]
        frames.append(pts.astype(np.float32))
        if t == current:
            current_instances = inst

    truth = SceneTruth(
        current_points=frames[current],
        point_instance=current_instances,
        tracks=[
            TrackState(
                instance_id=t.instance_id,
                category=t.category,
                current_pose=t.poses[current],
                future_poses=t.poses[spec.input_frames:],
            )
            for t in tracks
        ],
    )
    labels = rasterize_labels(truth, spec)
    return PointSequence(frames=frames), labels, tracks


def _masked_config(cfg: SceneConfig, mask_category: str | None) -> SceneConfig:
    if mask_category is None:
        return cfg
    if mask_category not in CLASS_NAMES:
        raise ConfigError(f"unknown category {mask_category!r}; choose from {CLASS_NAMES[1:]}")
    if mask_category == "background":
        raise ConfigError("background cannot be masked")
    field_name = {
        "car": "n_cars", "pedestrian": "n_pedestrians", "bike": "n_bikes", "others": "n_others",
    }[mask_category]
    return replace(cfg, **{field_name: 0})


def make_benchmark(
    cfg: SceneConfig,
    spec: GridSpec,
    n_train: int,
    n_val: int,
    n_test: int,
    out_dir: str | Path,
    mask_category: str | None = None,
) -> dict[str, Path]:
    """Generate train/val/test PMDS files.

    With ``mask_category`` set, the training split is generated without that
    category while val/test keep the full mix (so generalization to the held
    out class can be measured).
    """
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError("split sizes must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(cfg.rng_seed)
    seeds = {name: ss for name, ss in zip(("train", "val", "test"), root.spawn(3))}
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    paths: dict[str, Path] = {}
    for split, size in sizes.items():
        split_cfg = _masked_config(cfg, mask_category) if split == "train" else cfg
        child_seeds = seeds[split].generate_state(size)
        sequences = []
        for s in range(size):
            seq_cfg = replace(split_cfg, rng_seed=int(child_seeds[s]))
            seq, labels, _ = generate_sequence(seq_cfg, spec)
            sequences.append((seq, labels))
        path = out_dir / f"{split}.pmds"
        write_dataset(path, spec, sequences)
        paths[split] = path
    return paths
