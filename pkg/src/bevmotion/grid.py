"""Grid geometry, core data types, voxelization and ground-truth rasterization.

All world coordinates are meters in a shared ego-centered frame.  Grid index
``i`` bins the x axis, ``j`` the y axis, ``k`` the z axis.  Every function here
is pure; nothing mutates its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError

NUM_CLASSES = 5
CLASS_NAMES = ("background", "car", "pedestrian", "bike", "others")
#: speed (m/s) at or below which a cell counts as stationary
STATIC_SPEED = 0.2


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the voxel grid and the temporal window.

    ``H`` and ``W`` are rounded from the range/resolution ratio, ``C`` is the
    ceiling (a partial top bin is kept, so e.g. a 5 m z-extent at 0.4 m
    resolution yields 13 bins, the last covering only 0.2 m).
    """

    x_range: tuple[float, float] = (-32.0, 32.0)
    y_range: tuple[float, float] = (-32.0, 32.0)
    z_range: tuple[float, float] = (-3.0, 2.0)
    xy_resolution: float = 0.25
    z_resolution: float = 0.4
    frame_interval: float = 0.2
    input_frames: int = 5
    output_steps: int = 5

    def __post_init__(self) -> None:
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ContractError(f"{name} must be finite and strictly increasing, got ({lo}, {hi})")
        if self.xy_resolution <= 0 or self.z_resolution <= 0:
            raise ContractError("resolutions must be strictly positive")
        if self.frame_interval <= 0:
            raise ContractError("frame_interval must be strictly positive")
        if self.input_frames < 1 or self.output_steps < 1:
            raise ContractError("input_frames and output_steps must be >= 1")

    @property
    def H(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.xy_resolution))

    @property
    def W(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.xy_resolution))

    @property
    def C(self) -> int:
        return int(math.ceil((self.z_range[1] - self.z_range[0]) / self.z_resolution - 1e-9))

    @property
    def horizon_seconds(self) -> float:
        """Time span covered by the last predicted step."""
        return self.output_steps * self.frame_interval

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of cell-center world coordinates (x, y)."""
        xs = self.x_range[0] + (np.arange(self.H, dtype=np.float64) + 0.5) * self.xy_resolution
        ys = self.y_range[0] + (np.arange(self.W, dtype=np.float64) + 0.5) * self.xy_resolution
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "xy_resolution": self.xy_resolution,
            "z_resolution": self.z_resolution,
            "frame_interval": self.frame_interval,
            "input_frames": self.input_frames,
            "output_steps": self.output_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            x_range=tuple(d["x_range"]),
            y_range=tuple(d["y_range"]),
            z_range=tuple(d["z_range"]),
            xy_resolution=float(d["xy_resolution"]),
            z_resolution=float(d["z_resolution"]),
            frame_interval=float(d["frame_interval"]),
            input_frames=int(d["input_frames"]),
            output_steps=int(d["output_steps"]),
        )


@dataclass
class PointSequence:
    """Input frames of 3D points, oldest first; the last frame is "current"."""

    frames: list[np.ndarray]

    def __post_init__(self) -> None:
        self.frames = [np.asarray(f, dtype=np.float32).reshape(-1, 3) for f in self.frames]

    def validate(self, spec: GridSpec) -> None:
        if len(self.frames) != spec.input_frames:
            raise ContractError(f"expected {spec.input_frames} frames, got {len(self.frames)}")
        for t, f in enumerate(self.frames):
            if not np.all(np.isfinite(f)):
                raise ContractError(f"frame {t} contains non-finite coordinates")

    @property
    def current_points(self) -> np.ndarray:
        return self.frames[-1]


@dataclass
class OccupancyGrid:
    """Binary voxelization of a single frame."""

    cells: np.ndarray  # (H, W, C) uint8
    dropped_points: int = 0


@dataclass
class SceneLabels:
    """Per-cell ground truth for one sequence.

    ``motion[t]`` is the displacement (meters) from the current frame to
    future step ``t + 1``; it is zero wherever ``valid`` is zero.
    """

    motion: np.ndarray       # (T, H, W, 2) float32
    category: np.ndarray     # (H, W) int32, values in [0, NUM_CLASSES)
    state: np.ndarray        # (H, W) uint8, 1 = moving
    instance_id: np.ndarray  # (H, W) int32, 0 = no instance
    valid: np.ndarray        # (H, W) uint8, 1 = occupied in current frame

    def validate(self, spec: GridSpec) -> None:
        T, H, W = spec.output_steps, spec.H, spec.W
        if self.motion.shape != (T, H, W, 2):
            raise ContractError(f"motion shape {self.motion.shape} != {(T, H, W, 2)}")
        for name in ("category", "state", "instance_id", "valid"):
            arr = getattr(self, name)
            if arr.shape != (H, W):
                raise ContractError(f"{name} shape {arr.shape} != {(H, W)}")
        if not np.all(np.isfinite(self.motion)):
            raise ContractError("motion contains non-finite values")
        if self.category.min(initial=0) < 0 or self.category.max(initial=0) >= NUM_CLASSES:
            raise ContractError("category values out of range")
        invalid = self.valid == 0
        if np.any(np.abs(self.motion[:, invalid]) > 0):
            raise ContractError("motion must be zero on cells with valid=0")

    @classmethod
    def zeros(cls, spec: GridSpec) -> "SceneLabels":
        T, H, W = spec.output_steps, spec.H, spec.W
        return cls(
            motion=np.zeros((T, H, W, 2), dtype=np.float32),
            category=np.zeros((H, W), dtype=np.int32),
            state=np.zeros((H, W), dtype=np.uint8),
            instance_id=np.zeros((H, W), dtype=np.int32),
            valid=np.zeros((H, W), dtype=np.uint8),
        )


@dataclass
class TrackState:
    """Pose trajectory of one object, used to rasterize ground truth.

    Poses are (x, y, heading); ``future_poses`` has one row per output step.
    """

    instance_id: int
    category: int
    current_pose: np.ndarray       # (3,)
    future_poses: np.ndarray       # (T, 3)


@dataclass
class SceneTruth:
    """Everything the rasterizer needs: current observations plus tracks."""

    current_points: np.ndarray     # (N, 3)
    point_instance: np.ndarray     # (N,) int32; 0 marks background clutter
    tracks: list[TrackState] = field(default_factory=list)


def point_cell_indices(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Map points to (i, j, k) voxel indices.

    Returns ``(indices, in_range)`` where ``indices`` is (N, 3) int64 and
    ``in_range`` marks points whose indices all fall inside the grid.
    Out-of-range indices are left as computed and must be masked by callers.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    i = np.floor((pts[:, 0] - spec.x_range[0]) / spec.xy_resolution).astype(np.int64)
    j = np.floor((pts[:, 1] - spec.y_range[0]) / spec.xy_resolution).astype(np.int64)
    k = np.floor((pts[:, 2] - spec.z_range[0]) / spec.z_resolution).astype(np.int64)
    idx = np.stack([i, j, k], axis=1)
    in_range = (
        (i >= 0) & (i < spec.H) & (j >= 0) & (j < spec.W) & (k >= 0) & (k < spec.C)
    )
    return idx, in_range


def voxelize(points: np.ndarray, spec: GridSpec) -> OccupancyGrid:
    """Bin one frame of points into a binary occupancy grid.

    A cell is 1 iff at least one point falls inside it.  Points outside the
    grid are dropped and counted in ``dropped_points``; non-finite coordinates
    are rejected.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ContractError("points must be finite")
    cells = np.zeros((spec.H, spec.W, spec.C), dtype=np.uint8)
    if pts.shape[0] == 0:
        return OccupancyGrid(cells=cells, dropped_points=0)
    idx, in_range = point_cell_indices(pts, spec)
    kept = idx[in_range]
    cells[kept[:, 0], kept[:, 1], kept[:, 2]] = 1
    return OccupancyGrid(cells=cells, dropped_points=int((~in_range).sum()))


def _relative_displacement(cells_xy: np.ndarray, current: np.ndarray, future: np.ndarray) -> np.ndarray:
    """Displacement of world points rigidly attached to an object.

    ``cells_xy`` (N, 2) are world positions at the current pose; the result is
    their movement (N, 2) under the rigid transform current -> future.
    """
    x0, y0, h0 = current
    x1, y1, h1 = future
    c0, s0 = math.cos(h0), math.sin(h0)
    # into the object frame
    dx = cells_xy[:, 0] - x0
    dy = cells_xy[:, 1] - y0
    ox = c0 * dx + s0 * dy
    oy = -s0 * dx + c0 * dy
    # out at the future pose
    c1, s1 = math.cos(h1), math.sin(h1)
    fx = x1 + c1 * ox - s1 * oy
    fy = y1 + s1 * ox + c1 * oy
    return np.stack([fx - cells_xy[:, 0], fy - cells_xy[:, 1]], axis=1)


def rasterize_labels(truth: SceneTruth, spec: GridSpec) -> SceneLabels:
    """Rasterize object tracks into per-cell supervision maps.

    Every cell occupied by the current frame becomes valid.  Cells covered by
    an object carry that object's rigid-body displacement evaluated at the
    cell center; overlaps resolve to the smallest instance id.  Background
    cells keep zero motion, category 0 and state 0.
    """
    labels = SceneLabels.zeros(spec)
    pts = np.asarray(truth.current_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return labels
    inst = np.asarray(truth.point_instance, dtype=np.int64).reshape(-1)
    if inst.shape[0] != pts.shape[0]:
        raise ContractError("point_instance length must match current_points")

    idx, in_range = point_cell_indices(pts, spec)
    idx, inst = idx[in_range], inst[in_range]
    if idx.shape[0] == 0:
        return labels
    labels.valid[idx[:, 0], idx[:, 1]] = 1

    # per-cell owner: smallest positive instance id among covering points
    owner = np.full((spec.H, spec.W), np.iinfo(np.int64).max, dtype=np.int64)
    positive = inst > 0
    flat = idx[positive, 0] * spec.W + idx[positive, 1]
    np.minimum.at(owner.reshape(-1), flat, inst[positive])

    centers = spec.cell_centers()
    tracks = {t.instance_id: t for t in truth.tracks}
    for inst_id in np.unique(inst[positive]):
        track = tracks.get(int(inst_id))
        if track is None:
            raise ContractError(f"point references unknown instance {inst_id}")
        mask = (owner == inst_id) & (labels.valid == 1)
        if not mask.any():
            continue
        cells_xy = centers[mask]
        moving = np.zeros(mask.sum(), dtype=bool)
        for t in range(spec.output_steps):
            disp = _relative_displacement(cells_xy, track.current_pose, track.future_poses[t])
            labels.motion[t][mask] = disp.astype(np.float32)
            # a cell is moving if its displacement ever exceeds the static
            # envelope at that step
            moving |= np.linalg.norm(disp, axis=1) > STATIC_SPEED * (t + 1) * spec.frame_interval
        labels.category[mask] = track.category
        labels.instance_id[mask] = inst_id
        labels.state[mask] = moving.astype(np.uint8)
    return labels
