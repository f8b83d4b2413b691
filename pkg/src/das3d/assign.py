"""Ground-truth assignment of persons to pyramid levels and target maps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .camgeom import CameraIntrinsics, Pose3D, normalize_depth

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LevelConfig:
    strides: tuple[int, ...] = (8, 16, 32)
    ranges: tuple[float, ...] = (0.0, 64.0, 128.0, math.inf)
    n_pos: int = 9

    def __post_init__(self):
        strides = tuple(int(s) for s in self.strides)
        ranges = tuple(math.inf if r is None or r == "inf" else float(r) for r in self.ranges)
        object.__setattr__(self, "strides", strides)
        object.__setattr__(self, "ranges", ranges)
        if not strides or any(b <= a for a, b in zip(strides, strides[1:])) or strides[0] <= 0:
            raise ValueError(f"strides must be positive and strictly increasing: {strides}")
        if len(ranges) != len(strides) + 1:
            raise ValueError("need one more range boundary than levels")
        if ranges[0] != 0.0 or ranges[-1] != math.inf:
            raise ValueError("ranges must start at 0 and end at inf")
        if any(b <= a for a, b in zip(ranges, ranges[1:])):
            raise ValueError(f"range boundaries must increase: {ranges}")
        if self.n_pos < 1:
            raise ValueError("n_pos must be >= 1")

    @property
    def L(self) -> int:
        return len(self.strides)

    def grid_shape(self, level: int, image_size: tuple[int, int]) -> tuple[int, int]:
        """(rows, cols) of a level grid for an image of (width, height) px."""
        w, h = image_size
        s = self.strides[level]
        return math.ceil(h / s), math.ceil(w / s)

    def to_dict(self) -> dict:
        return {"strides": list(self.strides),
                "ranges": [None if math.isinf(r) else r for r in self.ranges],
                "n_pos": self.n_pos}

    @classmethod
    def from_dict(cls, d: dict) -> "LevelConfig":
        d = dict(d)
        kw = {}
        if "strides" in d:
            kw["strides"] = tuple(d.pop("strides"))
        if "ranges" in d:
            kw["ranges"] = tuple(d.pop("ranges"))
        if "n_pos" in d:
            kw["n_pos"] = int(d.pop("n_pos"))
        if d:
            raise ValueError(f"unknown level config keys: {sorted(d)}")
        return cls(**kw)


def max_root_distance(pose: Pose3D) -> float:
    xy = pose.joints[:, :2] - pose.root[:2]
    return float(np.sqrt((xy ** 2).sum(axis=1)).max())


def assign_level(r_max: float, cfg: LevelConfig) -> int:
    """Level l with ranges[l] <= r_max < ranges[l+1]."""
    if r_max < 0:
        raise ValueError("r_max must be non-negative")
    for level in range(cfg.L):
        if cfg.ranges[level] <= r_max < cfg.ranges[level + 1]:
            return level
    raise AssertionError("ranges are exhaustive")


def scale_to_level(pose: Pose3D, stride: float) -> Pose3D:
    if stride <= 0:
        raise ValueError("stride must be positive")
    j = pose.joints.copy()
    j[:, :2] /= stride
    return Pose3D(j, pose.root_index, pose.valid)


def centerness_target(p, box) -> float:
    """FCOS centerness of level point p=(x, y) inside box=(x0, y0, x1, y1)."""
    x, y = p
    x0, y0, x1, y1 = box
    l, r, t, b = x - x0, x1 - x, y - y0, y1 - y
    if min(l, r, t, b) < 0:
        return 0.0
    if max(l, r) == 0 or max(t, b) == 0:
        return float("nan")  # degenerate box, resolved by the caller
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


def nearest_pixels(center, shape: tuple[int, int], n: int) -> np.ndarray:
    """Row-major flat indices of the n cells nearest to center=(x, y)."""
    rows, cols = shape
    yy, xx = np.mgrid[0:rows, 0:cols]
    d2 = (xx.ravel() - center[0]) ** 2 + (yy.ravel() - center[1]) ** 2
    flat = np.arange(rows * cols)
    order = np.lexsort((flat, d2))
    return order[: min(n, rows * cols)]


@dataclass
class LevelTargets:
    stride: int
    confidence: np.ndarray      # (H, W, 1) in {0, 1}
    centerness: np.ndarray      # (H, W, 1) in [0, 1]
    center_coord: np.ndarray    # (H, W, 3): level-unit dx, dy, d/f
    joint_offsets: np.ndarray   # (H, W, 3K): level-unit dx, dy, raw mm dd
    joint_valid: np.ndarray     # (H, W, K)
    owner: np.ndarray           # (H, W) winning person id, -1 elsewhere
    positives: list[tuple[int, int, int]] = field(default_factory=list)  # (row, col, person)

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidence.shape[:2]

    def positive_cells(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique positive (rows, cols) in row-major order."""
        rows, cols = np.nonzero(self.owner >= 0)
        return rows, cols


@dataclass
class TargetMaps:
    levels: list[LevelTargets]
    person_level: list[int]     # -1 for skipped persons
    anchors: list[tuple[int, int] | None]  # nearest cell (row, col) per person
    skipped: int = 0

    @property
    def K(self) -> int:
        return self.levels[0].joint_offsets.shape[2] // 3


def build_targets(scene: list[Pose3D], intr: CameraIntrinsics, cfg: LevelConfig,
                  image_size: tuple[int, int]) -> TargetMaps:
    """Encode a scene (image-coordinate poses) into per-level target maps.

    ``image_size`` is (width, height) in px.
    """
    if not scene:
        raise ValueError("scene has no persons")
    K = scene[0].K
    width, height = image_size
    levels = []
    for level in range(cfg.L):
        rows, cols = cfg.grid_shape(level, image_size)
        levels.append(LevelTargets(
            stride=cfg.strides[level],
            confidence=np.zeros((rows, cols, 1)),
            centerness=np.zeros((rows, cols, 1)),
            center_coord=np.zeros((rows, cols, 3)),
            joint_offsets=np.zeros((rows, cols, 3 * K)),
            joint_valid=np.zeros((rows, cols, K), dtype=bool),
            owner=np.full((rows, cols), -1, dtype=np.int64),
        ))
    best_dist = [np.full(lt.shape, np.inf) for lt in levels]
    person_level: list[int] = []
    anchors: list[tuple[int, int] | None] = []
    skipped = 0
    for pid, pose in enumerate(scene):
        if pose.K != K:
            raise ValueError("all persons must share the joint count")
        rx, ry, rd = pose.root
        if not (0 <= rx < width and 0 <= ry < height and rd > 0):
            skipped += 1
            person_level.append(-1)
            anchors.append(None)
            continue
        level = assign_level(max_root_distance(pose), cfg)
        lt = levels[level]
        scaled = scale_to_level(pose, lt.stride)
        cx, cy, cd = scaled.root
        rows, cols = lt.shape
        picks = nearest_pixels((cx, cy), (rows, cols), cfg.n_pos)
        offsets = scaled.joints - scaled.root
        x0, y0 = scaled.joints[:, :2].min(axis=0)
        x1, y1 = scaled.joints[:, :2].max(axis=0)
        degenerate = (x1 - x0) == 0 or (y1 - y0) == 0
        valid = np.ones(K, dtype=bool) if pose.valid is None else pose.valid
        person_level.append(level)
        anchors.append(tuple(int(v) for v in divmod(int(picks[0]), cols)))
        for rank, flat in enumerate(picks):
            r, c = divmod(int(flat), cols)
            lt.positives.append((r, c, pid))
            lt.confidence[r, c, 0] = 1.0
            dist = math.hypot(cx - c, cy - r)
            if dist >= best_dist[level][r, c]:
                continue
            best_dist[level][r, c] = dist
            lt.owner[r, c] = pid
            if degenerate:
                ctr = 1.0 if rank == 0 else 0.0
            else:
                ctr = centerness_target((c, r), (x0, y0, x1, y1))
            lt.centerness[r, c, 0] = ctr
            lt.center_coord[r, c] = (cx - c, cy - r, normalize_depth(cd, intr.f))
            lt.joint_offsets[r, c] = offsets.reshape(-1)
            lt.joint_valid[r, c] = valid
    if skipped:
        log.warning("skipped %d person(s) with centers outside the image", skipped)
    return TargetMaps(levels, person_level, anchors, skipped)
