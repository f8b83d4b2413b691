"""One-pass pose reconstruction from prediction maps, NMS and metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assign import TargetMaps
from .camgeom import CameraIntrinsics, CameraPose3D, Pose3D, back_project, denormalize_depth

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.05
DEFAULT_NMS_RADIUS = 150.0
DEFAULT_MATCH_GATE = 500.0


@dataclass
class LevelMaps:
    """Dense predictions of one level, all shaped (H, W, C)."""

    stride: int
    confidence: np.ndarray
    centerness: np.ndarray
    root: np.ndarray
    joints: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidence.shape[:2]


@dataclass
class PredictionMaps:
    levels: list[LevelMaps]
    root_index: int = 0

    @classmethod
    def from_targets(cls, targets: TargetMaps, root_index: int = 0) -> "PredictionMaps":
        return cls([LevelMaps(lt.stride, lt.confidence, lt.centerness, lt.center_coord,
                              lt.joint_offsets) for lt in targets.levels], root_index)


@dataclass
class Detection:
    pose: Pose3D
    camera_pose: CameraPose3D
    score: float
    level: int = 0
    pixel: tuple[int, int] = (0, 0)
    pixel_index: int = 0

    def to_dict(self) -> dict:
        return {"score": self.score, "level": self.level, "pixel": list(self.pixel),
                "joints_image": self.pose.joints.tolist(),
                "joints_camera": self.camera_pose.joints.tolist()}


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_preds: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


def _plane(a) -> np.ndarray:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    return a[..., 0] if a.ndim == 3 else a


def extract_positives(conf, centerness, threshold: float = DEFAULT_THRESHOLD):
    """[((row, col), score)] for pixels with confidence strictly above threshold."""
    c, q = _plane(conf), _plane(centerness)
    if c.shape != q.shape:
        raise ValueError("confidence and centerness maps differ in shape")
    rows, cols = np.nonzero(c > threshold)
    return [((int(r), int(k)), float(c[r, k] * q[r, k])) for r, k in zip(rows, cols)]


def reconstruct(positives, root_map, joint_map, stride: float, intr: CameraIntrinsics,
                level: int = 0, root_index: int = 0, joint_offsets=None,
                stats: dict | None = None) -> list[Detection]:
    """Compose center and center-relative offsets into image and camera poses.

    ``joint_offsets`` optionally overrides the joint map with already
    refined per-positive offsets of shape (N, K, 3).
    """
    root_map = np.asarray(getattr(root_map, "values", root_map), dtype=np.float64)
    joint_map = np.asarray(getattr(joint_map, "values", joint_map), dtype=np.float64)
    width = root_map.shape[1]
    K = joint_map.shape[-1] // 3 if joint_map.ndim == 3 else joint_map.shape[-2]
    out, dropped = [], 0
    for i, ((r, c), score) in enumerate(positives):
        dx, dy, dnorm = root_map[r, c]
        if joint_offsets is not None:
            offs = np.asarray(joint_offsets[i], dtype=np.float64).reshape(K, 3)
        else:
            offs = joint_map[r, c].reshape(K, 3)
        center = np.array([(c + dx) * stride, (r + dy) * stride, denormalize_depth(dnorm, intr.f)])
        joints = np.empty((K, 3))
        joints[:, :2] = center[:2] + offs[:, :2] * stride
        joints[:, 2] = center[2] + offs[:, 2]
        if not np.all(np.isfinite(joints)) or np.any(joints[:, 2] <= 0):
            dropped += 1
            continue
        pose = Pose3D(joints, root_index)
        cam = CameraPose3D(back_project(joints, intr), root_index)
        out.append(Detection(pose, cam, float(np.clip(score, 0.0, 1.0)), level, (r, c),
                             r * width + c))
    if dropped:
        log.debug("dropped %d detection(s) with non-positive depth", dropped)
    if stats is not None:
        stats["dropped"] = stats.get("dropped", 0) + dropped
    return out


def _joints(p) -> np.ndarray:
    if isinstance(p, Detection):
        p = p.camera_pose
    return np.asarray(getattr(p, "joints", p), dtype=np.float64)


def mean_joint_distance(a, b) -> float:
    return float(np.linalg.norm(_joints(a) - _joints(b), axis=-1).mean())


def pose_nms(detections: list[Detection], radius_mm: float = DEFAULT_NMS_RADIUS) -> list[Detection]:
    """Greedy suppression by mean per-joint camera-space distance."""
    order = sorted(detections, key=lambda d: (-d.score, d.level, d.pixel_index))
    kept: list[Detection] = []
    for det in order:
        if all(mean_joint_distance(det, k) >= radius_mm for k in kept):
            kept.append(det)
    return kept


def decode_maps(maps: PredictionMaps, intr: CameraIntrinsics,
                threshold: float = DEFAULT_THRESHOLD, nms_radius: float = DEFAULT_NMS_RADIUS,
                refine=None, stats: dict | None = None) -> list[Detection]:
    """Full decode over all levels followed by one global NMS.

    ``refine(level, rows, cols)`` may return refined (N, K, 3) joint offsets;
    the update stack plugs in here.
    """
    dets: list[Detection] = []
    for li, lm in enumerate(maps.levels):
        pos = extract_positives(lm.confidence, lm.centerness, threshold)
        if not pos:
            continue
        offsets = None
        if refine is not None:
            rows = np.array([p[0][0] for p in pos])
            cols = np.array([p[0][1] for p in pos])
            offsets = refine(li, rows, cols)
        dets.extend(reconstruct(pos, lm.root, lm.joints, lm.stride, intr, li,
                                maps.root_index, offsets, stats))
    return pose_nms(dets, nms_radius)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mpjpe(pred, gt, root_align: bool = True, root_index: int = 0) -> float:
    p, g = _joints(pred), _joints(gt)
    if p.shape != g.shape:
        raise ValueError(f"joint count mismatch: {p.shape} vs {g.shape}")
    if root_align:
        p = p - p[root_index]
        g = g - g[root_index]
    return float(np.linalg.norm(p - g, axis=-1).mean())


def match_poses(preds, gts, gate_mm: float = DEFAULT_MATCH_GATE,
                root_index: int = 0) -> MatchResult:
    """Greedy one-to-one matching by ascending root-joint distance."""
    cand = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            d = float(np.linalg.norm(_joints(p)[root_index] - _joints(g)[root_index]))
            if d <= gate_mm:
                cand.append((d, i, j))
    cand.sort()
    used_p, used_g = set(), set()
    res = MatchResult()
    for _, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        res.pairs.append((i, j))
    res.unmatched_preds = [i for i in range(len(preds)) if i not in used_p]
    res.unmatched_gts = [j for j in range(len(gts)) if j not in used_g]
    return res


def pck(preds, gts, mode: str = "rel", threshold_mm: float = 150.0,
        matching: MatchResult | None = None, root_index: int = 0) -> float:
    """Percentage of GT joints within threshold of their matched prediction.

    Joints of unmatched ground truths count as incorrect.
    """
    if mode not in ("rel", "abs"):
        raise ValueError("mode must be 'rel' or 'abs'")
    if not gts:
        return float("nan")
    if matching is None:
        matching = match_poses(preds, gts, root_index=root_index)
    total = sum(_joints(g).shape[0] for g in gts)
    correct = 0
    for i, j in matching.pairs:
        p, g = _joints(preds[i]), _joints(gts[j])
        if mode == "rel":
            p = p - p[root_index]
            g = g - g[root_index]
        correct += int((np.linalg.norm(p - g, axis=-1) <= threshold_mm).sum())
    return 100.0 * correct / total
