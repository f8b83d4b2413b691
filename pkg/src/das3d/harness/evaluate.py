"""Full inference path and metric reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..decode import (PredictionMaps, decode_maps, match_poses, mpjpe, pck)
from ..flow import FlowModel
from ..numgrid import Tensor
from ..rupdate import UpdateStack
from .config import EvalConfig
from .scenes import Scene

REPORT_FIELDS = ("scene_id", "n_gt", "n_det", "n_matched", "MPJPE", "MPJPE_abs",
                 "PCK_rel", "PCK_abs")


@dataclass
class SceneMetrics:
    scene_id: str
    n_gt: int
    n_det: int
    n_matched: int
    person_mpjpe: list[float] = field(default_factory=list)
    person_mpjpe_abs: list[float] = field(default_factory=list)
    correct_rel: int = 0
    correct_abs: int = 0
    n_joints: int = 0

    def row(self) -> dict:
        return {"scene_id": self.scene_id, "n_gt": self.n_gt, "n_det": self.n_det,
                "n_matched": self.n_matched,
                "MPJPE": _mean(self.person_mpjpe), "MPJPE_abs": _mean(self.person_mpjpe_abs),
                "PCK_rel": _pct(self.correct_rel, self.n_joints),
                "PCK_abs": _pct(self.correct_abs, self.n_joints)}


def _mean(v) -> float:
    return float(np.mean(v)) if len(v) else float("nan")


def _pct(a: int, b: int) -> float:
    return 100.0 * a / b if b else float("nan")


@dataclass
class Report:
    scenes: list[SceneMetrics]

    def mean(self) -> dict:
        """Pooled over matched persons (MPJPE) and over GT joints (PCK)."""
        mp = [v for s in self.scenes for v in s.person_mpjpe]
        ma = [v for s in self.scenes for v in s.person_mpjpe_abs]
        nj = sum(s.n_joints for s in self.scenes)
        return {"scene_id": "mean", "n_gt": sum(s.n_gt for s in self.scenes),
                "n_det": sum(s.n_det for s in self.scenes),
                "n_matched": sum(s.n_matched for s in self.scenes),
                "MPJPE": _mean(mp), "MPJPE_abs": _mean(ma),
                "PCK_rel": _pct(sum(s.correct_rel for s in self.scenes), nj),
                "PCK_abs": _pct(sum(s.correct_abs for s in self.scenes), nj)}

    @property
    def mpjpe(self) -> float:
        return self.mean()["MPJPE"]


def fmt_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return "nan" if math.isnan(v) else f"{v:.6f}"


def report_csv(report: Report, extra_rows: list[dict] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for row in [s.row() for s in report.scenes] + [report.mean()] + list(extra_rows or []):
        w.writerow([fmt_value(row[k]) for k in REPORT_FIELDS])
    return buf.getvalue()


def write_report(path, report: Report) -> None:
    Path(path).write_text(report_csv(report))


def refine_fn(stack: UpdateStack | None, joints: list[np.ndarray]):
    """Adapter from the update stack to decode's refine hook."""
    if stack is None or stack.cfg.n_layers == 0:
        return None

    def refine(level: int, rows, cols):
        return stack(Tensor(joints[level]), (rows, cols)).data

    return refine


def score_scene(scene: Scene, maps: PredictionMaps, joints: list[np.ndarray],
                stack: UpdateStack | None, ecfg: EvalConfig = EvalConfig()) -> SceneMetrics:
    """predict -> update stack -> decode -> NMS -> back-project -> metrics."""
    dets = decode_maps(maps, scene.intr, ecfg.threshold, ecfg.nms_radius,
                       refine_fn(stack, joints))
    preds = [d.camera_pose for d in dets]
    gts = list(scene.camera_persons)
    m = match_poses(preds, gts, ecfg.match_gate, scene.root_index)
    sm = SceneMetrics(scene.scene_id, len(gts), len(preds), len(m.pairs))
    sm.n_joints = sum(g.K for g in gts)
    for i, j in m.pairs:
        sm.person_mpjpe.append(mpjpe(preds[i], gts[j], True, scene.root_index))
        sm.person_mpjpe_abs.append(mpjpe(preds[i], gts[j], False, scene.root_index))
    sm.correct_rel = int(round(pck(preds, gts, "rel", ecfg.pck_threshold, m, scene.root_index)
                               * sm.n_joints / 100.0))
    sm.correct_abs = int(round(pck(preds, gts, "abs", ecfg.pck_threshold, m, scene.root_index)
                               * sm.n_joints / 100.0))
    return sm


def evaluate(predict, scenes: list[Scene], stack: UpdateStack | None,
             ecfg: EvalConfig = EvalConfig()) -> Report:
    """``predict(index, scene)`` returns (PredictionMaps, per-level (H, W, K, 3) joints)."""
    out = []
    for i, scene in enumerate(scenes):
        maps, joints = predict(i, scene)
        out.append(score_scene(scene, maps, joints, stack, ecfg))
    return Report(out)


def oracle_predict(levels_cfg):
    """Predictor that returns the encoded ground truth itself."""
    from ..assign import build_targets

    def predict(_i, scene: Scene):
        tm = build_targets(scene.persons, scene.intr, levels_cfg, scene.image_size)
        maps = PredictionMaps.from_targets(tm, scene.root_index)
        joints = [lt.joint_offsets.reshape(lt.shape + (tm.K, 3)) for lt in tm.levels]
        return maps, joints

    return predict


# ---------------------------------------------------------------------------
# learned-distribution export
# ---------------------------------------------------------------------------

def export_distribution(flow: FlowModel, lo: float = -3.0, hi: float = 3.0,
                        step: float = 0.1, z3_lo: float = -6.0, z3_hi: float = 6.0,
                        z3_step: float = 0.05, chunk: int = 200000) -> np.ndarray:
    """Rows (z1, z2, density) of the (z1, z2) marginal.

    The third coordinate is integrated out with the trapezoid rule over
    [z3_lo, z3_hi].
    """
    axis = np.arange(lo, hi + step / 2, step)
    z3 = np.arange(z3_lo, z3_hi + z3_step / 2, z3_step)
    w = np.full(len(z3), z3_step)
    w[0] = w[-1] = z3_step / 2
    z1, z2 = (g.ravel() for g in np.meshgrid(axis, axis, indexing="ij"))
    marginal = np.empty(len(z1))
    per = max(1, chunk // len(z3))
    for i in range(0, len(z1), per):
        a, b = z1[i:i + per], z2[i:i + per]
        pts = np.stack(np.broadcast_arrays(a[:, None], b[:, None], z3[None, :]), axis=-1)
        dens = np.exp(flow.log_prob(pts.reshape(-1, 3)).data).reshape(len(a), len(z3))
        marginal[i:i + per] = dens @ w
    return np.column_stack([z1, z2, marginal])


def distribution_csv(table: np.ndarray) -> str:
    lines = ["z1,z2,density"]
    lines += [f"{a:.6f},{b:.6f},{d:.9e}" for a, b, d in table]
    return "\n".join(lines) + "\n"

