"""Training loops over the full objective.

Two parameterizations of the prediction maps:

* ``direct``: every map value of every scene is a free parameter. This
  isolates the losses, flow and update stack from any backbone.
* ``conv``: a three-layer 3x3 convolutional head, shared over scenes and
  levels, maps a synthetic feature grid derived from the ground truth to the
  prediction maps.

Both use plain gradient descent (optional heavy-ball momentum). Direct-mode
map values step with ``lr * n * unit**2 * grad`` where ``n`` is the count
that the corresponding loss term averages over; this keeps step sizes
independent of dataset size and of the channel's physical unit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import numgrid as ng
from ..assign import TargetMaps, build_targets, scale_to_level
from ..camgeom import Pose3D, back_project, project
from ..decode import LevelMaps, PredictionMaps
from ..flow import FlowModel
from ..losses import (LOG_SIGMA_RANGE, DistHead, centerness_loss, focal_loss, l1_pose_loss, l1_root_loss,
                      mle_loss, rle_loss, total_loss)
from ..numgrid import NonFiniteError, Tensor
from ..rupdate import UpdateStack
from .config import LabelNoiseConfig, TrainConfig
from .scenes import Scene

log = logging.getLogger(__name__)

COMPONENTS = ("cls", "centerness", "root", "pose")
HISTORY_FIELDS = ("step", "L_cls", "L_centerness", "L_root", "L_pose", "total")


class NumericalError(FloatingPointError):
    """Non-finite loss; carries the step index and the component breakdown."""

    def __init__(self, step: int, breakdown: dict, detail: str = ""):
        self.step = step
        self.breakdown = dict(breakdown)
        parts = ", ".join(f"{k}={v}" for k, v in self.breakdown.items())
        msg = f"non-finite loss at step {step}: {parts}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


# ---------------------------------------------------------------------------
# dataset preparation
# ---------------------------------------------------------------------------

@dataclass
class LevelBatch:
    """Targets of one level stacked over scenes; positives are (scene, row, col)."""

    stride: int
    shape: tuple[int, int]
    confidence: np.ndarray          # (S, H, W, 1)
    scenes: np.ndarray              # (N,)
    rows: np.ndarray
    cols: np.ndarray
    centerness: np.ndarray          # (N,)
    root: np.ndarray                # (N, 3)
    joints: np.ndarray              # (R, N, K, 3), one slice per label copy
    valid: np.ndarray               # (N, K)

    @property
    def n(self) -> int:
        return len(self.rows)


@dataclass
class Dataset:
    scenes: list[Scene]
    targets: list[TargetMaps]
    levels: list[LevelBatch]

    @property
    def S(self) -> int:
        return len(self.scenes)

    @property
    def K(self) -> int:
        return self.targets[0].K

    @property
    def n_pos(self) -> int:
        return sum(lb.n for lb in self.levels)


def joint_noise_scales(template: np.ndarray, root_index: int, extremity_factor: float) -> np.ndarray:
    """Per-joint noise multipliers growing linearly with distance from the root."""
    dist = np.linalg.norm(template - template[root_index], axis=1)
    return 1.0 + (extremity_factor - 1.0) * dist / max(dist.max(), 1e-9)


def noisy_camera_joints(cam: np.ndarray, root_index: int, cfg: LabelNoiseConfig,
                        scales: np.ndarray, directions: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    K = cam.shape[0]
    core = rng.normal(0.0, 1.0, (K, 3))
    along = np.abs(rng.normal(0.0, 1.0, K))
    excursion = cfg.shift + rng.exponential(cfg.tail, K)
    u = rng.random(K)
    along = np.where(u < 0.5, -along, np.where(u < 0.5 + cfg.outlier_prob, excursion, along))
    e = core + (along - np.sum(core * directions, axis=1))[:, None] * directions
    e = e * (cfg.sigma_mm * scales)[:, None]
    e[root_index] = 0.0
    return cam + e


def _noisy_offsets(scene: Scene, stride: int, copies: int, cfg: LabelNoiseConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """(copies, persons, K, 3) level-unit offsets from noisy camera joints."""
    template = np.array([p.joints for p in scene.camera_persons])
    K = template.shape[1]
    out = np.empty((copies, len(scene.persons), K, 3))
    rel = template[0] - template[0][scene.root_index]
    scales = joint_noise_scales(rel, scene.root_index, cfg.extremity_factor)
    if cfg.direction:
        dirs = np.tile(np.asarray(cfg.direction), (K, 1))
    else:
        dirs = np.random.default_rng(12345).normal(size=(K, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for r in range(copies):
        for pid, (pose, cam) in enumerate(zip(scene.persons, scene.camera_persons)):
            noisy = project(noisy_camera_joints(cam.joints, scene.root_index, cfg, scales, dirs,
                                                rng), scene.intr)
            noisy[scene.root_index] = pose.root
            scaled = scale_to_level(Pose3D(noisy, scene.root_index), stride)
            out[r, pid] = scaled.joints - scaled.root
    return out


def prepare_dataset(scenes: list[Scene], tcfg: TrainConfig,
                    rng: np.random.Generator | None = None) -> Dataset:
    if not scenes:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(0) if rng is None else rng
    noise = tcfg.label_noise
    copies = noise.copies if noise.kind != "none" else 1
    targets = [build_targets(s.persons, s.intr, tcfg.levels, s.image_size) for s in scenes]
    K = targets[0].K
    levels = []
    for li in range(tcfg.levels.L):
        per = dict(scn=[], rows=[], cols=[], ctr=[], root=[], joints=[], valid=[])
        for si, (scene, tm) in enumerate(zip(scenes, targets)):
            lt = tm.levels[li]
            rows, cols = lt.positive_cells()
            per["scn"].append(np.full(len(rows), si, dtype=np.int64))
            per["rows"].append(rows)
            per["cols"].append(cols)
            per["ctr"].append(lt.centerness[rows, cols, 0])
            per["root"].append(lt.center_coord[rows, cols])
            per["valid"].append(lt.joint_valid[rows, cols])
            clean = lt.joint_offsets[rows, cols].reshape(-1, K, 3)
            if noise.kind == "none" or len(rows) == 0:
                per["joints"].append(np.broadcast_to(clean, (copies,) + clean.shape))
            else:
                offs = _noisy_offsets(scene, lt.stride, copies, noise, rng)
                per["joints"].append(offs[:, lt.owner[rows, cols]])
        stacked = np.stack([tm.levels[li].confidence for tm in targets])
        levels.append(LevelBatch(
            stride=targets[0].levels[li].stride,
            shape=targets[0].levels[li].shape,
            confidence=stacked,
            scenes=np.concatenate(per["scn"]),
            rows=np.concatenate(per["rows"]).astype(np.int64),
            cols=np.concatenate(per["cols"]).astype(np.int64),
            centerness=np.concatenate(per["ctr"]),
            root=np.concatenate(per["root"]).reshape(-1, 3),
            joints=np.concatenate(per["joints"], axis=1).reshape(copies, -1, K, 3),
            valid=np.concatenate(per["valid"]).reshape(-1, K),
        ))
    for s in scenes[1:]:
        if s.image_size != scenes[0].image_size or s.K != K:
            raise ValueError("all scenes must share image size and joint count")
    return Dataset(list(scenes), targets, levels)


# ---------------------------------------------------------------------------
# parameterizations
# ---------------------------------------------------------------------------

def _logit(p):
    p = np.clip(p, 1e-3, 1 - 1e-3)
    return np.log(p / (1 - p))


def _joint_fields(scene: Scene, tm: TargetMaps, li: int, stride: int, shape, K: int):
    """Starting offset fields for the structured initialization.

    Positive cells hold their center-relative targets. Every other cell holds
    the planar vector to the joint of the nearest person assigned to the
    level (zero depth), so the recursive update started at a positive cell
    lands on a near-zero correction. Returns (field (H, W, K, 3), distance
    in cells to the joint (H, W, K)).
    """
    H, W = shape
    lt = tm.levels[li]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    q = np.stack([xx, yy], axis=-1)[:, :, None, :]            # (H, W, 1, 2)
    fld = np.zeros((H, W, K, 3))
    best = np.full((H, W, K), np.inf)
    for pid, pose in enumerate(scene.persons):
        if tm.person_level[pid] != li:
            continue
        r0, c0 = tm.anchors[pid]
        scaled = scale_to_level(pose, stride)
        offs = scaled.joints - scaled.root
        t0 = np.array([c0, r0], dtype=np.float64) + offs[:, :2]
        xy = t0[None, None] - q                                # (H, W, K, 2)
        dist = np.linalg.norm(xy, axis=-1)
        take = dist < best
        fld[..., :2] = np.where(take[..., None], xy, fld[..., :2])
        best = np.where(take, dist, best)
        own = lt.owner == pid
        fld[own] = offs
        best[own] = np.linalg.norm(offs[:, :2], axis=-1)
    best[np.isinf(best)] = 0.0
    return fld, best


def _jacobian_colnorm2(flow: FlowModel, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Squared column norms of d flow.inverse / dz by central differences, floored."""
    out = np.empty_like(z)
    with ng.no_grad():
        for j in range(z.shape[1]):
            step = np.zeros(z.shape[1])
            step[j] = h
            d = (flow.inverse(z + step)[0].data - flow.inverse(z - step)[0].data) / (2 * h)
            out[:, j] = (d ** 2).sum(axis=1)
    return np.maximum(out, 1e-12)


class DirectModel:
    """Free prediction-map values per (scene, level)."""

    def __init__(self, data: Dataset, tcfg: TrainConfig, rng: np.random.Generator):
        self.tcfg = tcfg
        self.K = data.K
        self.conf, self.ctr, self.root, self.joints, self.log_sigma = [], [], [], [], []
        self._jac: dict[int, np.ndarray] = {}
        self._curv: dict[int, np.ndarray] = {}
        self._curv_steps = 0
        base_sigma = np.log(np.array(tcfg.sigma_init))
        init = tcfg.init_noise
        depth0 = np.mean([p.root[2] for s in data.scenes for p in s.persons])
        for li, lb in enumerate(data.levels):
            S, (H, W) = data.S, lb.shape
            conf = np.full((S, H, W, 1), -4.0)
            ctr = np.zeros((S, H, W, 1))
            root = np.zeros((S, H, W, 3))
            root[..., 2] = depth0 / data.scenes[0].intr.f
            joints = np.zeros((S, H, W, self.K, 3))
            if init.kind == "structured":
                for si, (scene, tm) in enumerate(zip(data.scenes, data.targets)):
                    lt = tm.levels[li]
                    pos = lt.owner >= 0
                    conf[si, ..., 0] = np.where(pos, 3.0, -5.0) + rng.normal(0, init.logit_noise, (H, W))
                    ctr[si, ..., 0] = np.where(pos, _logit(lt.centerness[..., 0]), -2.0)
                    ctr[si, ..., 0] += rng.normal(0, init.logit_noise, (H, W))
                    root[si] = np.where(pos[..., None], lt.center_coord, root[si])
                    root[si, ..., :2] += rng.normal(0, init.root_noise, (H, W, 2))
                    root[si, ..., 2] += rng.normal(0, init.root_noise * 0.1, (H, W))
                    fld, dist = _joint_fields(scene, tm, li, lb.stride, (H, W), self.K)
                    std = init.near + init.slope * np.maximum(0.0, dist - init.exact_radius)
                    noise = rng.normal(0.0, 1.0, (H, W, self.K, 3)) * std[..., None]
                    noise[..., 2] *= init.depth_mm_per_cell
                    joints[si] = fld + noise
            self.conf.append(Tensor(conf, requires_grad=True))
            self.ctr.append(Tensor(ctr, requires_grad=True))
            self.root.append(Tensor(root, requires_grad=True))
            self.joints.append(Tensor(joints, requires_grad=True))
            if not tcfg.sigma_shared:
                self.log_sigma.append(Tensor(np.broadcast_to(base_sigma, (S, H, W, self.K, 3)).copy(),
                                             requires_grad=True))
        if tcfg.sigma_shared:
            # one log-scale per joint and channel for every scene, level and pixel
            self.log_sigma.append(Tensor(np.broadcast_to(base_sigma, (self.K, 3)).copy(),
                                         requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return self.conf + self.ctr + self.root + self.joints + self.log_sigma

    def scale_params(self) -> list[Tensor]:
        return list(self.log_sigma)

    def project(self) -> None:
        """Keep log-scales inside the range where the loss clamp is inactive."""
        for t in self.log_sigma:
            np.clip(t.data, *LOG_SIGMA_RANGE, out=t.data)

    def _sigma_map(self, li: int):
        if not self.tcfg.sigma_shared:
            return self.log_sigma[li]
        return self.log_sigma[0] * np.ones(self.joints[li].shape[:3] + (1, 1))

    def _sigma_at(self, li: int, idx) -> np.ndarray:
        if not self.tcfg.sigma_shared:
            return self.log_sigma[li].data[idx]
        return np.broadcast_to(self.log_sigma[0].data, (len(idx[0]), self.K, 3))

    def level_outputs(self, li: int):
        return (ng.sigmoid(self.conf[li]), ng.sigmoid(self.ctr[li]), self.root[li],
                self.joints[li], self._sigma_map(li))

    def step_scales(self, data: Dataset) -> dict[int, np.ndarray | float]:
        """Per-parameter preconditioner (multiplied into lr * grad)."""
        u = self.tcfg.units
        n = max(1, data.n_pos)
        nk = n * (1 if self.tcfg.loss.pose_loss_kind == "l1" else self.K)
        xyz = np.array([u.xy, u.xy, u.depth]) ** 2
        root = np.array([u.xy, u.xy, u.dnorm]) ** 2
        scales = {}
        for li in range(len(self.conf)):
            scales[id(self.conf[li])] = n * u.logit ** 2
            scales[id(self.ctr[li])] = n * u.logit ** 2
            scales[id(self.root[li])] = n * root
            scales[id(self.joints[li])] = nk * xyz
        for t in self.log_sigma:
            scales[id(t)] = (1 if self.tcfg.sigma_shared else n) * self.K * u.log_sigma ** 2
        return scales

    def refresh_scales(self, data: Dataset, scales: dict, flow: FlowModel | None = None,
                       refresh_jacobian: bool = True) -> None:
        """Distribution-aware losses: precondition means at positives by the
        inverse Gauss-Newton curvature sigma**2 / |d base / d z|**2 of the flow.

        The flow Jacobian is cached between calls unless ``refresh_jacobian``.
        """
        if self.tcfg.loss.pose_loss_kind == "l1":
            return
        n = max(1, data.n_pos) * self.K
        xyz = np.array([self.tcfg.units.xy, self.tcfg.units.xy, self.tcfg.units.depth]) ** 2
        cap = 2.0 * np.log(self.tcfg.sigma_init)
        for li, lb in enumerate(data.levels):
            if lb.n == 0:
                continue
            idx = (lb.scenes, lb.rows, lb.cols)
            pre = np.broadcast_to(n * xyz, self.joints[li].shape).copy()
            pre_ls = np.full(self.joints[li].shape, n * self.tcfg.units.log_sigma ** 2)
            ls = np.clip(self._sigma_at(li, idx), *LOG_SIGMA_RANGE)
            eff = 2.0 * ls
            if flow is not None:
                z = (lb.joints - self.joints[li].data[idx]) * np.exp(-ls)
                if refresh_jacobian or li not in self._jac:
                    self._jac[li] = _jacobian_colnorm2(flow, z.reshape(-1, 3)).reshape(z.shape)
                jac = self._jac[li]
                eff = eff - np.log(jac.mean(axis=0))
                pre_ls[idx] /= np.maximum(1.0, (jac * z ** 2).mean(axis=0))
            # never step faster than at the starting scale
            pre[idx] = n * np.exp(np.minimum(eff, cap))
            scales[id(self.joints[li])] = pre
            if not self.tcfg.sigma_shared:
                scales[id(self.log_sigma[li])] = pre_ls

    def stack_curvature(self, data: Dataset, scales: dict, mean: Tensor,
                        rng: np.random.Generator) -> None:
        """Gauss-Newton diagonal of the joint maps seen through the update stack.

        The stack output at each positive carries a curvature weight ``w``
        (the inverse of its zero-layer step scale). One Rademacher probe
        ``v * sqrt(w)`` backpropagated through the stack gives an unbiased
        estimate of ``sum_o J_oi**2 w_o`` per map value; it is smoothed by an
        EMA and damped by a fraction of the per-channel mean weight. Call after
        ``refresh_scales`` and before the parameter gradients are consumed.
        """
        n = max(1, data.n_pos) * (1 if self.tcfg.loss.pose_loss_kind == "l1" else self.K)
        weights, used = [], []
        for li, lb in enumerate(data.levels):
            if lb.n == 0:
                continue
            base = np.broadcast_to(scales[id(self.joints[li])], self.joints[li].shape)
            weights.append(n / base[(lb.scenes, lb.rows, lb.cols)])
            used.append(li)
        w = np.concatenate(weights)
        saved = [(t, t.grad) for t in self.joints]
        for t in self.joints:
            t.grad = None
        probe = rng.choice((-1.0, 1.0), size=w.shape) * np.sqrt(w)
        mean.backward(probe)
        beta = self.tcfg.curvature_ema
        self._curv_steps += 1
        debias = 1.0 - beta ** self._curv_steps
        ref = w.reshape(-1, 3).mean(axis=0) * self.tcfg.curvature_damping
        for li in used:
            t = self.joints[li]
            est = np.zeros(t.shape) if t.grad is None else t.grad ** 2
            self._curv[li] = beta * self._curv.get(li, 0.0) + (1.0 - beta) * est
            scales[id(t)] = n / (self._curv[li] / debias + ref)
        for t, g in saved:
            t.grad = g

    def scene_maps(self, si: int, data_levels=None) -> tuple[PredictionMaps, list[np.ndarray]]:
        levels, joints = [], []
        for li in range(len(self.conf)):
            stride = self.tcfg.levels.strides[li]
            conf = 1.0 / (1.0 + np.exp(-self.conf[li].data[si]))
            ctr = 1.0 / (1.0 + np.exp(-self.ctr[li].data[si]))
            j = self.joints[li].data[si]
            H, W = j.shape[:2]
            levels.append(LevelMaps(stride, conf, ctr, self.root[li].data[si].copy(),
                                    j.reshape(H, W, -1).copy()))
            joints.append(j)
        return PredictionMaps(levels), joints


def conv_features(scene: Scene, tm: TargetMaps, li: int, stride: int) -> np.ndarray:
    """Synthetic backbone stand-in: center heatmap, depth, joint heatmaps, coordinates."""
    lt = tm.levels[li]
    H, W = lt.shape
    K = tm.K
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    feats = np.zeros((H, W, 4 + K))
    feats[..., -2] = xx / max(W - 1, 1)
    feats[..., -1] = yy / max(H - 1, 1)
    for pid, pose in enumerate(scene.persons):
        if tm.person_level[pid] != li:
            continue
        scaled = scale_to_level(pose, stride)
        cx, cy = scaled.root[:2]
        hm = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 2.0)
        feats[..., 0] = np.maximum(feats[..., 0], hm)
        feats[..., 1] = np.where(hm > 0.1, scaled.root[2] / scene.intr.f / 10.0, feats[..., 1])
        for k in range(K):
            jx, jy = scaled.joints[k, :2]
            feats[..., 2 + k] = np.maximum(feats[..., 2 + k],
                                           np.exp(-((xx - jx) ** 2 + (yy - jy) ** 2) / 2.0))
    return feats


class ConvModel:
    """Three 3x3 conv layers (tanh) shared over scenes and levels."""

    def __init__(self, data: Dataset, tcfg: TrainConfig, rng: np.random.Generator):
        self.tcfg = tcfg
        self.K = data.K
        self.features = [np.stack([conv_features(s, tm, li, lb.stride)
                                   for s, tm in zip(data.scenes, data.targets)])
                         for li, lb in enumerate(data.levels)]
        self.f = data.scenes[0].intr.f
        depth0 = float(np.mean([p.root[2] for s in data.scenes for p in s.persons]) / self.f)
        self.depth0 = depth0
        c_in = self.features[0].shape[-1]
        hid = tcfg.conv_hidden
        self.n_out = 2 + 3 + 6 * self.K
        shapes = [(3, 3, c_in, hid), (3, 3, hid, hid), (3, 3, hid, self.n_out)]
        self.weights, self.biases = [], []
        for i, shp in enumerate(shapes):
            std = 1.0 / math.sqrt(9 * shp[2])
            w = rng.normal(0.0, std, shp) * (0.1 if i == len(shapes) - 1 else 1.0)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(shp[3]), requires_grad=True))
        b = np.zeros(self.n_out)
        b[0] = -4.0
        self.biases[-1].data = b
        self._set_output_affine(self.depth0)

    def parameters(self) -> list[Tensor]:
        return self.weights + self.biases

    def _forward(self, x) -> Tensor:
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ng.conv3x3(h, w, b)
            if i < len(self.weights) - 1:
                h = ng.tanh(h)
        return h * self.out_scale + self.out_shift

    def level_outputs(self, li: int, features=None):
        x = self.features[li] if features is None else features
        out = self._forward(x)
        S, H, W, _ = out.shape
        K = self.K
        conf = ng.sigmoid(out[..., 0:1])
        ctr = ng.sigmoid(out[..., 1:2])
        root = out[..., 2:5]
        joints = out[..., 5:5 + 3 * K].reshape((S, H, W, K, 3))
        log_sigma = out[..., 5 + 3 * K:].reshape((S, H, W, K, 3))
        return conf, ctr, root, joints, log_sigma

    def step_scales(self, data: Dataset) -> dict:
        return {id(p): self.tcfg.units.conv ** 2 for p in self.parameters()}

    def scale_params(self) -> list[Tensor]:
        return []

    def project(self) -> None:
        return None

    def refresh_scales(self, data: Dataset, scales: dict, flow=None,
                       refresh_jacobian: bool = True) -> None:
        return None

    def scene_maps(self, si: int, scene: Scene | None = None, tm: TargetMaps | None = None):
        levels, joints = [], []
        for li, stride in enumerate(self.tcfg.levels.strides):
            if scene is None:
                x = self.features[li][si:si + 1]
            else:
                x = conv_features(scene, tm, li, stride)[None]
            conf, ctr, root, j, _ = self.level_outputs(li, x)
            H, W = conf.shape[1:3]
            levels.append(LevelMaps(stride, conf.data[0], ctr.data[0], root.data[0],
                                    j.data[0].reshape(H, W, -1)))
            joints.append(j.data[0])
        return PredictionMaps(levels), joints

    @classmethod
    def restore(cls, d: dict, tcfg: TrainConfig, focal: float) -> "ConvModel":
        """Rebuild a trained head from ``to_dict`` output, without training data."""
        self = cls.__new__(cls)
        self.tcfg = tcfg
        self.K = int(d["K"])
        self.features = []
        self.f = focal
        self.n_out = int(d["n_out"])
        self.weights = [Tensor(np.asarray(w, dtype=np.float64), requires_grad=True)
                        for w in d["weights"]]
        self.biases = [Tensor(np.asarray(b, dtype=np.float64), requires_grad=True)
                       for b in d["biases"]]
        self._set_output_affine(float(d["depth0"]))
        return self

    def _set_output_affine(self, depth0: float) -> None:
        u = self.tcfg.units
        self.depth0 = depth0
        self.out_scale = np.concatenate([
            [u.logit, u.logit], [u.xy, u.xy, u.dnorm],
            np.tile([u.xy, u.xy, u.depth], self.K), np.full(3 * self.K, u.log_sigma)])
        self.out_shift = np.zeros(self.n_out)
        self.out_shift[4] = depth0
        self.out_shift[5 + 3 * self.K:] = np.tile(np.log(self.tcfg.sigma_init), self.K)

    def to_dict(self) -> dict:
        return {"K": self.K, "n_out": self.n_out, "depth0": self.depth0,
                "weights": [w.data.tolist() for w in self.weights],
                "biases": [b.data.tolist() for b in self.biases]}


# ---------------------------------------------------------------------------
# objective and loop
# ---------------------------------------------------------------------------

def make_flow(tcfg: TrainConfig, rng: np.random.Generator) -> FlowModel:
    fc = tcfg.flow
    flow = FlowModel(fc.n_layers, fc.hidden, fc.s_max, fc.base)
    # identity map with live hidden units
    return flow.randomize(rng, fc.init_scale, 0.0)


def compute_losses(model, stack: UpdateStack, flow: FlowModel, data: Dataset,
                   tcfg: TrainConfig, extras: dict | None = None) -> dict[str, Tensor]:
    """Loss components; ``extras`` (if given) receives the stack output as "mean"."""
    cfg = tcfg.loss
    conf_all, conf_tgt = [], []
    ctr_p, ctr_t, root_p, root_t, mean_p, sig_p, joint_t, valid = [], [], [], [], [], [], [], []
    for li, lb in enumerate(data.levels):
        conf, ctr, root, joints, log_sigma = model.level_outputs(li)
        conf_all.append(conf.reshape((-1,)))
        conf_tgt.append(lb.confidence.reshape(-1))
        if lb.n == 0:
            continue
        idx = (lb.scenes, lb.rows, lb.cols)
        ctr_p.append(ctr[idx + (0,)])
        ctr_t.append(lb.centerness)
        root_p.append(root[idx])
        root_t.append(lb.root)
        mean_p.append(stack(joints, idx))
        sig_p.append(log_sigma[idx])
        joint_t.append(lb.joints)
        valid.append(lb.valid)
    out = {"cls": focal_loss(ng.concat(conf_all), np.concatenate(conf_tgt), cfg)}
    if not ctr_p:
        zero = Tensor(0.0)
        out.update(centerness=zero, root=zero, pose=zero)
        return out
    out["centerness"] = centerness_loss(ng.concat(ctr_p), np.concatenate(ctr_t))
    out["root"] = l1_root_loss(ng.concat(root_p), np.concatenate(root_t))
    mean = ng.concat(mean_p)                                   # (N, K, 3)
    if extras is not None:
        extras["mean"] = mean
    target = np.concatenate(joint_t, axis=1)                   # (R, N, K, 3)
    vmask = np.concatenate(valid)
    R, N, K, _ = target.shape
    ones = np.ones((R, 1, 1, 1))
    tiled = (ng.reshape(mean, (1, N, K, 3)) * ones).reshape((R * N, K, 3))
    flat_t = target.reshape(R * N, K, 3)
    flat_v = np.broadcast_to(vmask, (R, N, K)).reshape(R * N, K)
    kind = cfg.pose_loss_kind
    if kind == "l1":
        out["pose"] = l1_pose_loss(tiled, flat_t, valid=flat_v)
    else:
        ls = (ng.reshape(ng.concat(sig_p), (1, N, K, 3)) * ones).reshape((R * N, K, 3))
        head = DistHead(tiled, ls)
        if kind == "mle":
            out["pose"] = mle_loss(head, flat_t, flow, valid=flat_v)
        else:
            out["pose"] = rle_loss(head, flat_t, flow, cfg.prior, valid=flat_v)
    return out


@dataclass
class TrainResult:
    model: object
    stack: UpdateStack
    flow: FlowModel
    history: list[dict] = field(default_factory=list)
    data: Dataset | None = None


def _clip_factor(params: list[Tensor], max_norm: float) -> float:
    """Scale that brings the global gradient norm of ``params`` down to max_norm."""
    if max_norm <= 0:
        return 1.0
    sq = sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    return 1.0 if norm <= max_norm else max_norm / norm


def _breakdown(comps: dict) -> dict:
    return {k: float(np.asarray(v.data)) for k, v in comps.items()}


def train(scenes: list[Scene], tcfg: TrainConfig, seed: int = 0,
          progress=None) -> TrainResult:
    """Gradient descent on total_loss; returns parameters and loss history."""
    if not scenes:
        raise ValueError("dataset is empty")
    data = prepare_dataset(scenes, tcfg, np.random.default_rng([seed, 1]))
    model_cls = DirectModel if tcfg.mode == "direct" else ConvModel
    model = model_cls(data, tcfg, np.random.default_rng([seed, 2]))
    stack = UpdateStack(tcfg.update, np.random.default_rng([seed, 3]))
    flow = make_flow(tcfg, np.random.default_rng([seed, 4]))
    shared = list(stack.parameters())
    if tcfg.loss.pose_loss_kind != "l1":
        shared += flow.parameters()
    shared_ids = {id(p) for p in shared}
    own = model.parameters()
    # scale maps stay at sigma_init until the means have settled
    frozen = {id(p) for p in model.scale_params()}
    scales = model.step_scales(data)
    base_scales = dict(scales)
    probe_rng = np.random.default_rng([seed, 5])
    use_curvature = isinstance(model, DirectModel) and tcfg.update.n_layers > 0
    velocity = {id(p): np.zeros_like(p.data) for p in own + shared}
    history = []
    for step in range(tcfg.steps):
        for p in own + shared:
            p.zero_grad()
        try:
            extras = {}
            comps = compute_losses(model, stack, flow, data, tcfg, extras)
            total = total_loss(comps, tcfg.loss)
        except NonFiniteError as exc:
            raise NumericalError(step, {}, str(exc)) from exc
        breakdown = _breakdown(comps)
        breakdown["total"] = float(total.data)
        if not all(math.isfinite(v) for v in breakdown.values()):
            raise NumericalError(step, breakdown)
        total.backward()
        model.refresh_scales(data, scales, flow, step % tcfg.precond_every == 0)
        if use_curvature and "mean" in extras:
            if tcfg.loss.pose_loss_kind == "l1":
                scales.update(base_scales)
            model.stack_curvature(data, scales, extras["mean"], probe_rng)
        clip = _clip_factor(shared, tcfg.shared_clip)
        for p in own + shared:
            if p.grad is None or (step < tcfg.sigma_warmup and id(p) in frozen):
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(step, breakdown, "non-finite gradient")
            if id(p) in shared_ids:
                step_size = tcfg.lr_shared * clip
            else:
                step_size = tcfg.lr * scales.get(id(p), 1.0)
            v = velocity[id(p)]
            v *= tcfg.momentum
            v -= step_size * p.grad
            p.data = p.data + v
        model.project()
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            history.append({"step": step, "L_cls": breakdown["cls"],
                            "L_centerness": breakdown["centerness"],
                            "L_root": breakdown["root"], "L_pose": breakdown["pose"],
                            "total": breakdown["total"]})
        if progress is not None:
            progress(step, breakdown)
    return TrainResult(model, stack, flow, history, data)


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
