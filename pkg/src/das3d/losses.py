"""Training objectives: focal, centerness, L1 and distribution-aware losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numgrid as ng
from .flow import FlowModel, base_log_prob
from .numgrid import Tensor

POSE_LOSSES = ("l1", "mle", "rle")
EPS = 1e-7
LOG_SIGMA_RANGE = (-10.0, 10.0)


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    pose_loss_kind: str = "l1"
    prior: str = "laplace"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0 or self.focal_gamma < 0:
            raise ValueError("loss weights and focal gamma must be non-negative")
        if not 0 <= self.focal_alpha <= 1:
            raise ValueError("focal_alpha must lie in [0, 1]")
        if self.pose_loss_kind not in POSE_LOSSES:
            raise ValueError(f"pose_loss_kind must be one of {POSE_LOSSES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DistHead:
    """Per-positive expectation and log scale, both shaped (N, K, 3)."""

    mean: Tensor
    log_sigma: Tensor


def _gather(values, positives):
    if positives is None:
        return values
    rows, cols = positives
    return values[rows, cols]


def focal_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sigmoid focal loss summed over pixels, divided by max(1, #positives)."""
    y = np.asarray(target, dtype=np.float64)
    p = ng.clip(pred, EPS, 1.0 - EPS)
    p_t = p * (2.0 * y - 1.0) + (1.0 - y)
    alpha_t = cfg.focal_alpha * y + (1.0 - cfg.focal_alpha) * (1.0 - y)
    modulator = ng.power(1.0 - p_t, cfg.focal_gamma) if cfg.focal_gamma else 1.0
    per_pixel = ng.log(p_t) * modulator * (-alpha_t)
    return per_pixel.sum() * (1.0 / max(1.0, float(y.sum())))


def binary_cross_entropy(pred, target) -> Tensor:
    y = np.asarray(target, dtype=np.float64)
    p = ng.clip(pred, EPS, 1.0 - EPS)
    return (ng.log(p) * y + ng.log(1.0 - p) * (1.0 - y)) * -1.0


def centerness_loss(pred, target, mask=None) -> Tensor:
    """Mean BCE over the positive entries (``mask``); 0 without positives."""
    pred = ng.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return Tensor(0.0)
        pred, target = pred[mask], target[mask]
    if target.size == 0:
        return Tensor(0.0)
    return binary_cross_entropy(pred, target).mean()


def l1_root_loss(pred, target, positives=None) -> Tensor:
    """Sum over positives of the L1 center-coordinate error, per positive."""
    pred = _gather(ng.as_tensor(pred), positives)
    target = _gather(np.asarray(target, dtype=np.float64), positives)
    n = pred.shape[0]
    if n == 0:
        return Tensor(0.0)
    return ng.tabs(pred - target).sum() * (1.0 / n)


def _pose_view(x, K=None):
    """Accept (N, 3K) or (N, K, 3) and return (N, K, 3)."""
    if x.ndim == 2:
        K = x.shape[1] // 3 if K is None else K
        return x.reshape((x.shape[0], K, 3))
    return x


def l1_pose_loss(pred, target, positives=None, valid=None) -> Tensor:
    """Sum over joints and positives of L1 offset error, per positive."""
    pred = _pose_view(_gather(ng.as_tensor(pred), positives))
    target = np.asarray(_pose_view(_gather(np.asarray(target, dtype=np.float64), positives)))
    n = pred.shape[0]
    if n == 0:
        return Tensor(0.0)
    err = ng.tabs(pred - target)
    if valid is not None:
        err = err * np.asarray(valid, dtype=np.float64)[..., None]
    return err.sum() * (1.0 / n)


def normalized_error(head: DistHead, target):
    """z_hat = (u_hat - u_bar) / sigma with the clamped log-scale."""
    log_sigma = ng.clip(head.log_sigma, *LOG_SIGMA_RANGE)
    z = (np.asarray(target, dtype=np.float64) - head.mean) * ng.exp(log_sigma * -1.0)
    return z, log_sigma


def _average(per_item: Tensor, valid) -> Tensor:
    if valid is None:
        return per_item.mean() if per_item.data.size else Tensor(0.0)
    w = np.asarray(valid, dtype=np.float64)
    if w.sum() == 0:
        return Tensor(0.0)
    return (per_item * w).sum() * (1.0 / w.sum())


def mle_loss(head: DistHead, target, flow: FlowModel, valid=None) -> Tensor:
    """-log P_Z(z_hat | theta) + sum(log sigma), averaged over (positive, joint)."""
    z, log_sigma = normalized_error(head, target)
    nll = flow.log_prob(z) * -1.0 + log_sigma.sum(axis=-1)
    return _average(nll, valid)


def rle_loss(head: DistHead, target, flow: FlowModel, prior: str = "laplace",
             valid=None) -> Tensor:
    """-log Q_Z(z_hat) - log G_Z(z_hat | theta) + sum(log sigma), averaged."""
    z, log_sigma = normalized_error(head, target)
    nll = (base_log_prob(z, prior) + flow.log_prob(z)) * -1.0 + log_sigma.sum(axis=-1)
    return _average(nll, valid)


def total_loss(components: dict, cfg: LossConfig = LossConfig()) -> Tensor:
    """L_cls + lambda1 L_centerness + lambda2 L_root + lambda3 L_pose."""
    total = ng.as_tensor(components["cls"])
    for key, weight in (("centerness", cfg.lambda1), ("root", cfg.lambda2),
                        ("pose", cfg.lambda3)):
        if weight:
            total = total + ng.as_tensor(components[key]) * weight
    return total
