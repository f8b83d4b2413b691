"""Run configuration: one JSON file with strict keys and an env seed override."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..assign import LevelConfig
from ..losses import LossConfig
from ..rupdate import UpdateConfig
from ..flow import BASES
from .scenes import SceneConfigError, SyntheticSceneConfig

SEED_ENV = "DAS_SEED"
MODES = ("direct", "conv")


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, what: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


@dataclass(frozen=True)
class FlowConfig:
    n_layers: int = 4
    hidden: int = 16
    s_max: float = 2.0
    base: str = "gaussian"
    init_scale: float = 1.0

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"flow base must be one of {BASES}")
        if self.n_layers < 1 or self.hidden < 1:
            raise ValueError("flow needs at least one layer and one hidden unit")


@dataclass(frozen=True)
class LabelNoiseConfig:
    """Skewed heteroscedastic noise on non-root joints, in camera mm.

    Each label copy perturbs joint k with scale ``sigma_mm * joint_scale[k]``.
    Across ``direction`` (camera frame, or fixed per-joint random directions
    when empty) the noise is a standard normal. Along it, half the mass is
    ``-|N(0, 1)|``; the other half is ``+|N(0, 1)|``, except that with
    probability ``outlier_prob`` it is an excursion ``shift + Exp(tail)``.
    The clean joint is both the median and the mode along ``direction``.
    """

    kind: str = "none"
    copies: int = 8
    sigma_mm: float = 30.0
    outlier_prob: float = 0.3
    shift: float = 1.5
    tail: float = 3.0
    extremity_factor: float = 3.0
    direction: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        d = tuple(float(v) for v in self.direction)
        if d and (len(d) != 3 or not any(d)):
            raise ValueError("direction must be empty or a nonzero 3-vector")
        object.__setattr__(self, "direction", d)
        if self.kind not in ("none", "heteroscedastic"):
            raise ValueError("label noise kind must be 'none' or 'heteroscedastic'")
        if self.copies < 1:
            raise ValueError("copies must be >= 1")
        if not 0 <= self.outlier_prob <= 0.5:
            raise ValueError("outlier_prob must lie in [0, 0.5]")


@dataclass(frozen=True)
class InitNoiseConfig:
    """Starting maps for direct mode.

    ``structured`` starts each joint-offset map as the field pointing at the
    joint, corrupted by noise that is small within ``exact_radius`` cells of
    the joint and grows by ``slope`` per cell beyond it.
    """

    kind: str = "none"
    near: float = 0.05
    slope: float = 0.35
    exact_radius: float = 1.0
    depth_mm_per_cell: float = 40.0
    logit_noise: float = 0.3
    root_noise: float = 0.1

    def __post_init__(self):
        if self.kind not in ("none", "structured"):
            raise ValueError("init noise kind must be 'none' or 'structured'")


@dataclass(frozen=True)
class Units:
    """Step scales: direct-mode maps take lr * unit**2 * n * grad per channel,
    conv-head weights take lr * conv**2 * grad."""

    logit: float = 3.0
    xy: float = 1.0
    depth: float = 6.0
    dnorm: float = 1.0
    log_sigma: float = 1.0
    conv: float = 0.4


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "direct"
    steps: int = 500
    lr: float = 0.002
    lr_shared: float = 0.0002
    momentum: float = 0.9
    shared_clip: float = 1.0
    precond_every: int = 10
    curvature_ema: float = 0.9
    curvature_damping: float = 0.1
    sigma_warmup: int = 200
    sigma_shared: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    update: UpdateConfig = field(default_factory=lambda: UpdateConfig(n_layers=0))
    levels: LevelConfig = field(default_factory=LevelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    label_noise: LabelNoiseConfig = field(default_factory=LabelNoiseConfig)
    init_noise: InitNoiseConfig = field(default_factory=InitNoiseConfig)
    units: Units = field(default_factory=Units)
    sigma_init: tuple = (2.0, 2.0, 150.0)
    conv_hidden: int = 16
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"train mode must be one of {MODES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (self.lr > 0 and self.lr_shared > 0):
            raise ValueError("learning rates must be > 0")
        if self.precond_every < 1:
            raise ValueError("precond_every must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.sigma_warmup < 0:
            raise ValueError("sigma_warmup must be >= 0")
        if not 0 <= self.curvature_ema < 1 or self.curvature_damping <= 0:
            raise ValueError("curvature_ema must lie in [0, 1) and curvature_damping be > 0")
        sig = tuple(float(v) for v in self.sigma_init)
        if len(sig) != 3 or min(sig) <= 0:
            raise ValueError("sigma_init needs three positive scales (x, y, depth)")
        object.__setattr__(self, "sigma_init", sig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = self.levels.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("train must be a JSON object")
        d = dict(d)
        nested = {"loss": LossConfig, "update": UpdateConfig, "flow": FlowConfig,
                  "label_noise": LabelNoiseConfig, "init_noise": InitNoiseConfig,
                  "units": Units}
        for key, sub in nested.items():
            if key in d:
                d[key] = _strict(sub, d[key], key)
        if "levels" in d:
            try:
                d["levels"] = LevelConfig.from_dict(d["levels"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid levels: {exc}") from exc
        return _strict(cls, d, "train")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.05
    nms_radius: float = 150.0
    match_gate: float = 500.0
    pck_threshold: float = 150.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_scenes: int = 10
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be >= 1")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "n_scenes": self.n_scenes, "scene": self.scene.to_dict(),
                "train": self.train.to_dict(), "eval": asdict(self.eval)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        unknown = set(d) - {"seed", "n_scenes", "scene", "train", "eval"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "scene" in d:
            try:
                d["scene"] = SyntheticSceneConfig.from_dict(d["scene"])
            except (TypeError, SceneConfigError) as exc:
                raise ConfigError(f"invalid scene: {exc}") from exc
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "eval" in d:
            d["eval"] = _strict(EvalConfig, d["eval"], "eval")
        return _strict(cls, d, "config")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))


def load_config(path, environ=None) -> RunConfig:
    """Read a run config; the DAS_SEED environment variable overrides ``seed``."""
    environ = os.environ if environ is None else environ
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = RunConfig.from_dict(raw)
    if environ.get(SEED_ENV):
        try:
            cfg = cfg.with_seed(int(environ[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
