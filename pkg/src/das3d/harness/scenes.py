"""Synthetic pinhole scenes of posed skeletons, plus scene file I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..camgeom import CameraIntrinsics, CameraPose3D, Pose3D, back_project, project

JOINT_NAMES = (
    "pelvis", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

# Root-relative joint positions (mm) of an upright person facing the camera;
# camera frame has x right, y down, z forward.
TEMPLATE_MM = (
    (0, 0, 0), (0, -500, 20), (0, -700, 10),
    (-180, -480, 20), (-220, -220, 60), (-230, 20, 40),
    (180, -480, 20), (220, -220, 60), (230, 20, 40),
    (-100, 0, 0), (-110, 420, -20), (-120, 840, 20),
    (100, 0, 0), (110, 420, -20), (120, 840, 20),
)


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSceneConfig:
    image_width: int = 320
    image_height: int = 320
    focal: float = 320.0
    persons_min: int = 1
    persons_max: int = 3
    depth_min: float = 2500.0
    depth_max: float = 7000.0
    jitter_mm: float = 25.0
    yaw_deg: float = 60.0
    min_center_sep_px: float = 48.0
    min_pose_sep_mm: float = 400.0
    margin_px: float = 2.0
    template: tuple = TEMPLATE_MM
    names: tuple = JOINT_NAMES
    root_index: int = 0

    def __post_init__(self):
        if not 0 < self.depth_min < self.depth_max:
            raise SceneConfigError("depth range must be positive and increasing")
        if not 1 <= self.persons_min <= self.persons_max:
            raise SceneConfigError("persons range must satisfy 1 <= min <= max")
        if len(self.template) != len(self.names) or len(self.template) < 2:
            raise SceneConfigError("template and names must list the same K >= 2 joints")
        object.__setattr__(self, "template", tuple(tuple(float(v) for v in t) for t in self.template))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def K(self) -> int:
        return len(self.template)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image_width, self.image_height

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.image_width / 2.0, self.image_height / 2.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["template"] = [list(t) for t in self.template]
        d["names"] = list(self.names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneConfigError(f"unknown scene config keys: {sorted(unknown)}")
        d = dict(d)
        if "template" in d:
            d["template"] = tuple(tuple(t) for t in d["template"])
        if "names" in d:
            d["names"] = tuple(d["names"])
        return cls(**d)


@dataclass
class Scene:
    persons: list[Pose3D]
    camera_persons: list[CameraPose3D]
    intr: CameraIntrinsics
    image_size: tuple[int, int]
    names: tuple = JOINT_NAMES
    root_index: int = 0
    scene_id: str = "scene_0000"
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.persons[0].K

    def to_dict(self) -> dict:
        return {
            "id": self.scene_id,
            "camera": self.intr.to_dict(),
            "image": {"width": self.image_size[0], "height": self.image_size[1]},
            "skeleton": {"K": self.K, "root_index": self.root_index, "names": list(self.names)},
            "persons": [{"joints": p.joints.tolist()} for p in self.persons],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        intr = CameraIntrinsics.from_dict(d["camera"])
        skel = d["skeleton"]
        root = int(skel.get("root_index", 0))
        persons = [Pose3D(np.asarray(p["joints"], dtype=np.float64), root) for p in d["persons"]]
        for p in persons:
            if p.K != int(skel["K"]):
                raise ValueError("person joint count disagrees with skeleton K")
        cams = [CameraPose3D(back_project(p.joints, intr), root) for p in persons]
        if "image" in d:
            size = (int(d["image"]["width"]), int(d["image"]["height"]))
        else:
            size = (int(round(2 * intr.cx)), int(round(2 * intr.cy)))
        names = tuple(skel.get("names", [f"j{k}" for k in range(int(skel["K"]))]))
        return cls(persons, cams, intr, size, names, root, d.get("id", "scene"))


def _yaw_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def gen_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator,
              scene_id: str = "scene_0000", max_tries: int = 1000) -> Scene:
    """Rejection-sample a scene whose persons lie fully inside the image."""
    intr = cfg.intrinsics()
    template = np.asarray(cfg.template)
    W, H = cfg.image_size
    m = cfg.margin_px
    n = int(rng.integers(cfg.persons_min, cfg.persons_max + 1))
    cams: list[np.ndarray] = []
    imgs: list[np.ndarray] = []
    tries = 0
    while len(cams) < n:
        tries += 1
        if tries > max_tries:
            raise SceneConfigError(f"could not place {n} persons after {max_tries} tries")
        Z = rng.uniform(cfg.depth_min, cfg.depth_max)
        u = rng.uniform(m, W - m)
        v = rng.uniform(m, H - m)
        root = back_project(np.array([u, v, Z]), intr)
        yaw = math.radians(rng.uniform(-cfg.yaw_deg, cfg.yaw_deg))
        limbs = template + rng.normal(0.0, cfg.jitter_mm, template.shape)
        limbs[cfg.root_index] = 0.0
        cam = root + limbs @ _yaw_matrix(yaw).T
        if np.any(cam[:, 2] <= 0):
            continue
        img = project(cam, intr)
        if (img[:, 0].min() < m or img[:, 0].max() > W - m
                or img[:, 1].min() < m or img[:, 1].max() > H - m):
            continue
        r = cfg.root_index
        if any(np.hypot(*(img[r, :2] - o[r, :2])) < cfg.min_center_sep_px for o in imgs):
            continue
        if any(np.linalg.norm(cam - o, axis=1).mean() < cfg.min_pose_sep_mm for o in cams):
            continue
        cams.append(cam)
        imgs.append(img)
    persons = [Pose3D(img, cfg.root_index) for img in imgs]
    cam_poses = [CameraPose3D(cam, cfg.root_index) for cam in cams]
    return Scene(persons, cam_poses, intr, cfg.image_size, cfg.names, cfg.root_index, scene_id)


def gen_dataset(cfg: SyntheticSceneConfig, n: int, seed: int) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [gen_scene(cfg, rng, f"scene_{i:04d}") for i in range(n)]


def save_scene(path, scene: Scene) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=1) + "\n")


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def save_dataset(directory, scenes: list[Scene]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        save_scene(d / f"{s.scene_id}.json", s)


def load_dataset(directory) -> list[Scene]:
    files = sorted(Path(directory).glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no scene files in {directory}")
    return [load_scene(f) for f in files]
