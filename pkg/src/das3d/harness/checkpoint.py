"""Prediction-map bundles and checkpoint directories.

A map bundle is a JSON header plus one little-endian float64 sidecar file.
Every map entry carries the DenseMap header fields and a byte offset into
the sidecar.

A checkpoint directory holds ``config.json``, ``history.csv``, ``flow.json``
and ``update.json``, plus per-scene map bundles under ``maps/`` (direct mode)
or the conv weights in ``head.json`` (conv mode).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..assign import build_targets
from ..decode import LevelMaps, PredictionMaps
from ..flow import FlowModel
from ..numgrid import DenseMap
from ..rupdate import UpdateStack
from .config import RunConfig, save_config, load_config
from .train import HISTORY_FIELDS, ConvModel, DirectModel

MAP_NAMES = ("confidence", "centerness", "root", "joints")


def save_maps(path, maps: PredictionMaps) -> Path:
    """Write ``path`` (.json header) and its .bin sidecar; returns the header path."""
    path = Path(path).with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    chunks, levels, offset = [], [], 0
    for lv in maps.levels:
        entry = {"stride": int(lv.stride), "maps": {}}
        for name in MAP_NAMES:
            dm = DenseMap(getattr(lv, name))
            raw = dm.to_bytes()
            entry["maps"][name] = dict(dm.header(), offset=offset)
            chunks.append(raw)
            offset += len(raw)
        levels.append(entry)
    bin_path.write_bytes(b"".join(chunks))
    header = {"format": "das3d-maps", "data": bin_path.name,
              "root_index": int(maps.root_index), "levels": levels}
    path.write_text(json.dumps(header, indent=1) + "\n")
    return path


def load_maps(path) -> PredictionMaps:
    """Read a bundle given either its .json header or its .bin sidecar."""
    path = Path(path)
    header_path = path.with_suffix(".json")
    header = json.loads(header_path.read_text())
    if header.get("format") != "das3d-maps":
        raise ValueError(f"{header_path} is not a prediction-map bundle")
    raw = (header_path.parent / header["data"]).read_bytes()
    levels = []
    for entry in header["levels"]:
        arrays = {name: DenseMap.from_bytes(h, raw, int(h["offset"])).values.copy()
                  for name, h in entry["maps"].items()}
        levels.append(LevelMaps(int(entry["stride"]), **{n: arrays[n] for n in MAP_NAMES}))
    return PredictionMaps(levels, int(header.get("root_index", 0)))


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "step" else float(r[k])) for k in HISTORY_FIELDS} for r in rows]


@dataclass
class Checkpoint:
    cfg: RunConfig
    flow: FlowModel
    stack: UpdateStack
    history: list[dict]
    maps: dict | None = None          # scene_id -> PredictionMaps (direct mode)
    head: ConvModel | None = None     # conv mode

    def predictor(self):
        """``predict(index, scene)`` for :func:`evaluate`."""
        if self.head is not None:
            head, levels = self.head, self.cfg.train.levels

            def predict(_i, scene):
                tm = build_targets(scene.persons, scene.intr, levels, scene.image_size)
                return head.scene_maps(0, scene, tm)
            return predict

        def predict(_i, scene):
            if scene.scene_id not in self.maps:
                raise KeyError(f"checkpoint has no maps for scene {scene.scene_id!r}")
            maps = self.maps[scene.scene_id]
            return maps, joints_view(maps)
        return predict


def save_checkpoint(directory, cfg: RunConfig, result) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_config(d / "config.json", cfg)
    (d / "flow.json").write_text(json.dumps(result.flow.to_dict()) + "\n")
    (d / "update.json").write_text(json.dumps(result.stack.to_dict()) + "\n")
    write_history(d / "history.csv", result.history)
    model = result.model
    if isinstance(model, DirectModel):
        (d / "maps").mkdir(exist_ok=True)
        for si, scene in enumerate(result.data.scenes):
            maps, _ = model.scene_maps(si)
            save_maps(d / "maps" / f"{scene.scene_id}.json", maps)
    else:
        (d / "head.json").write_text(json.dumps(model.to_dict()) + "\n")
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    if not (d / "config.json").is_file():
        raise FileNotFoundError(f"{d} is not a checkpoint directory")
    cfg = load_config(d / "config.json", environ={})
    flow = FlowModel.from_dict(json.loads((d / "flow.json").read_text()))
    stack = UpdateStack.from_dict(json.loads((d / "update.json").read_text()))
    history = read_history(d / "history.csv")
    ck = Checkpoint(cfg, flow, stack, history)
    if cfg.train.mode == "direct":
        ck.maps = {p.stem: load_maps(p) for p in sorted((d / "maps").glob("*.json"))}
    else:
        focal = cfg.scene.focal
        ck.head = ConvModel.restore(json.loads((d / "head.json").read_text()), cfg.train, focal)
    return ck


def joints_view(maps: PredictionMaps) -> list[np.ndarray]:
    """Per-level (H, W, K, 3) joint maps of a bundle."""
    out = []
    for lv in maps.levels:
        H, W, C = lv.joints.shape
        out.append(lv.joints.reshape(H, W, C // 3, 3))
    return out
