"""Scenario configuration files.

Grammar (one item per line, ``#`` starts a comment)::

    [section]              # or [object NAME] for an attackable object
    key = value

Values are Python literals (numbers, quoted strings, tuples/lists, True/False);
a bare identifier such as ``l_turn`` is read as a string. Keys may appear once
per section. Unknown sections or keys, wrong types, out-of-range numbers and
missing field files are reported with the offending line number.
"""

from __future__ import annotations

import ast
import hashlib
import json
import re
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .attack import AttackConfig
from .field import RigidTransform, VoxelField, euler_rotation, load_field
from .policy import ExpertConfig
from .recon import CaptureSpec, FitConfig
from .render import QuadConfig
from .rig import CameraRig
from .rollout import RolloutConfig
from .scenes import DeploymentSpec, box_object, cylinder_object
from .vehicle import DynamicsParams


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def _vec(n, kind=float):
    return ("vec", n, kind)


# section -> key -> (type, default, check)
POS = lambda v: v > 0
NONNEG = lambda v: v >= 0
SCHEMA: Dict[str, Dict[str, Tuple[Any, Any, Any]]] = {
    "run": {
        "seed": (int, 0, NONNEG),
        "seeds": (int, 5, POS),
        "jobs": (int, 1, POS),
        "out": (str, "run", None),
    },
    "scene": {
        "track": (str, "l_turn", lambda v: v in ("straight", "l_turn", "square")),
        "track_width": (float, 1.2, POS),
        "leg": (float, 3.0, POS),
        "radius": (float, 1.5, POS),
        "margin": (float, 1.4, POS),
        "resolution": (_vec(3, int), (128, 128, 16), lambda v: min(v) >= 2),
        "background": (_vec(3), (0.6, 0.75, 0.9), lambda v: all(0 <= c <= 1 for c in v)),
    },
    "capture": {
        "n_images": (int, 300, POS),
        "n_heldout": (int, 40, POS),
        "orbit_fraction": (float, 0.35, lambda v: 0 <= v <= 1),
        "seed": (int, 0, NONNEG),
        "heldout_seed": (int, 99, NONNEG),
    },
    "fit": {
        "epochs": (int, 12, NONNEG),
        "lr": (float, 0.1, POS),
        "batch_rays": (int, 1024, POS),
        "resolution": (_vec(3, int), (64, 64, 8), lambda v: min(v) >= 2),
        "n_samples": (int, 48, POS),
        "seed": (int, 0, NONNEG),
    },
    "policy": {
        "hidden": (_vec(None, int), (64, 32), lambda v: len(v) >= 1 and min(v) >= 1),
        "steering_limit": (float, 3.0, POS),
        "expert_limit": (float, 2.0, POS),
        "lookahead": (float, 0.6, POS),
        "gain": (float, 5.0, POS),
        "n_states": (int, 5000, POS),
        "lateral_std": (float, 0.2, NONNEG),
        "heading_std": (float, 0.2, NONNEG),
        "epochs": (int, 60, NONNEG),
        "lr": (float, 1e-3, POS),
        "batch_size": (int, 64, POS),
        "noise_std": (float, 0.02, NONNEG),
        "distractor_prob": (float, 1.0, lambda v: 0 <= v <= 1),
        "distractor_max": (int, 4, POS),
        "distractor_texture_prob": (float, 0.8, lambda v: 0 <= v <= 1),
        "distractor_texture_std": (float, 5.0, lambda v: v >= 0),
        "seed": (int, 0, NONNEG),
    },
    "rollout": {
        "horizon": (int, 55, POS),
        "dt": (float, 0.1, POS),
        "speed": (float, 1.5, POS),
        "model": (str, "dubins", lambda v: v in ("dubins", "ackermann")),
        "wheelbase": (float, 0.33, POS),
        "scene_samples": (int, 48, POS),
        "object_samples": (int, 24, POS),
        "image": (_vec(2, int), (32, 32), lambda v: min(v) >= 1),
        "focal": (float, 16.0, POS),
        "cam_height": (float, 0.25, POS),
        "pitch": (float, 0.35, None),
        "initial_state": (_vec(3), (0.0, 0.0, 0.0), None),
    },
    "attack": {
        "iterations": (int, 50, POS),
        "lr": (float, 0.1, POS),
        "random_std": (float, 5.0, NONNEG),
        "n_initial_poses": (int, 1, POS),
        "initial_pose_std": (float, 0.1, NONNEG),
        "init_std": (float, 0.1, NONNEG),
    },
    "retrain": {
        "epochs": (int, 30, NONNEG),
        "lr": (float, 5e-4, POS),
        "n_states": (int, 400, POS),
        "lateral_std": (float, 0.15, NONNEG),
    },
}

OBJECT_SCHEMA = {
    "field": (str, "", None),
    "kind": (str, "box", lambda v: v in ("box", "cylinder")),
    "resolution": (int, 8, lambda v: v >= 2),
    "position": (_vec(3), (0.0, 0.0, 0.24), None),
    "yaw": (float, 0.0, None),
    "scale": (float, 0.6, POS),
}

# Keys that do not change results.
NON_SEMANTIC = {("run", "out"), ("run", "jobs")}

_SECTION = re.compile(r"^\[\s*([A-Za-z_]\w*)(?:\s+([A-Za-z_][\w-]*))?\s*\]$")
_KEY = re.compile(r"^([A-Za-z_]\w*)\s*=\s*(.*)$")
_BARE = re.compile(r"^[A-Za-z_][\w.-]*$")


def _coerce(value, typ, key, line):
    def bad():
        raise ConfigError(f"{key}: expected {_type_name(typ)}, got {value!r}", line)

    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            bad()
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad()
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            bad()
        return value
    if typ is bool:
        if not isinstance(value, bool):
            bad()
        return value
    _, n, kind = typ
    if not isinstance(value, (list, tuple)) or (n is not None and len(value) != n):
        bad()
    return tuple(_coerce(v, kind, key, line) for v in value)


def _type_name(typ) -> str:
    if isinstance(typ, tuple):
        _, n, kind = typ
        return f"{'a sequence' if n is None else f'{n}-sequence'} of {kind.__name__}"
    return typ.__name__


def _literal(text: str, key: str, line: int):
    text = text.strip()
    if _BARE.match(text) and text not in ("True", "False", "None"):
        return text
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ConfigError(f"{key}: cannot parse value {text!r}", line) from None


@dataclass
class ObjectSpec:
    name: str
    field: str = ""
    kind: str = "box"
    resolution: int = 8
    position: Tuple[float, float, float] = (0.0, 0.0, 0.24)
    yaw: float = 0.0
    scale: float = 0.6

    def transform(self) -> RigidTransform:
        return RigidTransform(euler_rotation(0.0, 0.0, self.yaw), np.asarray(self.position), self.scale)

    def build(self, base_dir: Path = Path(".")) -> VoxelField:
        if self.field:
            return load_field(base_dir / self.field)
        if self.kind == "cylinder":
            return cylinder_object(self.resolution)
        return box_object(self.resolution)


@dataclass
class SceneConfig:
    sections: Dict[str, Dict[str, Any]]
    objects: List[ObjectSpec] = dc_field(default_factory=list)
    base_dir: Path = Path(".")

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.sections[section]

    def __eq__(self, other):
        return isinstance(other, SceneConfig) and self.sections == other.sections and self.objects == other.objects

    # --- module configs ---
    def deployment_spec(self) -> DeploymentSpec:
        s = self["scene"]
        return DeploymentSpec(track=s["track"], track_width=s["track_width"], leg=s["leg"], radius=s["radius"],
                              margin=s["margin"], resolution=s["resolution"])

    @property
    def background(self):
        return self["scene"]["background"]

    def capture_spec(self, heldout: bool = False) -> CaptureSpec:
        c = self["capture"]
        return CaptureSpec(orbit_fraction=c["orbit_fraction"], seed=c["heldout_seed"] if heldout else c["seed"])

    def fit_config(self) -> FitConfig:
        f = self["fit"]
        return FitConfig(epochs=f["epochs"], lr=f["lr"], batch_rays=f["batch_rays"], resolution=f["resolution"],
                         n_samples=f["n_samples"], background=self.background, seed=f["seed"])

    def expert(self) -> ExpertConfig:
        p = self["policy"]
        return ExpertConfig(p["lookahead"], p["gain"], p["expert_limit"])

    def dynamics(self) -> DynamicsParams:
        r = self["rollout"]
        return DynamicsParams(r["speed"], r["dt"], r["model"], r["wheelbase"])

    def rig(self) -> CameraRig:
        r = self["rollout"]
        return CameraRig(height=r["cam_height"], pitch=r["pitch"], focal=r["focal"], width=r["image"][0],
                         height_px=r["image"][1])

    def quad(self) -> QuadConfig:
        r = self["rollout"]
        return QuadConfig(r["scene_samples"], r["object_samples"], self.background)

    def rollout_config(self, sensor: str = "volumetric") -> RolloutConfig:
        r = self["rollout"]
        return RolloutConfig(horizon=r["horizon"], rig=self.rig(), quad=self.quad(),
                             initial_state=r["initial_state"], sensor=sensor, seed=self["run"]["seed"])

    def attack_config(self, seed: int, iterations: Optional[int] = None) -> AttackConfig:
        a = self["attack"]
        return AttackConfig(iterations=iterations or a["iterations"], lr=a["lr"], random_std=a["random_std"],
                            n_initial_poses=a["n_initial_poses"], initial_pose_std=a["initial_pose_std"],
                            init_std=a["init_std"], seed=seed)

    def seeds(self) -> List[int]:
        base = self["run"]["seed"]
        return [base + k for k in range(self["run"]["seeds"])]

    def semantic(self) -> dict:
        sec = {s: {k: v for k, v in kv.items() if (s, k) not in NON_SEMANTIC} for s, kv in self.sections.items()}
        return {"sections": sec, "objects": [vars(o) for o in self.objects]}

    def hash(self) -> str:
        blob = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def default_config() -> SceneConfig:
    return SceneConfig({s: {k: v[1] for k, v in keys.items()} for s, keys in SCHEMA.items()}, [])


def parse_scene_config(text: str, base_dir=".", check_files: bool = True) -> SceneConfig:
    cfg = default_config()
    cfg.base_dir = Path(base_dir)
    seen: Dict[str, Dict[str, int]] = {}
    obj_names: Dict[str, int] = {}
    current = None
    current_obj: Optional[ObjectSpec] = None
    field_lines: Dict[str, int] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not _in_string_comment(raw) else raw.strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            name, arg = m.group(1), m.group(2)
            if name == "object":
                if not arg:
                    raise ConfigError("object sections need a name: [object NAME]", ln)
                if arg in obj_names:
                    raise ConfigError(f"duplicate object {arg!r} (first on line {obj_names[arg]})", ln)
                obj_names[arg] = ln
                current_obj = ObjectSpec(arg)
                cfg.objects.append(current_obj)
                current = f"object {arg}"
            else:
                if arg or name not in SCHEMA:
                    raise ConfigError(f"unknown section [{line[1:-1].strip()}]", ln)
                if name in seen:
                    raise ConfigError(f"duplicate section [{name}]", ln)
                current, current_obj = name, None
            seen.setdefault(current, {})
            continue
        m = _KEY.match(line)
        if not m:
            raise ConfigError(f"expected 'key = value' or a [section] header, got {line!r}", ln)
        if current is None:
            raise ConfigError("key outside of any section", ln)
        key, text_val = m.group(1), m.group(2)
        schema = OBJECT_SCHEMA if current_obj is not None else SCHEMA[current]
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{current}]", ln)
        if key in seen[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}] (first on line {seen[current][key]})", ln)
        seen[current][key] = ln
        typ, _, check = schema[key]
        val = _coerce(_literal(text_val, key, ln), typ, f"{current}.{key}", ln)
        if check is not None and not check(val):
            raise ConfigError(f"{current}.{key}: value {val!r} out of range", ln)
        if current_obj is not None:
            setattr(current_obj, key, val)
            if key == "field":
                field_lines[current_obj.name] = ln
        else:
            cfg.sections[current][key] = val
    if check_files:
        for obj in cfg.objects:
            if obj.field and not (cfg.base_dir / obj.field).is_file():
                raise ConfigError(f"object {obj.name}: field file {obj.field!r} not found", field_lines.get(obj.name))
    return cfg


def _in_string_comment(raw: str) -> bool:
    # A '#' inside a quoted string is not a comment.
    hash_pos = raw.find("#")
    if hash_pos < 0:
        return False
    before = raw[:hash_pos]
    return before.count('"') % 2 == 1 or before.count("'") % 2 == 1


def dump_config(cfg: SceneConfig) -> str:
    out = []
    for sec, keys in cfg.sections.items():
        out.append(f"[{sec}]")
        for k, v in keys.items():
            out.append(f"{k} = {_fmt(v)}")
        out.append("")
    for obj in cfg.objects:
        out.append(f"[object {obj.name}]")
        for k in OBJECT_SCHEMA:
            out.append(f"{k} = {_fmt(getattr(obj, k))}")
        out.append("")
    return "\n".join(out)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return "(" + ", ".join(_fmt(x) for x in v) + ("," if len(v) == 1 else "") + ")"
    return repr(v)


def load_scene_config(path, check_files: bool = True) -> SceneConfig:
    p = Path(path)
    return parse_scene_config(p.read_text(encoding="utf-8"), p.parent, check_files)
