"""Per-LOD training schedules with bracketed hyperparameters.

A schedule file is TOML: a ``[scene]`` table followed by one ``[[lod]]``
table per level of detail, coarsest first. A key missing from a ``[[lod]]``
table keeps the value of the previous level. Values written as lists are
brackets, linearly interpolated over the level's iterations (more than two
entries split the iterations into equal segments).
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

WARMUP_ITERS = 50
LAMBDA_PHOTO = 40.0

_LOD_KEYS = ("lr_voxels", "lr_mlp", "lambda_eik", "lambda_sdf", "lambda_features",
             "lambda_normal", "lambda_probes", "lambda_photo", "images_per_batch",
             "iterations", "sh_order", "image_divisor", "tau", "decode_eps")


def bracket_value(bracket, it: int, n: int) -> float:
    """Value of a bracket at iteration ``it`` of ``n``."""
    if np.isscalar(bracket):
        return float(bracket)
    b = [float(x) for x in bracket]
    if len(b) == 1 or n <= 1:
        return b[0]
    x = it / (n - 1) * (len(b) - 1)
    i = min(int(np.floor(x)), len(b) - 2)
    f = x - i
    return b[i] + (b[i + 1] - b[i]) * f


def warmup_scale(it: int, warmup: int = WARMUP_ITERS) -> float:
    return min(1.0, it / warmup) if warmup > 0 else 1.0


@dataclass
class LodConfig:
    lr_voxels: object = (0.025, 0.01)
    lr_mlp: object = 0.01
    lambda_eik: object = 0.1
    lambda_sdf: object = 0.2
    lambda_features: object = 0.05
    lambda_normal: object = 0.05
    lambda_probes: object = 0.2
    lambda_photo: float = LAMBDA_PHOTO
    images_per_batch: int = 4
    iterations: int = 100
    sh_order: int = 2
    image_divisor: int = 1
    # start/end sharpness in units of 1/voxel_size, grown geometrically
    tau: object = (30.0, 3000.0)
    decode_eps: float = 1e-8
    name: str = ""

    def hyper(self, it: int) -> dict:
        """Interpolated hyperparameters at iteration ``it`` (warm-up applied to lrs)."""
        n = self.iterations
        w = warmup_scale(it)
        return {
            "lr_voxels": w * bracket_value(self.lr_voxels, it, n),
            "lr_mlp": w * bracket_value(self.lr_mlp, it, n),
            "lambda_eik": bracket_value(self.lambda_eik, it, n),
            "lambda_sdf": bracket_value(self.lambda_sdf, it, n),
            "lambda_features": bracket_value(self.lambda_features, it, n),
            "lambda_normal": bracket_value(self.lambda_normal, it, n),
            "lambda_probes": bracket_value(self.lambda_probes, it, n),
            "lambda_photo": float(self.lambda_photo),
            "tau_voxels": self.tau_at(it),
        }

    def tau_at(self, it: int) -> float:
        if np.isscalar(self.tau):
            return float(self.tau)
        a, b = float(self.tau[0]), float(self.tau[-1])
        n = self.iterations
        f = it / (n - 1) if n > 1 else 0.0
        return a * (b / a) ** f


@dataclass
class SceneConfig:
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    extent: float = 2.0
    resolution: int = 16
    init: str = "visual_hull"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    n_s: int = 4
    n_a: int = 4
    band: float = 6.0
    camera_bias: bool = False
    dtype: str = "float32"


@dataclass
class TrainSchedule:
    scene: SceneConfig = field(default_factory=SceneConfig)
    lods: list = field(default_factory=list)

    @property
    def final_resolution(self) -> int:
        return self.scene.resolution * 2 ** max(len(self.lods) - 1, 0)

    @property
    def total_iterations(self) -> int:
        return sum(l.iterations for l in self.lods)

    def with_iterations(self, n: int) -> "TrainSchedule":
        return replace(self, lods=[replace(l, iterations=n) for l in self.lods])


def schedule_from_dict(d: dict) -> TrainSchedule:
    scene_keys = {f.name for f in fields(SceneConfig)}
    scene_d = d.get("scene", {})
    unknown = set(scene_d) - scene_keys
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    scene = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in scene_d.items()})
    lods = []
    prev = LodConfig()
    for i, ld in enumerate(d.get("lod", [])):
        unknown = set(ld) - set(_LOD_KEYS) - {"name"}
        if unknown:
            raise ValueError(f"unknown keys in lod {i}: {sorted(unknown)}")
        vals = {k: (tuple(v) if isinstance(v, list) else v) for k, v in ld.items()}
        vals.setdefault("name", f"LOD {len(d['lod']) - 1 - i}")
        cur = replace(prev, **vals)
        lods.append(cur)
        prev = cur
    if not lods:
        raise ValueError("schedule has no [[lod]] tables")
    return TrainSchedule(scene, lods)


def load_schedule(path) -> TrainSchedule:
    with open(path, "rb") as fh:
        return schedule_from_dict(tomllib.load(fh))


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v + '"'
    return repr(v)


def dump_schedule(s: TrainSchedule) -> str:
    lines = ["[scene]"]
    for f in fields(SceneConfig):
        lines.append(f"{f.name} = {_fmt(getattr(s.scene, f.name))}")
    for lod in s.lods:
        lines += ["", "[[lod]]"]
        for f in fields(LodConfig):
            lines.append(f"{f.name} = {_fmt(getattr(lod, f.name))}")
    return "\n".join(lines) + "\n"
