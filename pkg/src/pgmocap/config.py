"""Pipeline configuration: one JSON document driving data generation,
training, capture and ablation.  Parsing is strict (unknown or ill-typed
fields are reported by dotted path) and the canonical serialization has a
stable hash that output files carry for reproducibility checks.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import DenoiserSpec, DiffusionTrainConfig
from .guidance import GuidanceConfig
from .motion import Camera
from .synth import MOTION_KINDS, NoiseConfig
from .tracking import TrackerConfig
from .vae import VaeSpec, VaeTrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DataConfig:
    skeleton: str = "biped9"
    kinds: list[str] = field(default_factory=lambda: ["walk", "squat", "idle"])
    num_train_sequences: int = 24
    num_test_sequences: int = 20
    num_frames: int = 90
    fps: float = 30.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    # long lens: one pixel subtends ~1.5 mm at the subject, so keypoints
    # carry far more metric information than the pose-estimate channel
    camera_fx: float = 4000.0
    camera_fy: float = 4000.0
    camera_cx: float = 2000.0
    camera_cy: float = 2000.0
    # far enough back that a 90-frame walk (~2 m of travel) stays in frame
    camera_center: tuple[float, float, float] = (0.0, -6.0, 1.0)
    # scale of per-frame execution noise in the gaits (0 = strictly periodic)
    motion_jitter: float = 1.0
    seed: int = 0


def build_camera(d: DataConfig) -> Camera:
    """Camera at camera_center looking along world +y (image y down)."""
    rot = np.array([[1.0, 0.0, 0.0],
                    [0.0, 0.0, -1.0],
                    [0.0, 1.0, 0.0]])
    center = np.asarray(d.camera_center, dtype=np.float64)
    return Camera(fx=d.camera_fx, fy=d.camera_fy, cx=d.camera_cx,
                  cy=d.camera_cy, rot=rot, trans=-rot @ center)


@dataclass
class ScheduleConfig:
    num_steps: int = 5
    # with single-digit step counts the per-step noise must be large for the
    # terminal state to look like noise at all; tiny textbook betas would
    # leave x_T almost clean and the initialisation contrast empty
    beta_start: float = 0.05
    beta_end: float = 0.5


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    diffusion: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)


_NESTED: dict[tuple[type, str], type] = {
    (PipelineConfig, "data"): DataConfig,
    (PipelineConfig, "vae"): VaeTrainConfig,
    (PipelineConfig, "schedule"): ScheduleConfig,
    (PipelineConfig, "diffusion"): DiffusionTrainConfig,
    (PipelineConfig, "tracker"): TrackerConfig,
    (PipelineConfig, "guidance"): GuidanceConfig,
    (DataConfig, "noise"): NoiseConfig,
    (VaeTrainConfig, "spec"): VaeSpec,
    (DiffusionTrainConfig, "spec"): DenoiserSpec,
}

# fields serialized as JSON arrays but stored as tuples
_TUPLE_FIELDS = {(NoiseConfig, "dropout_conf"), (NoiseConfig, "dropout_px"),
                 (DataConfig, "camera_center")}


def _build(cls: type, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}.{key}")
        elif (cls, key) in _TUPLE_FIELDS:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "config")
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"config: cannot read {path} ({e})") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: {path} is not valid JSON ({e})") from e
    return config_from_dict(data)


def save_config(path, cfg: PipelineConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2,
                                     sort_keys=True) + "\n")


def config_hash(cfg: PipelineConfig) -> str:
    """Stable 16-hex-digit digest of the canonical JSON serialization."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def validate_config(cfg: PipelineConfig) -> None:
    """Semantic checks beyond structure; raises ConfigError naming the field."""
    d = cfg.data
    _require(d.skeleton in ("chain3", "biped9", "humanoid15"),
             "config.data.skeleton", f"unknown skeleton {d.skeleton!r}")
    _require(bool(d.kinds), "config.data.kinds", "must not be empty")
    for k in d.kinds:
        _require(k in MOTION_KINDS, "config.data.kinds",
                 f"unknown motion kind {k!r}")
    _require(d.num_train_sequences >= 1, "config.data.num_train_sequences",
             "must be >= 1")
    _require(d.num_test_sequences >= 1, "config.data.num_test_sequences",
             "must be >= 1")
    _require(d.num_frames >= 2, "config.data.num_frames", "must be >= 2")
    _require(d.fps > 0, "config.data.fps", "must be positive")
    _require(d.noise.feat_dim >= 1, "config.data.noise.feat_dim", "must be >= 1")
    _require(d.noise.px_sigma > 0, "config.data.noise.px_sigma",
             "must be positive")
    _require(0 <= d.noise.dropout_prob <= 1, "config.data.noise.dropout_prob",
             "must be in [0, 1]")
    _require(d.camera_fx > 0 and d.camera_fy > 0, "config.data.camera_fx",
             "focal lengths must be positive")
    _require(len(d.camera_center) == 3, "config.data.camera_center",
             "must be a 3-vector")

    _require(cfg.vae.epochs >= 1, "config.vae.epochs", "must be >= 1")
    _require(cfg.vae.batch_size >= 1, "config.vae.batch_size", "must be >= 1")
    _require(cfg.vae.learning_rate > 0, "config.vae.learning_rate",
             "must be positive")
    _require(cfg.vae.spec.feat_dim == d.noise.feat_dim, "config.vae.spec.feat_dim",
             f"must equal config.data.noise.feat_dim ({d.noise.feat_dim})")
    joints = {"chain3": 3, "biped9": 9, "humanoid15": 15}[d.skeleton]
    _require(cfg.vae.spec.num_joints == joints, "config.vae.spec.num_joints",
             f"must equal the {d.skeleton} joint count ({joints})")
    _require(cfg.diffusion.spec.num_joints == joints,
             "config.diffusion.spec.num_joints",
             f"must equal the {d.skeleton} joint count ({joints})")

    s = cfg.schedule
    _require(1 <= s.num_steps <= 1000, "config.schedule.num_steps",
             "must be in [1, 1000]")
    _require(0 < s.beta_start <= s.beta_end < 1, "config.schedule.beta_start",
             "need 0 < beta_start <= beta_end < 1")

    _require(cfg.diffusion.epochs >= 1, "config.diffusion.epochs", "must be >= 1")
    _require(cfg.diffusion.batch_size >= 1, "config.diffusion.batch_size",
             "must be >= 1")
    _require(cfg.diffusion.learning_rate > 0, "config.diffusion.learning_rate",
             "must be positive")
    _require(0 <= cfg.diffusion.p_phys <= 1, "config.diffusion.p_phys",
             "must be in [0, 1]")
    _require(cfg.diffusion.spec.feat_dim == d.noise.feat_dim,
             "config.diffusion.spec.feat_dim",
             f"must equal config.data.noise.feat_dim ({d.noise.feat_dim})")

    _require(cfg.tracker.sim_dt > 0, "config.tracker.sim_dt", "must be positive")
    _require(cfg.tracker.total_mass > 0, "config.tracker.total_mass",
             "must be positive")
    _require(cfg.tracker.kp >= 0 and cfg.tracker.kd >= 0, "config.tracker.kp",
             "gains must be >= 0")
    _require(0 < cfg.tracker.success_frame_fraction <= 1,
             "config.tracker.success_frame_fraction", "must be in (0, 1]")

    _require(cfg.guidance.num_steps == s.num_steps, "config.guidance.num_steps",
             f"must equal config.schedule.num_steps ({s.num_steps})")
