"""Synthetic data: skeleton fixtures, procedural reference motions with
analytically planted feet, and a 2D observation model (noisy keypoints with
confidences plus a stand-in image-feature vector).

The gait generators work in the sagittal plane: legs are two-segment chains
whose bones point down (-z) in the rest pose, so hip/knee pitch about +y
solves foot placement in closed form.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .motion import (Camera, Motion, MotionFormatError, Skeleton,
                     forward_kinematics, project_points, rotation_about,
                     matrix_to_rot6d)

logger = logging.getLogger(__name__)

DATA_FORMAT_VERSION = "pgm-data/1"

SKELETON_NAMES = ("chain3", "biped9", "humanoid15")
MOTION_KINDS = ("idle", "squat", "walk")


class FrustumError(ValueError):
    """Motion leaves the camera frustum; observations are undefined."""


def make_skeleton(name: str) -> Skeleton:
    """Fixture skeletons: chain3 (abstract 3-link chain), biped9 (root,
    spine, head + two hip/knee/ankle legs) and humanoid15 (adds two
    shoulder/elbow/wrist arms off a chest joint).
    """
    if name == "chain3":
        return Skeleton(
            parents=[-1, 0, 1],
            offsets=[[0, 0, 0], [0, 0, 0.3], [0, 0, 0.3]],
            foot_joints=())
    if name == "biped9":
        return Skeleton(
            parents=[-1, 0, 1, 0, 3, 4, 0, 6, 7],
            offsets=[[0, 0, 0],
                     [0, 0, 0.25], [0, 0, 0.25],          # spine, head
                     [0, 0.10, 0], [0, 0, -0.40], [0, 0, -0.42],   # L leg
                     [0, -0.10, 0], [0, 0, -0.40], [0, 0, -0.42]], # R leg
            foot_joints=(5, 8))
    if name == "humanoid15":
        return Skeleton(
            parents=[-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13],
            offsets=[[0, 0, 0],
                     [0, 0, 0.22], [0, 0, 0.30],            # chest, head
                     [0, 0.18, 0.08], [0, 0, -0.28], [0, 0, -0.26],   # L arm
                     [0, -0.18, 0.08], [0, 0, -0.28], [0, 0, -0.26],  # R arm
                     [0, 0.10, 0], [0, 0, -0.40], [0, 0, -0.42],      # L leg
                     [0, -0.10, 0], [0, 0, -0.40], [0, 0, -0.42]],    # R leg
            foot_joints=(11, 14))
    raise ValueError(f"unknown skeleton {name!r} (have {SKELETON_NAMES})")


def leg_chains(skeleton: Skeleton) -> list[tuple[int, int, int]]:
    """(hip, knee, ankle) triples recovered from the foot joints."""
    chains = []
    for ankle in skeleton.foot_joints:
        knee = int(skeleton.parents[ankle])
        hip = int(skeleton.parents[knee])
        chains.append((hip, knee, ankle))
    return chains


def _leg_ik(d_xz: np.ndarray, len_thigh: float, len_shin: float):
    """Sagittal two-link IK.  d_xz is (..., 2): the (x, z) offset from hip to
    ankle target.  Returns (hip pitch, knee pitch) about +y such that bones
    (0,0,-L) reach the target exactly; the knee apex points forward (+x).
    """
    dx, dz = d_xz[..., 0], d_xz[..., 1]
    d = np.sqrt(dx ** 2 + dz ** 2)
    lo = abs(len_thigh - len_shin) + 1e-9
    hi = (len_thigh + len_shin) * (1.0 - 1e-9)
    if np.any(d > hi) or np.any(d < lo):
        raise ValueError(
            f"leg ik: target distance out of reach (d in [{d.min():.4f}, "
            f"{d.max():.4f}], legal [{lo:.4f}, {hi:.4f}])")
    psi_t = np.arctan2(-dx, -dz)
    cos_alpha = (len_thigh ** 2 + d ** 2 - len_shin ** 2) / (2 * len_thigh * d)
    alpha = np.arccos(np.clip(cos_alpha, -1.0, 1.0))
    cos_int = (len_thigh ** 2 + len_shin ** 2 - d ** 2) / (2 * len_thigh * len_shin)
    knee = np.pi - np.arccos(np.clip(cos_int, -1.0, 1.0))
    hip = psi_t - alpha
    return hip, knee


@dataclass
class GaitParams:
    """Per-sequence gait randomization (drawn once from the seed)."""
    step_length: float = 0.30
    gait_hz: float = 1.0
    foot_lift: float = 0.05
    root_bob: float = 0.01
    root_height: float = 0.775
    plant_height: float = 0.008
    squat_depth: float = 0.16
    squat_hz: float = 0.5
    arm_swing: float = 0.3
    # per-frame execution noise (all rms; zero = perfectly periodic motion)
    phase_jitter: float = 0.0    # cycles: gait timing wanders
    height_jitter: float = 0.0   # m: root bobs off the nominal height
    sway_jitter: float = 0.0     # m: fore-aft root sway (idle / squat)
    posture_jitter: float = 0.0  # rad: torso / arm pitch wobble
    jitter_hz: float = 1.2       # bandwidth of the wander

    @staticmethod
    def sample(kind: str, rng: np.random.Generator,
               jitter: float = 0.0) -> "GaitParams":
        p = GaitParams()
        if kind == "walk":
            p.step_length = rng.uniform(0.24, 0.34)
            p.gait_hz = rng.uniform(0.85, 1.1)
            p.foot_lift = rng.uniform(0.04, 0.07)
            p.root_bob = rng.uniform(0.005, 0.015)
            p.arm_swing = rng.uniform(0.2, 0.45)
        elif kind == "squat":
            p.squat_depth = rng.uniform(0.12, 0.20)
            p.squat_hz = rng.uniform(0.4, 0.7)
        elif kind == "idle":
            p.root_height = rng.uniform(0.765, 0.785)
        if jitter > 0:
            spread = lambda: rng.uniform(0.6, 1.4)
            p.phase_jitter = 0.030 * jitter * spread()
            p.height_jitter = 0.008 * jitter * spread()
            p.sway_jitter = 0.020 * jitter * spread()
            p.posture_jitter = 0.10 * jitter * spread()
            p.jitter_hz = rng.uniform(0.8, 1.6)
        return p


def _smoothstep(q):
    return q * q * (3.0 - 2.0 * q)


def _smooth_noise(rng: np.random.Generator, num_frames: int, fps: float,
                  hz: float, rms: float) -> np.ndarray:
    """Zero-mean wander low-passed to roughly `hz`, scaled to `rms` and
    clipped at two rms so leg IK stays within reach.  Consumes no rng draws
    when rms is zero.
    """
    if rms <= 0:
        return np.zeros(num_frames)
    width = max(int(round(fps / hz)), 2)
    white = rng.standard_normal(num_frames + width)
    win = np.hanning(width + 2)[1:-1]
    track = np.convolve(white, win / win.sum(), mode="same")[:num_frames]
    track -= track.mean()
    sd = track.std()
    if sd > 1e-12:
        track *= rms / sd
    return np.clip(track, -2 * rms, 2 * rms)


def _posture_noise(rng, p: GaitParams, skeleton: Skeleton, chains,
                   rots: np.ndarray, fps: float) -> None:
    """Independent pitch wobble on every joint outside the root and the leg
    chains (spine/head, and arms where the skeleton has them).  Leg joints
    stay exact so planted feet are untouched.
    """
    if p.posture_jitter <= 0:
        return
    leg = {j for chain in chains for j in chain}
    H = rots.shape[0]
    for j in range(skeleton.joint_count):
        if j == 0 or j in leg:
            continue
        wob = rotation_about(
            "y", _smooth_noise(rng, H, fps, p.jitter_hz, p.posture_jitter))
        rots[:, j] = rots[:, j] @ wob


def generate_motion(skeleton: Skeleton, kind: str, num_frames: int,
                    fps: float = 30.0, seed: int = 0,
                    params: GaitParams | None = None,
                    jitter: float = 0.0) -> Motion:
    """Procedural reference motion on the ground plane.

    walk: alternating-stance gait; each planted ankle holds an exact world
    position for its half cycle while the root advances.  squat: both feet
    planted, root oscillates vertically.  idle: constant standing pose.
    `jitter` scales per-frame execution noise (timing/height/posture wander)
    on top of the periodic gait; feet stay exactly planted because the legs
    are re-solved after the root is perturbed.
    """
    if kind not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {kind!r} (have {MOTION_KINDS})")
    if num_frames < 1:
        raise ValueError("generate_motion: num_frames must be >= 1")
    rng = np.random.default_rng(seed)
    p = params or GaitParams.sample(kind, rng, jitter)
    chains = leg_chains(skeleton)
    if kind in ("walk", "squat") and not chains:
        raise ValueError(f"motion kind {kind!r} needs a skeleton with legs")
    if kind == "walk" and num_frames < fps / p.gait_hz:
        raise ValueError(
            f"walk needs at least one gait cycle "
            f"({fps / p.gait_hz:.1f} frames at {p.gait_hz:.2f} Hz), got {num_frames}")

    J = skeleton.joint_count
    H = num_frames
    t = np.arange(H) / fps
    rots = np.broadcast_to(np.eye(3), (H, J, 3, 3)).copy()
    tau = np.zeros((H, 3))

    def wander(rms):
        return _smooth_noise(rng, H, fps, p.jitter_hz, rms)

    if kind == "idle":
        tau[:, 0] = wander(p.sway_jitter)
        tau[:, 2] = p.root_height + wander(p.height_jitter)
        _solve_legs(skeleton, chains, rots, tau,
                    _planted_targets(skeleton, chains, tau, p.plant_height))
        _posture_noise(rng, p, skeleton, chains, rots, fps)
        return Motion(rot6d=matrix_to_rot6d(rots), tau=tau, fps=fps)

    if kind == "squat":
        phase = 2 * np.pi * (p.squat_hz * t + wander(p.phase_jitter))
        tau[:, 0] = wander(p.sway_jitter)
        tau[:, 2] = (p.root_height - p.squat_depth * (1 - np.cos(phase)) / 2
                     + wander(p.height_jitter))
        _solve_legs(skeleton, chains, rots, tau,
                    _planted_targets(skeleton, chains, tau, p.plant_height))
        _posture_noise(rng, p, skeleton, chains, rots, fps)
        return Motion(rot6d=matrix_to_rot6d(rots), tau=tau, fps=fps)

    # walk
    S, f = p.step_length, p.gait_hz
    phase = t * f + wander(p.phase_jitter)  # cycles (continuous)
    k = np.floor(phase)
    frac = phase - k
    tau[:, 0] = 2 * S * phase
    tau[:, 2] = (p.root_height - p.root_bob * (1 - np.cos(4 * np.pi * frac)) / 2
                 + wander(p.height_jitter))

    targets = []
    for i, (hip, knee, ankle) in enumerate(chains):
        left = i == 0
        # left leg is stance for frac in [0, .5), right for [.5, 1)
        if left:
            stance = frac < 0.5
            plant_x = 2 * S * k + S / 2
            q = np.clip((frac - 0.5) / 0.5, 0.0, 1.0)
            swing_from = plant_x
        else:
            stance = frac >= 0.5
            plant_x = 2 * S * k + 3 * S / 2
            q = np.clip(frac / 0.5, 0.0, 1.0)
            swing_from = 2 * S * k - S / 2
        swing_x = swing_from + 2 * S * _smoothstep(q)
        swing_z = p.plant_height + p.foot_lift * np.sin(np.pi * q) ** 2
        fx = np.where(stance, plant_x, swing_x)
        fz = np.where(stance, p.plant_height, swing_z)
        fy = np.full(H, skeleton.offsets[hip, 1] * skeleton.beta[hip])
        targets.append(np.stack([fx, fy, fz], axis=1))
    _solve_legs(skeleton, chains, rots, tau, targets)

    # counter-phase arm swing for skeletons with arms (shoulder = a joint
    # whose bone points down and whose parent is not the root or a leg)
    arms = _arm_joints(skeleton, chains)
    for i, (shoulder, elbow) in enumerate(arms):
        sign = 1.0 if i == 0 else -1.0
        swing = p.arm_swing * np.sin(2 * np.pi * frac + (0.0 if i else np.pi))
        rots[:, shoulder] = rotation_about("y", sign * 0 + swing)
        rots[:, elbow] = rotation_about("y", np.full(H, 0.15))
    _posture_noise(rng, p, skeleton, chains, rots, fps)
    return Motion(rot6d=matrix_to_rot6d(rots), tau=tau, fps=fps)


def _planted_targets(skeleton, chains, tau, plant_height):
    """Both feet planted below their hips at the first frame's x."""
    targets = []
    for hip, knee, ankle in chains:
        fy = skeleton.offsets[hip, 1] * skeleton.beta[hip]
        tgt = np.stack([np.full(tau.shape[0], tau[0, 0]),
                        np.full(tau.shape[0], fy),
                        np.full(tau.shape[0], plant_height)], axis=1)
        targets.append(tgt)
    return targets


def _solve_legs(skeleton, chains, rots, tau, targets):
    """Fill hip/knee rotations so each ankle lands on its target exactly.
    Assumes identity root rotation and hip offsets with zero z."""
    for (hip, knee, ankle), tgt in zip(chains, targets):
        len_thigh = np.linalg.norm(skeleton.offsets[knee]) * skeleton.beta[knee]
        len_shin = np.linalg.norm(skeleton.offsets[ankle]) * skeleton.beta[ankle]
        hip_world = tau + skeleton.offsets[hip] * skeleton.beta[hip]
        d_xz = np.stack([tgt[:, 0] - hip_world[:, 0],
                         tgt[:, 2] - hip_world[:, 2]], axis=1)
        hip_pitch, knee_pitch = _leg_ik(d_xz, len_thigh, len_shin)
        rots[:, hip] = rotation_about("y", hip_pitch)
        rots[:, knee] = rotation_about("y", knee_pitch)


def _arm_joints(skeleton, chains):
    """(shoulder, elbow) pairs: down-pointing two-bone chains not in a leg."""
    leg_joints = {j for c in chains for j in c}
    arms = []
    J = skeleton.joint_count
    children = {j: [c for c in range(J) if skeleton.parents[c] == j] for j in range(J)}
    for j in range(1, J):
        if j in leg_joints or skeleton.offsets[j, 2] >= 0:
            continue
        parent = int(skeleton.parents[j])
        if parent in leg_joints or parent == 0 or skeleton.offsets[parent, 1] == 0:
            continue
        # j is an elbow-like joint hanging off a lateral (shoulder) joint
        if any(ch not in leg_joints and skeleton.offsets[ch, 2] < 0
               for ch in children[j]):
            arms.append((parent, j))
    arms.sort(key=lambda se: -skeleton.offsets[se[0], 1])  # left first
    return arms


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

@dataclass
class NoiseConfig:
    """Observation corruption model."""
    px_sigma: float = 2.0
    dropout_prob: float = 0.05
    dropout_conf: tuple[float, float] = (0.05, 0.3)
    dropout_px: tuple[float, float] = (20.0, 80.0)
    feat_sigma: float = 0.004
    feat_dim: int = 32
    feature_seed: int = 1234

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout_conf"] = list(self.dropout_conf)
        d["dropout_px"] = list(self.dropout_px)
        return d

    @staticmethod
    def from_dict(d: dict) -> "NoiseConfig":
        d = dict(d)
        d["dropout_conf"] = tuple(d.get("dropout_conf", (0.05, 0.3)))
        d["dropout_px"] = tuple(d.get("dropout_px", (20.0, 80.0)))
        return NoiseConfig(**d)


@dataclass
class Observations:
    """Per-frame 2D evidence: keypoints (H, J, 2) in pixels, detector
    confidences (H, J) in [0, 1], and feature vectors (H, feat_dim).
    """

    kp2d: np.ndarray
    conf: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.kp2d = np.asarray(self.kp2d, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.kp2d.ndim != 3 or self.kp2d.shape[2] != 2:
            raise ValueError(f"observations kp2d: expected (H, J, 2), got {self.kp2d.shape}")
        H, J = self.kp2d.shape[:2]
        if self.conf.shape != (H, J):
            raise ValueError(f"observations conf: expected ({H}, {J}), got {self.conf.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != H:
            raise ValueError(f"observations features: expected ({H}, D), got {self.features.shape}")
        if np.any(self.conf < 0) or np.any(self.conf > 1):
            raise ValueError("observations: confidences must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return int(self.kp2d.shape[0])


def feature_map(num_joints: int, feat_dim: int, seed: int) -> np.ndarray:
    """Fixed random linear map (feat_dim, 2J) standing in for an image
    feature extractor; rows scaled so outputs are O(input scale).
    """
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(2 * num_joints),
                      size=(feat_dim, 2 * num_joints))


def normalized_keypoints(camera: Camera, kp2d: np.ndarray) -> np.ndarray:
    """Pixels (..., J, 2) -> camera-plane coordinates, flattened (..., 2J)."""
    out = np.empty_like(kp2d)
    out[..., 0] = (kp2d[..., 0] - camera.cx) / camera.fx
    out[..., 1] = (kp2d[..., 1] - camera.cy) / camera.fy
    return out.reshape(*kp2d.shape[:-2], -1)


def synthesize_observations(motion: Motion, skeleton: Skeleton, camera: Camera,
                            noise: NoiseConfig, seed: int) -> Observations:
    """Project the motion and corrupt it per the noise model.

    Confidence mirrors the applied error: exp(-err_px / px_sigma) for
    surviving joints; dropped joints get a large offset and a low confidence.
    Features are a fixed linear map of the clean normalized keypoints plus
    gaussian noise.
    """
    rng = np.random.default_rng(seed)
    pos = forward_kinematics(skeleton, motion)          # (H, J, 3)
    clean = project_points(camera, pos)                 # (H, J, 2), raises behind camera
    H, J = clean.shape[:2]
    width, height = 2 * camera.cx, 2 * camera.cy
    outside = ((clean[..., 0] < 0) | (clean[..., 0] > width) |
               (clean[..., 1] < 0) | (clean[..., 1] > height))
    if np.any(outside):
        frames = sorted(set(np.argwhere(outside)[:, 0].tolist()))
        raise FrustumError(
            f"motion leaves the camera frustum at frames {frames[:10]}"
            + ("..." if len(frames) > 10 else ""))

    if noise.px_sigma > 0:
        eta = rng.normal(0.0, noise.px_sigma, size=(H, J, 2))
    else:
        eta = np.zeros((H, J, 2))
    err = np.linalg.norm(eta, axis=2)
    conf = np.exp(-err / max(noise.px_sigma, 1e-9)) if noise.px_sigma > 0 \
        else np.ones((H, J))
    kp = clean + eta

    drop = rng.random((H, J)) < noise.dropout_prob
    if np.any(drop):
        n = int(drop.sum())
        angle = rng.uniform(0, 2 * np.pi, size=n)
        radius = rng.uniform(*noise.dropout_px, size=n)
        kp[drop] = clean[drop] + radius[:, None] * np.stack(
            [np.cos(angle), np.sin(angle)], axis=1)
        conf[drop] = rng.uniform(*noise.dropout_conf, size=n)

    fmap = feature_map(J, noise.feat_dim, noise.feature_seed)
    feats = normalized_keypoints(camera, clean) @ fmap.T
    feats = feats + rng.normal(0.0, noise.feat_sigma, size=feats.shape) \
        if noise.feat_sigma > 0 else feats
    return Observations(kp2d=kp, conf=conf, features=feats)


# ---------------------------------------------------------------------------
# Dataset files: JSONL, header then one record per frame
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    skeleton: Skeleton
    camera: Camera
    noise: NoiseConfig
    fps: float
    samples: list[tuple[Motion, Observations]] = field(default_factory=list)
    seed: int = 0


def generate_dataset(skeleton: Skeleton, camera: Camera, noise: NoiseConfig,
                     kinds: list[str], num_sequences: int, num_frames: int,
                     fps: float = 30.0, seed: int = 0,
                     jitter: float = 0.0) -> Dataset:
    """num_sequences motions cycling through kinds, each with its own
    deterministic child seed for gait parameters and observation noise.
    """
    if num_sequences < 1:
        raise ValueError("generate_dataset: need at least one sequence")
    root = np.random.SeedSequence(seed)
    children = root.spawn(num_sequences)
    samples = []
    for i in range(num_sequences):
        kind = kinds[i % len(kinds)]
        seeds = children[i].generate_state(2)
        motion = generate_motion(skeleton, kind, num_frames, fps,
                                 seed=int(seeds[0]), jitter=jitter)
        obs = synthesize_observations(motion, skeleton, camera, noise,
                                      seed=int(seeds[1]))
        samples.append((motion, obs))
    return Dataset(skeleton=skeleton, camera=camera, noise=noise, fps=fps,
                   samples=samples, seed=seed)


def save_dataset(path, dataset: Dataset, extra_header: dict | None = None) -> None:
    path = Path(path)
    with path.open("w") as f:
        header = {"version": DATA_FORMAT_VERSION,
                  "skeleton": dataset.skeleton.to_dict(),
                  "camera": dataset.camera.to_dict(),
                  "noise": dataset.noise.to_dict(),
                  "fps": dataset.fps,
                  "seed": dataset.seed,
                  "num_sequences": len(dataset.samples)}
        if extra_header:
            header.update(extra_header)
        f.write(json.dumps(header) + "\n")
        for i, (motion, obs) in enumerate(dataset.samples):
            for h in range(motion.num_frames):
                rec = {"seq": i, "frame": h,
                       "rot6d": motion.rot6d[h].tolist(),
                       "tau": motion.tau[h].tolist(),
                       "kp2d": obs.kp2d[h].tolist(),
                       "conf": obs.conf[h].tolist(),
                       "feat": obs.features[h].tolist()}
                f.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as f:
        try:
            header = json.loads(f.readline())
        except json.JSONDecodeError as e:
            raise MotionFormatError(f"{path}:1: bad JSON header ({e})") from e
        version = header.get("version")
        if version != DATA_FORMAT_VERSION:
            raise MotionFormatError(
                f"{path}: unsupported dataset format {version!r} "
                f"(expected {DATA_FORMAT_VERSION!r})")
        skeleton = Skeleton.from_dict(header["skeleton"])
        camera = Camera.from_dict(header["camera"])
        noise = NoiseConfig.from_dict(header["noise"])
        fps = float(header["fps"])
        per_seq: dict[int, dict[str, list]] = {}
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                seq = int(rec["seq"])
                bucket = per_seq.setdefault(
                    seq, {"rot6d": [], "tau": [], "kp2d": [], "conf": [], "feat": []})
                for key in bucket:
                    bucket[key].append(rec[key])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise MotionFormatError(f"{path}:{lineno}: bad record ({e})") from e
    expected = header.get("num_sequences")
    if expected is not None and expected != len(per_seq):
        raise MotionFormatError(
            f"{path}: header says {expected} sequences, found {len(per_seq)}")
    samples = []
    for seq in sorted(per_seq):
        b = per_seq[seq]
        motion = Motion(rot6d=np.array(b["rot6d"]), tau=np.array(b["tau"]), fps=fps)
        obs = Observations(kp2d=np.array(b["kp2d"]), conf=np.array(b["conf"]),
                           features=np.array(b["feat"]))
        samples.append((motion, obs))
    return Dataset(skeleton=skeleton, camera=camera, noise=noise, fps=fps,
                   samples=samples, seed=int(header.get("seed", 0)))
