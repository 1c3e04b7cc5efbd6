"""Core motion types and geometry: skeletons, 6D rotations, forward
kinematics, pinhole cameras, and the motion file format (pgm-motion/1).

Conventions: world frame is z-up with the ground plane at z=0, units are
meters, and angles are radians.  All arrays are float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MOTION_FORMAT_VERSION = "pgm-motion/1"

GRAVITY = np.array([0.0, 0.0, -9.81])


class DegenerateRotationError(ValueError):
    """6D rotation input whose column vectors cannot be orthonormalized."""


class BehindCameraError(ValueError):
    """Point at or behind the camera plane where projection is undefined."""


class MotionFormatError(ValueError):
    """Malformed motion / dataset file."""


def _as_f64(x, shape=None, name="array"):
    a = np.asarray(x, dtype=np.float64)
    if shape is not None and a.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


@dataclass
class Skeleton:
    """Kinematic tree in topological order (parents[j] < j, root at 0).

    offsets[j] is the rest-pose translation of joint j in its parent's
    frame; it is scaled by beta[j] (positive, dimensionless) at FK time.
    foot_joints index the bodies that are expected to touch the ground.
    """

    parents: np.ndarray          # (J,) int, -1 for the root
    offsets: np.ndarray          # (J, 3) meters
    foot_joints: tuple[int, ...] = ()
    beta: np.ndarray = field(default=None)  # (J,) positive scales

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        J = self.parents.shape[0]
        if J < 1 or self.parents[0] != -1:
            raise ValueError("skeleton: joint 0 must be the root (parent -1)")
        for j in range(1, J):
            if not 0 <= self.parents[j] < j:
                raise ValueError(
                    f"skeleton: parents must be topologically ordered, "
                    f"got parents[{j}] = {self.parents[j]}")
        self.offsets = _as_f64(self.offsets, (J, 3), "skeleton offsets")
        if self.beta is None:
            self.beta = np.ones(J)
        self.beta = _as_f64(self.beta, (J,), "skeleton beta")
        if not np.all(self.beta > 0):
            raise ValueError("skeleton: beta must be strictly positive")
        self.foot_joints = tuple(int(j) for j in self.foot_joints)
        for j in self.foot_joints:
            if not 0 <= j < J:
                raise ValueError(f"skeleton: foot joint {j} out of range")

    @property
    def joint_count(self) -> int:
        return int(self.parents.shape[0])

    def with_beta(self, beta) -> "Skeleton":
        return Skeleton(self.parents.copy(), self.offsets.copy(),
                        self.foot_joints, _as_f64(beta, (self.joint_count,), "beta"))

    def bone_lengths(self) -> np.ndarray:
        """(J,) scaled bone lengths |offsets[j]| * beta[j] (root entry 0)."""
        return np.linalg.norm(self.offsets, axis=1) * self.beta

    def to_dict(self) -> dict:
        return {
            "parents": self.parents.tolist(),
            "offsets": self.offsets.tolist(),
            "foot_joints": list(self.foot_joints),
            "beta": self.beta.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Skeleton":
        try:
            return Skeleton(d["parents"], d["offsets"],
                            tuple(d.get("foot_joints", ())), d.get("beta"))
        except KeyError as e:
            raise MotionFormatError(f"skeleton dict missing key {e}") from e


@dataclass
class Motion:
    """Joint-rotation motion: per-frame local rotations in 6D form plus the
    root translation.  rot6d is (H, J, 6), tau is (H, 3), fps > 0.
    """

    rot6d: np.ndarray
    tau: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.rot6d = np.asarray(self.rot6d, dtype=np.float64)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.rot6d.ndim != 3 or self.rot6d.shape[2] != 6:
            raise ValueError(f"motion rot6d: expected (H, J, 6), got {self.rot6d.shape}")
        H = self.rot6d.shape[0]
        if H < 1:
            raise ValueError("motion: needs at least one frame")
        if self.tau.shape != (H, 3):
            raise ValueError(f"motion tau: expected ({H}, 3), got {self.tau.shape}")
        if not (np.isfinite(self.rot6d).all() and np.isfinite(self.tau).all()):
            raise ValueError("motion: non-finite values")
        if not self.fps > 0:
            raise ValueError("motion: fps must be positive")
        # every frame must decode to a proper rotation; raises if degenerate
        rot6d_to_matrix(self.rot6d)

    @property
    def num_frames(self) -> int:
        return int(self.rot6d.shape[0])

    @property
    def num_joints(self) -> int:
        return int(self.rot6d.shape[1])

    def rotations(self) -> np.ndarray:
        """(H, J, 3, 3) local rotation matrices."""
        return rot6d_to_matrix(self.rot6d)


@dataclass
class Camera:
    """Pinhole camera.  Extrinsics map world to camera: X_cam = rot @ X + trans,
    with camera z the viewing direction (depth) and image y pointing down.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rot: np.ndarray    # (3, 3)
    trans: np.ndarray  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("camera: focal lengths must be positive")
        self.rot = _as_f64(self.rot, (3, 3), "camera rot")
        self.trans = _as_f64(self.trans, (3,), "camera trans")
        rtr = self.rot @ self.rot.T
        if not np.allclose(rtr, np.eye(3), atol=1e-8):
            raise ValueError("camera: rot is not orthonormal")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rot": self.rot.tolist(), "trans": self.trans.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        try:
            return Camera(d["fx"], d["fy"], d["cx"], d["cy"], d["rot"], d["trans"])
        except KeyError as e:
            raise MotionFormatError(f"camera dict missing key {e}") from e


def default_camera() -> Camera:
    """Camera 3.5 m in front of the origin (world -y), looking along +y."""
    rot = np.array([[1.0, 0.0, 0.0],
                    [0.0, 0.0, -1.0],
                    [0.0, 1.0, 0.0]])
    center = np.array([0.0, -3.5, 1.0])
    return Camera(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0,
                  rot=rot, trans=-rot @ center)


# ---------------------------------------------------------------------------
# 6D rotation representation
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r6: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt the 6D representation (..., 6) into rotation matrices
    (..., 3, 3).  The two 3-vectors become the first two columns; the third
    column is their cross product, so det is +1 by construction.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ValueError(f"rot6d: last dim must be 6, got {r6.shape}")
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na <= eps):
        raise DegenerateRotationError("rot6d: first column has ~zero norm")
    c0 = a / na
    b_perp = b - np.sum(c0 * b, axis=-1, keepdims=True) * c0
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb <= eps):
        raise DegenerateRotationError("rot6d: columns are ~collinear")
    c1 = b_perp / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    """Inverse of rot6d_to_matrix for proper rotations: first two columns,
    (..., 3, 3) -> (..., 6).
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"matrix_to_rot6d: expected (..., 3, 3), got {R.shape}")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rotation_about(axis: str, angle) -> np.ndarray:
    """Elementary rotation matrix about 'x', 'y' or 'z'; angle may be an array
    (..., ) giving (..., 3, 3).
    """
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    o, z = np.ones_like(c), np.zeros_like(c)
    if axis == "x":
        rows = [[o, z, z], [z, c, -s], [z, s, c]]
    elif axis == "y":
        rows = [[c, z, s], [z, o, z], [-s, z, c]]
    elif axis == "z":
        rows = [[c, -s, z], [s, c, z], [z, z, o]]
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues: rotation vectors (..., 3) -> rotation matrices (..., 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    small = theta < 1e-12
    axis = np.where(small, 0.0, w / np.where(small, 1.0, theta))
    th = theta[..., None]
    K = _hat(axis)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) -> rotation vectors (..., 3)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    vee = np.stack([R[..., 2, 1] - R[..., 1, 2],
                    R[..., 0, 2] - R[..., 2, 0],
                    R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    sin_t = np.sin(theta)
    # generic branch; near theta=0 use the first-order expansion, near pi
    # recover the axis from the diagonal
    with np.errstate(invalid="ignore", divide="ignore"):
        w = vee * (theta / (2.0 * sin_t))[..., None]
    small = theta < 1e-7
    if np.any(small):
        w = np.where(small[..., None], 0.5 * vee, w)
    near_pi = theta > np.pi - 1e-5
    if np.any(near_pi):
        diag = np.stack([R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]], axis=-1)
        axis = np.sqrt(np.clip((diag + 1.0) / 2.0, 0.0, None))
        # fix signs from the off-diagonal sums
        axis = axis * np.stack([
            np.where(R[..., 2, 1] - R[..., 1, 2] < 0, -1.0, 1.0),
            np.where(R[..., 0, 2] - R[..., 2, 0] < 0, -1.0, 1.0),
            np.where(R[..., 1, 0] - R[..., 0, 1] < 0, -1.0, 1.0)], axis=-1)
        w = np.where(near_pi[..., None], axis * theta[..., None], w)
    return w


def _hat(v: np.ndarray) -> np.ndarray:
    """(..., 3) -> (..., 3, 3) skew-symmetric cross-product matrices."""
    z = np.zeros_like(v[..., 0])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1)], axis=-2)


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

def forward_kinematics(skeleton: Skeleton, motion: Motion,
                       frame: int | None = None) -> np.ndarray:
    """World joint positions.  frame=None gives (H, J, 3); an integer frame
    index (0-based) gives (J, 3).

    Global transform accumulates down the tree: the root joint carries the
    root rotation at translation tau; child joint positions add the parent's
    global rotation applied to the beta-scaled rest offset.
    """
    if motion.num_joints != skeleton.joint_count:
        raise ValueError(
            f"fk: motion has {motion.num_joints} joints, skeleton "
            f"{skeleton.joint_count}")
    if frame is not None:
        if not 0 <= frame < motion.num_frames:
            raise ValueError(f"fk: frame {frame} out of range [0, {motion.num_frames})")
    rots = motion.rotations()  # (H, J, 3, 3)
    if frame is not None:
        rots = rots[frame:frame + 1]
        tau = motion.tau[frame:frame + 1]
    else:
        tau = motion.tau
    pos, _ = fk_from_rotations(skeleton, rots, tau)
    return pos[0] if frame is not None else pos


def fk_from_rotations(skeleton: Skeleton, rots: np.ndarray, tau: np.ndarray):
    """FK from explicit local rotation matrices (H, J, 3, 3) and root
    translations (H, 3).  Returns (positions (H, J, 3), global rotations
    (H, J, 3, 3)).
    """
    H, J = rots.shape[0], rots.shape[1]
    pos = np.empty((H, J, 3))
    glob = np.empty((H, J, 3, 3))
    scaled = skeleton.offsets * skeleton.beta[:, None]
    pos[:, 0] = tau
    glob[:, 0] = rots[:, 0]
    for j in range(1, J):
        p = skeleton.parents[j]
        pos[:, j] = pos[:, p] + np.einsum("hab,b->ha", glob[:, p], scaled[j])
        glob[:, j] = glob[:, p] @ rots[:, j]
    return pos, glob


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_points(camera: Camera, points: np.ndarray,
                   min_depth: float = 1e-6) -> np.ndarray:
    """Project world points (..., 3) to pixels (..., 2).  Raises
    BehindCameraError when any depth <= min_depth.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ camera.rot.T + camera.trans
    depth = cam[..., 2]
    if np.any(depth <= min_depth):
        bad = np.argwhere(depth <= min_depth)
        raise BehindCameraError(
            f"projection: {bad.shape[0]} point(s) at/behind the camera "
            f"(first index {bad[0].tolist()})")
    u = camera.fx * cam[..., 0] / depth + camera.cx
    v = camera.fy * cam[..., 1] / depth + camera.cy
    return np.stack([u, v], axis=-1)


def unproject_pixel(camera: Camera, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Inverse of project_points for a known camera depth: pixel (2,) ->
    world point (3,).
    """
    if depth <= 0:
        raise ValueError("unproject: depth must be positive")
    u, v = float(pixel[0]), float(pixel[1])
    cam = np.array([(u - camera.cx) / camera.fx * depth,
                    (v - camera.cy) / camera.fy * depth,
                    depth])
    return camera.rot.T @ (cam - camera.trans)


# ---------------------------------------------------------------------------
# Motion <-> flat state vectors (used by the denoising model)
# ---------------------------------------------------------------------------

def state_dim(num_joints: int) -> int:
    return 6 * num_joints + 3


def motion_to_state(motion: Motion) -> np.ndarray:
    """(H, 6J+3): per-frame flattened 6D rotations then the root translation."""
    H = motion.num_frames
    return np.concatenate([motion.rot6d.reshape(H, -1), motion.tau], axis=1)


def state_to_motion(state: np.ndarray, num_joints: int, fps: float = 30.0) -> Motion:
    """Inverse of motion_to_state.  The 6D channels are re-orthonormalized by
    Motion's rotation decoding, so any non-degenerate state maps to a valid
    motion.
    """
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 2 or state.shape[1] != state_dim(num_joints):
        raise ValueError(
            f"state: expected (H, {state_dim(num_joints)}), got {state.shape}")
    H = state.shape[0]
    rot6d = state[:, :6 * num_joints].reshape(H, num_joints, 6)
    tau = state[:, 6 * num_joints:]
    return Motion(rot6d=rot6d, tau=tau, fps=fps)


# ---------------------------------------------------------------------------
# Motion file format: JSONL, header line then one line per frame
# ---------------------------------------------------------------------------

def save_motion(path, motion: Motion, skeleton: Skeleton,
                extra_header: dict | None = None) -> None:
    path = Path(path)
    with path.open("w") as f:
        header = {"version": MOTION_FORMAT_VERSION,
                  "skeleton": skeleton.to_dict(),
                  "fps": motion.fps,
                  "num_frames": motion.num_frames}
        if extra_header:
            header.update(extra_header)
        f.write(json.dumps(header) + "\n")
        for h in range(motion.num_frames):
            rec = {"rot6d": motion.rot6d[h].tolist(),
                   "tau": motion.tau[h].tolist()}
            f.write(json.dumps(rec) + "\n")


def load_motion(path) -> tuple[Motion, Skeleton]:
    path = Path(path)
    with path.open() as f:
        lines = f.readlines()
    if not lines:
        raise MotionFormatError(f"{path}: empty motion file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise MotionFormatError(f"{path}:1: bad JSON ({e})") from e
    version = header.get("version")
    if version != MOTION_FORMAT_VERSION:
        raise MotionFormatError(
            f"{path}: unsupported motion format {version!r} "
            f"(expected {MOTION_FORMAT_VERSION!r})")
    skeleton = Skeleton.from_dict(header["skeleton"])
    n = header.get("num_frames")
    rot6d, tau = [], []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rot6d.append(rec["rot6d"])
            tau.append(rec["tau"])
        except (json.JSONDecodeError, KeyError) as e:
            raise MotionFormatError(f"{path}:{i}: bad frame record ({e})") from e
    if n is not None and n != len(rot6d):
        raise MotionFormatError(
            f"{path}: header says {n} frames, found {len(rot6d)}")
    motion = Motion(rot6d=np.array(rot6d), tau=np.array(tau),
                    fps=float(header.get("fps", 30.0)))
    if motion.num_joints != skeleton.joint_count:
        raise MotionFormatError(f"{path}: frame joint count does not match skeleton")
    return motion, skeleton
