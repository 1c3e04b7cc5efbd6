"""Simulated character tracking of reference motions.

Desk-scale dynamics: each joint is a 3-DoF rotational body with a scalar
inertia driven by PD torques toward the reference pose; the root translates
as a point mass under gravity, a bounded residual PD force, and penalty
ground contact (spring-damper normal force, Coulomb-clamped friction) at the
feet and root.  Contact forces act on the root's linear dynamics; torque
coupling from contacts to joints is deliberately out of scope.

Root translation uses the average-velocity position update (exact for
constant acceleration, which keeps ballistic flight at machine precision);
rotations integrate semi-implicitly on SO(3).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .motion import (GRAVITY, Motion, Skeleton, fk_from_rotations,
                     matrix_to_rot6d, so3_exp, so3_log)

logger = logging.getLogger(__name__)


class SimulationBlowupError(RuntimeError):
    """Simulation state left the trusted numeric range."""

    def __init__(self, msg: str, frame: int | None = None):
        super().__init__(msg)
        self.frame = frame


@dataclass
class TrackerConfig:
    kp: float = 300.0
    kd: float = 30.0
    kp_root: float = 1000.0
    kd_root: float = 100.0
    residual_force_limit: float = 200.0
    torque_limit: float = 150.0
    sim_dt: float = 1.0 / 300.0
    total_mass: float = 70.0
    root_link_length: float = 0.3        # nominal root "bone" for mass share
    gyration_radius: float = 0.15
    inertia_floor: float = 0.02
    joint_damping: float = 0.5
    joint_angle_limit: float = 2.6
    contact_stiffness: float = 8.0e4
    contact_damping: float = 2.3e3
    friction_mu: float = 0.9
    friction_damping: float = 2.0e3
    foot_radius: float = 0.012
    root_radius: float = 0.10
    fail_root_height: float = 0.30
    fail_joint_angle: float = 1.0
    blowup_position: float = 1.0e3
    blowup_velocity: float = 1.0e4
    success_frame_fraction: float = 0.95


@dataclass
class Character:
    """Simulatable body: skeleton with shape applied plus mass/inertia,
    limits, contact bodies, and ground parameters.
    """

    skeleton: Skeleton
    masses: np.ndarray            # (J,) link masses, kg
    inertias: np.ndarray          # (J,) scalar joint inertias, kg m^2
    total_mass: float
    contact_bodies: tuple[int, ...]
    contact_radii: np.ndarray     # (C,)
    torque_limit: float
    joint_angle_limit: float
    ground_stiffness: float
    ground_damping: float
    friction_mu: float
    friction_damping: float

    @property
    def joint_count(self) -> int:
        return self.skeleton.joint_count


def build_character(skeleton: Skeleton, beta: np.ndarray | None = None,
                    config: TrackerConfig | None = None) -> Character:
    """Distribute mass along scaled bone lengths (root gets a nominal torso
    share), normalize to total_mass * mean(beta), and set scalar joint
    inertias from subtree masses at a fixed gyration radius.
    """
    cfg = config or TrackerConfig()
    if beta is not None:
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape != (skeleton.joint_count,):
            raise ValueError(
                f"build_character: beta shape {beta.shape} != ({skeleton.joint_count},)")
        if not np.all(beta > 0):
            raise ValueError("build_character: beta must be strictly positive")
        skeleton = skeleton.with_beta(beta)
    J = skeleton.joint_count
    lengths = skeleton.bone_lengths()
    lengths = lengths.copy()
    lengths[0] = cfg.root_link_length
    total = cfg.total_mass * float(skeleton.beta.mean())
    masses = lengths / lengths.sum() * total

    subtree = masses.copy()
    for j in range(J - 1, 0, -1):            # children come after parents
        subtree[skeleton.parents[j]] += subtree[j]
    inertias = np.maximum(subtree * cfg.gyration_radius ** 2, cfg.inertia_floor)

    contact_bodies = tuple(skeleton.foot_joints) + (0,)
    radii = np.array([cfg.foot_radius] * len(skeleton.foot_joints) + [cfg.root_radius])
    return Character(skeleton=skeleton, masses=masses, inertias=inertias,
                     total_mass=total, contact_bodies=contact_bodies,
                     contact_radii=radii, torque_limit=cfg.torque_limit,
                     joint_angle_limit=cfg.joint_angle_limit,
                     ground_stiffness=cfg.contact_stiffness,
                     ground_damping=cfg.contact_damping,
                     friction_mu=cfg.friction_mu,
                     friction_damping=cfg.friction_damping)


@dataclass
class SimState:
    """Generalized coordinates and velocities plus contact bookkeeping."""

    rot: np.ndarray               # (J, 3, 3) local rotations (index 0 = root)
    omega: np.ndarray             # (J, 3) local angular velocities
    root_pos: np.ndarray          # (3,)
    root_vel: np.ndarray          # (3,)
    contact: np.ndarray           # (C,) bool
    contact_pos: np.ndarray       # (C, 3) world positions of contact bodies
    contact_normal: np.ndarray | None = None  # (C,) normal force of last step, N

    def copy(self) -> "SimState":
        return SimState(self.rot.copy(), self.omega.copy(),
                        self.root_pos.copy(), self.root_vel.copy(),
                        self.contact.copy(), self.contact_pos.copy(),
                        None if self.contact_normal is None
                        else self.contact_normal.copy())


@dataclass
class Action:
    torques: np.ndarray           # (J, 3) local joint torques
    root_force: np.ndarray        # (3,) residual force on the root

    @staticmethod
    def zero(num_joints: int) -> "Action":
        return Action(np.zeros((num_joints, 3)), np.zeros(3))


def init_state(character: Character, rot: np.ndarray, root_pos: np.ndarray) -> SimState:
    rot = np.asarray(rot, dtype=np.float64)
    root_pos = np.asarray(root_pos, dtype=np.float64)
    J = character.joint_count
    if rot.shape != (J, 3, 3):
        raise ValueError(f"init_state: rot shape {rot.shape} != ({J}, 3, 3)")
    pos = _contact_positions(character, rot, root_pos)
    return SimState(rot=rot.copy(), omega=np.zeros((J, 3)),
                    root_pos=root_pos.copy(), root_vel=np.zeros(3),
                    contact=np.zeros(len(character.contact_bodies), dtype=bool),
                    contact_pos=pos)


def _contact_positions(character: Character, rot: np.ndarray,
                       root_pos: np.ndarray) -> np.ndarray:
    pos, _ = fk_from_rotations(character.skeleton, rot[None], root_pos[None])
    return pos[0][list(character.contact_bodies)]


def pd_policy(state: SimState, ref_rot: np.ndarray, ref_tau: np.ndarray,
              character: Character, config: TrackerConfig) -> Action:
    """PD toward the reference pose: joint torques from the rotation log-map
    error, and a clamped residual force pulling the root to its reference.
    """
    err = so3_log(np.swapaxes(state.rot, -1, -2) @ ref_rot)     # (J, 3) local
    torques = config.kp * err - config.kd * state.omega
    mag = np.linalg.norm(torques, axis=1, keepdims=True)
    over = mag > character.torque_limit
    if np.any(over):
        torques = np.where(over, torques * (character.torque_limit / np.maximum(mag, 1e-12)),
                           torques)
    root_force = config.kp_root * (ref_tau - state.root_pos) \
        - config.kd_root * state.root_vel
    fmag = np.linalg.norm(root_force)
    if fmag > config.residual_force_limit:
        root_force = root_force * (config.residual_force_limit / fmag)
    return Action(torques=torques, root_force=root_force)


def step_sim(state: SimState, action: Action, character: Character,
             config: TrackerConfig, dt: float | None = None) -> SimState:
    """Advance one simulation substep.

    Contact forces are evaluated at the entry configuration with
    finite-difference contact-point velocities, then rotations integrate
    semi-implicitly and the root integrates with the average-velocity
    position update.
    """
    dt = config.sim_dt if dt is None else dt
    J = character.joint_count

    contact_pos = _contact_positions(character, state.rot, state.root_pos)
    contact_vel = (contact_pos - state.contact_pos) / dt
    depth = character.contact_radii - contact_pos[:, 2]
    touching = depth > 0.0
    force = np.zeros(3)
    normals = np.zeros(len(touching))
    for c in np.nonzero(touching)[0]:
        normal = character.ground_stiffness * depth[c] \
            - character.ground_damping * contact_vel[c, 2]
        normal = max(normal, 0.0)                       # no ground adhesion
        tangential = -character.friction_damping * contact_vel[c, :2]
        tmag = np.linalg.norm(tangential)
        tmax = character.friction_mu * normal
        if tmag > tmax:
            tangential = tangential * (tmax / max(tmag, 1e-12))
        normals[c] = normal
        force[2] += normal
        force[:2] += tangential

    # rotational dynamics (local frames, scalar inertias)
    torque = action.torques - config.joint_damping * state.omega
    omega = state.omega + dt * torque / character.inertias[:, None]
    rot = state.rot @ so3_exp(omega * dt)

    # joint angle limits (root orientation is unlimited)
    w = so3_log(rot[1:])
    angles = np.linalg.norm(w, axis=1)
    over = angles > character.joint_angle_limit
    if np.any(over):
        idx = np.nonzero(over)[0] + 1
        axis = w[over] / angles[over][:, None]
        rot[idx] = so3_exp(axis * character.joint_angle_limit)
        # remove outward spin so the limit does not pump energy
        out = np.sum(omega[idx] * axis, axis=1)
        omega[idx] -= np.maximum(out, 0.0)[:, None] * axis

    # root translation: gravity + residual + contact, exact for constant a
    accel = GRAVITY + (action.root_force + force) / character.total_mass
    root_vel = state.root_vel + dt * accel
    root_pos = state.root_pos + 0.5 * dt * (state.root_vel + root_vel)

    if (not np.isfinite(root_pos).all() or not np.isfinite(omega).all()
            or np.linalg.norm(root_pos) > config.blowup_position
            or np.linalg.norm(root_vel) > config.blowup_velocity
            or np.abs(omega).max() > config.blowup_velocity):
        raise SimulationBlowupError("simulation state out of range")

    return SimState(rot=rot, omega=omega, root_pos=root_pos, root_vel=root_vel,
                    contact=touching, contact_pos=contact_pos,
                    contact_normal=normals)


def mechanical_energy(state: SimState, character: Character) -> float:
    """Kinetic (linear + rotational) plus gravitational potential energy."""
    ke_lin = 0.5 * character.total_mass * float(state.root_vel @ state.root_vel)
    ke_rot = 0.5 * float(np.sum(character.inertias * np.sum(state.omega ** 2, axis=1)))
    pe = character.total_mass * 9.81 * float(state.root_pos[2])
    return ke_lin + ke_rot + pe


@dataclass
class TrackResult:
    """Tracked (simulated) motion with per-frame success and deviations."""

    motion: Motion
    success: np.ndarray           # (H,) bool, sticky once False
    root_dev: np.ndarray          # (H,) |sim root height - ref| in m
    joint_dev: np.ndarray         # (H,) mean joint angle error in rad
    contact_fraction: np.ndarray  # (H,) fraction of contact bodies touching

    @property
    def frame_success_fraction(self) -> float:
        return float(self.success.mean())


def track(character: Character, reference: Motion,
          config: TrackerConfig | None = None) -> TrackResult:
    """Simulate the character PD-tracking the reference motion.

    The target pose is the current control frame's reference; PD torques are
    recomputed every substep against it.  A frame fails when the root height
    error or mean joint-angle error crosses the failure thresholds; failure
    is sticky.  Numeric blowup raises SimulationBlowupError with the frame.
    """
    cfg = config or TrackerConfig()
    if reference.num_joints != character.joint_count:
        raise ValueError(
            f"track: reference has {reference.num_joints} joints, character "
            f"{character.joint_count}")
    H = reference.num_frames
    ref_rots = reference.rotations()
    substeps = max(1, round(1.0 / (reference.fps * cfg.sim_dt)))

    state = init_state(character, ref_rots[0], reference.tau[0])
    J = character.joint_count
    out_rot = np.empty((H, J, 3, 3))
    out_tau = np.empty((H, 3))
    out_rot[0] = state.rot
    out_tau[0] = state.root_pos
    success = np.ones(H, dtype=bool)
    root_dev = np.zeros(H)
    joint_dev = np.zeros(H)
    contact_frac = np.zeros(H)
    contact_frac[0] = float(state.contact.mean()) if state.contact.size else 0.0

    alive = True
    for h in range(1, H):
        try:
            for _ in range(substeps):
                action = pd_policy(state, ref_rots[h], reference.tau[h],
                                   character, cfg)
                state = step_sim(state, action, character, cfg)
        except SimulationBlowupError as e:
            raise SimulationBlowupError(str(e), frame=h) from None
        out_rot[h] = state.rot
        out_tau[h] = state.root_pos
        root_dev[h] = abs(state.root_pos[2] - reference.tau[h, 2])
        err = so3_log(np.swapaxes(state.rot, -1, -2) @ ref_rots[h])
        joint_dev[h] = float(np.linalg.norm(err, axis=1).mean())
        contact_frac[h] = float(state.contact.mean()) if state.contact.size else 0.0
        if alive and (root_dev[h] > cfg.fail_root_height
                      or joint_dev[h] > cfg.fail_joint_angle):
            alive = False
        success[h] = alive

    tracked = Motion(rot6d=matrix_to_rot6d(out_rot), tau=out_tau,
                     fps=reference.fps)
    return TrackResult(motion=tracked, success=success, root_dev=root_dev,
                       joint_dev=joint_dev, contact_fraction=contact_frac)


def success_rate(results: list[TrackResult],
                 config: TrackerConfig | None = None) -> float:
    """Fraction of sequences whose per-frame success fraction meets the
    threshold (default 95%)."""
    cfg = config or TrackerConfig()
    if not results:
        raise ValueError("success_rate: empty result list")
    ok = [r.frame_success_fraction >= cfg.success_frame_fraction for r in results]
    return float(np.mean(ok))
