"""Sequence VAE mapping per-frame observation features to gaussian latent
distributions, decoded to joint rotations, root translation and a pooled
body-shape estimate.

The encoder is a forward recurrence (a frame's distribution depends on the
past), heads are per-frame affine maps, and sigma comes from a log-sigma
head hard-clamped to [-6, 2] before exponentiation.  Training minimizes
reconstruction in rotation space, shape space, 3D joint space (through FK)
and image space (confidence-weighted reprojection), plus a KL pull toward
the standard normal.  After training the encoder is frozen: downstream
stages only ever read from it.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .motion import Camera, Motion, Skeleton, forward_kinematics, motion_to_state, state_dim, state_to_motion
from .synth import Dataset

logger = logging.getLogger(__name__)

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 2.0


@dataclass
class VaeSpec:
    feat_dim: int = 32
    latent_dim: int = 32
    enc_hidden: int = 64
    dec_hidden: int = 96
    beta_hidden: int = 32
    num_joints: int = 9

    @property
    def state_dim(self) -> int:
        return state_dim(self.num_joints)

    def gru(self) -> nn.GRUSpec:
        return nn.GRUSpec(self.feat_dim, self.enc_hidden, prefix="enc.gru")

    def mu_head(self) -> nn.MLPSpec:
        return nn.MLPSpec((self.enc_hidden, self.latent_dim), prefix="enc.mu")

    def log_sigma_head(self) -> nn.MLPSpec:
        return nn.MLPSpec((self.enc_hidden, self.latent_dim), prefix="enc.logsig")

    def decoder(self) -> nn.MLPSpec:
        return nn.MLPSpec((self.latent_dim, self.dec_hidden, self.state_dim),
                          prefix="dec.state")

    def beta_head(self) -> nn.MLPSpec:
        return nn.MLPSpec((self.latent_dim, self.beta_hidden, self.num_joints),
                          prefix="dec.beta")


@dataclass
class LatentGaussianSeq:
    """Per-frame diagonal gaussians in latent space: mu, sigma are (H, D)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 2:
            raise ValueError(
                f"latent seq: mu {self.mu.shape} vs sigma {self.sigma.shape}")
        lo, hi = np.exp(LOG_SIGMA_MIN) * (1 - 1e-9), np.exp(LOG_SIGMA_MAX) * (1 + 1e-9)
        if np.any(self.sigma < lo) or np.any(self.sigma > hi):
            raise ValueError("latent seq: sigma outside the clamped range")

    @property
    def num_frames(self) -> int:
        return int(self.mu.shape[0])


class VaeModel:
    def __init__(self, spec: VaeSpec, store: nn.ParamStore):
        self.spec = spec
        self.store = store

    @staticmethod
    def init(spec: VaeSpec, seed: int) -> "VaeModel":
        rng = np.random.default_rng(seed)
        store = nn.ParamStore()
        nn.init_gru(store, spec.gru(), rng)
        for head in (spec.mu_head(), spec.log_sigma_head(),
                     spec.decoder(), spec.beta_head()):
            nn.init_mlp(store, head, rng)
        return VaeModel(spec, store)

    def expected_shapes(self) -> dict[str, tuple]:
        return {name: t.data.shape for name, t in self.store.params.items()}


# -- graph-building forward passes (batch-first: (B, H, ...)) ---------------

def encode_t(model: VaeModel, feats: Tensor) -> tuple[Tensor, Tensor]:
    """feats (B, H, feat_dim) -> (mu, log_sigma), each (B, H, latent_dim)."""
    hs = nn.seq_encode(model.store, model.spec.gru(), feats)
    mu = nn.mlp_forward(model.store, model.spec.mu_head(), hs)
    log_sigma = ad.clip(
        nn.mlp_forward(model.store, model.spec.log_sigma_head(), hs),
        LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return mu, log_sigma


def decode_t(model: VaeModel, z: Tensor) -> tuple[Tensor, Tensor]:
    """z (B, H, latent_dim) -> (state (B, H, state_dim), beta (B, J) > 0)."""
    state = nn.mlp_forward(model.store, model.spec.decoder(), z)
    pooled = ad.reduce_mean(z, axis=1)
    beta = ad.exp(nn.mlp_forward(model.store, model.spec.beta_head(), pooled))
    return state, beta


# -- numpy-facing inference ---------------------------------------------------

def encode(model: VaeModel, features: np.ndarray) -> LatentGaussianSeq:
    """features (H, feat_dim) -> per-frame latent gaussians."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != model.spec.feat_dim:
        raise ValueError(
            f"encode: features shape {feats.shape}, expected (H, {model.spec.feat_dim})")
    mu, log_sigma = encode_t(model, Tensor(feats[None]))
    return LatentGaussianSeq(mu=mu.data[0], sigma=np.exp(log_sigma.data[0]))


def reparam_sample(dists: LatentGaussianSeq, rng: np.random.Generator) -> np.ndarray:
    return dists.mu + dists.sigma * rng.standard_normal(dists.mu.shape)


def decode(model: VaeModel, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """z (H, latent_dim) -> (state (H, state_dim), beta (J,))."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.spec.latent_dim:
        raise ValueError(f"decode: z shape {z.shape}, expected (H, {model.spec.latent_dim})")
    state, beta = decode_t(model, Tensor(z[None]))
    return state.data[0], beta.data[0]


def decode_motion(model: VaeModel, z: np.ndarray, fps: float = 30.0
                  ) -> tuple[Motion, np.ndarray]:
    state, beta = decode(model, z)
    return state_to_motion(state, model.spec.num_joints, fps), beta


def state_noise_params(model: VaeModel, dists: LatentGaussianSeq,
                       rng: np.random.Generator, draws: int = 16,
                       floor: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Motion-space noise parameters implied by the latent distributions:
    the mean is the decoded latent mean; the per-channel spread is the
    empirical std over decoded reparameterized draws, floored away from 0.
    """
    mean_state, _ = decode(model, dists.mu)
    H = dists.num_frames
    eps = rng.standard_normal((draws, H, dists.mu.shape[1]))
    zs = dists.mu[None] + dists.sigma[None] * eps
    states, _ = decode_t(model, Tensor(zs))
    spread = states.data.std(axis=0)
    return mean_state, np.maximum(spread, floor)


# -- differentiable kinematics/projection used by the losses -----------------

def fk_t(skeleton: Skeleton, rotmats: Tensor, tau: Tensor,
         beta: Tensor | None = None) -> Tensor:
    """Tape FK: rotmats (B, H, J, 3, 3), tau (B, H, 3), beta (B, J) or None
    -> world joint positions (B, H, J, 3).  Mirrors motion.fk_from_rotations.
    """
    B, H, J = rotmats.shape[0], rotmats.shape[1], rotmats.shape[2]
    pos = [None] * J
    glob = [None] * J
    pos[0] = tau
    glob[0] = rotmats[:, :, 0]
    for j in range(1, J):
        p = int(skeleton.parents[j])
        off = Tensor(skeleton.offsets[j])                      # (3,)
        if beta is not None:
            scaled = ad.mul(off, ad.reshape(beta[:, j], (B, 1, 1)))   # (B,1,3)
        else:
            scaled = ad.mul(off, float(skeleton.beta[j]))
            scaled = ad.reshape(scaled, (1, 1, 3))
        disp = ad.matmul(glob[p], ad.reshape(scaled, (-1, 1, 3, 1)))  # (B,H,3,1)
        pos[j] = ad.add(pos[p], disp[:, :, :, 0])
        glob[j] = ad.matmul(glob[p], rotmats[:, :, j])
    return ad.stack(pos, axis=2)


def project_t(camera: Camera, points: Tensor, min_depth: float = 1e-2) -> Tensor:
    """Tape pinhole projection: (B, H, J, 3) -> (B, H, J, 2).  Depth is
    clamped (gradient-blocked) below min_depth so early training cannot
    divide by ~0; the numpy projection used for data raises instead.
    """
    cam = ad.add(ad.matmul(points, Tensor(camera.rot.T)), Tensor(camera.trans))
    depth = ad.clip(cam[..., 2], min_depth, np.inf)
    u = ad.add(ad.mul(ad.div(cam[..., 0], depth), camera.fx), camera.cx)
    v = ad.add(ad.mul(ad.div(cam[..., 1], depth), camera.fy), camera.cy)
    return ad.stack([u, v], axis=-1)


def motion_losses(skeleton: Skeleton, camera: Camera,
                  state_pred: Tensor, beta_pred: Tensor | None,
                  gt_state: np.ndarray, gt_beta: np.ndarray,
                  gt_joints: np.ndarray, kp2d: np.ndarray, conf: np.ndarray
                  ) -> dict[str, Tensor]:
    """Shared reconstruction losses, each averaged over the batch dim:

    motion: sum over frames/channels of squared state error.
    shape:  squared error of the pooled body-shape vector (0 if no head).
    joint:  sum over frames/joints of squared 3D error through FK.
    reproj: per-frame mean of confidence-weighted squared pixel error.
    """
    B, H = state_pred.shape[0], state_pred.shape[1]
    J = gt_joints.shape[2]
    l_motion = ad.mul(ad.sum_squares(ad.add(state_pred, -gt_state)), 1.0 / B)

    if beta_pred is not None:
        l_shape = ad.mul(ad.sum_squares(ad.add(beta_pred, -gt_beta)), 1.0 / B)
    else:
        l_shape = Tensor(0.0)

    rot6d = ad.reshape(state_pred[:, :, :6 * J], (B, H, J, 6))
    tau = state_pred[:, :, 6 * J:]
    rotmats = ad.rot6d_to_matrix_t(rot6d)
    joints = fk_t(skeleton, rotmats, tau, beta_pred)
    l_joint = ad.mul(ad.sum_squares(ad.add(joints, -gt_joints)), 1.0 / B)

    px = project_t(camera, joints)
    sq = ad.reduce_sum(ad.square(ad.add(px, -kp2d)), axis=-1)   # (B, H, J)
    l_reproj = ad.mul(ad.reduce_sum(ad.mul(sq, conf)), 1.0 / (B * H))
    return {"motion": l_motion, "shape": l_shape,
            "joint": l_joint, "reproj": l_reproj}


# -- training -----------------------------------------------------------------

@dataclass
class VaeTrainConfig:
    spec: VaeSpec = field(default_factory=VaeSpec)
    epochs: int = 300
    batch_size: int = 6
    learning_rate: float = 3e-3
    w_motion: float = 1.0
    w_shape: float = 1.0
    w_joint: float = 1.0
    w_reproj: float = 1e-4
    w_kl: float = 1e-3
    seed: int = 0


def vae_loss(model: VaeModel, skeleton: Skeleton, camera: Camera,
             feats: np.ndarray, gt_state: np.ndarray, gt_beta: np.ndarray,
             gt_joints: np.ndarray, kp2d: np.ndarray, conf: np.ndarray,
             cfg: VaeTrainConfig, rng: np.random.Generator
             ) -> tuple[Tensor, dict[str, float]]:
    """Weighted training loss over a batch (all arrays batch-first)."""
    mu, log_sigma = encode_t(model, Tensor(feats))
    sigma = ad.exp(log_sigma)
    eps = rng.standard_normal(mu.shape)
    z = ad.add(mu, ad.mul(sigma, eps))
    state_pred, beta_pred = decode_t(model, z)
    parts = motion_losses(skeleton, camera, state_pred, beta_pred,
                          gt_state, gt_beta, gt_joints, kp2d, conf)
    B = feats.shape[0]
    kl = ad.mul(ad.reduce_sum(ad.mul(ad.add(ad.add(ad.square(mu), ad.square(sigma)),
                                            ad.add(ad.mul(log_sigma, -2.0), -1.0)),
                              0.5)), 1.0 / B)
    parts["kl"] = kl
    for name, part in parts.items():
        if not np.isfinite(part.data):
            raise FloatingPointError(f"vae loss component {name!r} is not finite")
    total = ad.add(
        ad.add(ad.mul(parts["motion"], cfg.w_motion),
               ad.mul(parts["shape"], cfg.w_shape)),
        ad.add(ad.add(ad.mul(parts["joint"], cfg.w_joint),
                      ad.mul(parts["reproj"], cfg.w_reproj)),
               ad.mul(kl, cfg.w_kl)))
    return total, {k: float(v.data) for k, v in parts.items()}


def _dataset_arrays(dataset: Dataset):
    feats = np.stack([obs.features for _, obs in dataset.samples])
    states = np.stack([motion_to_state(m) for m, _ in dataset.samples])
    joints = np.stack([forward_kinematics(dataset.skeleton, m)
                       for m, _ in dataset.samples])
    kp2d = np.stack([obs.kp2d for _, obs in dataset.samples])
    conf = np.stack([obs.conf for _, obs in dataset.samples])
    beta = np.broadcast_to(dataset.skeleton.beta,
                           (len(dataset.samples), dataset.skeleton.joint_count))
    return feats, states, beta.copy(), joints, kp2d, conf


def train_vae(dataset: Dataset, cfg: VaeTrainConfig
              ) -> tuple[VaeModel, list[dict]]:
    """Adam training over the dataset; returns the model and per-epoch loss
    history.  Deterministic for a fixed config and dataset.
    """
    spec = cfg.spec
    if spec.num_joints != dataset.skeleton.joint_count:
        raise ValueError(
            f"train_vae: spec has {spec.num_joints} joints, dataset "
            f"{dataset.skeleton.joint_count}")
    if dataset.samples and dataset.samples[0][1].features.shape[1] != spec.feat_dim:
        raise ValueError(
            f"train_vae: dataset features dim "
            f"{dataset.samples[0][1].features.shape[1]} != spec {spec.feat_dim}")
    model = VaeModel.init(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    feats, states, beta, joints, kp2d, conf = _dataset_arrays(dataset)
    n = feats.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, parts = vae_loss(
                model, dataset.skeleton, dataset.camera,
                feats[idx], states[idx], beta[idx], joints[idx],
                kp2d[idx], conf[idx], cfg, rng)
            model.store.zero_grad()
            loss.backward()
            nn.adam_step(model.store, model.store.gradients(), cfg.learning_rate)
            parts["total"] = float(loss.data)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        history.append({k: v / batches for k, v in sums.items()})
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            logger.info("vae epoch %d: %s", epoch,
                        {k: round(v, 4) for k, v in history[-1].items()})
    return model, history


# -- persistence --------------------------------------------------------------

def save_vae(path, model: VaeModel, extra_meta: dict | None = None) -> None:
    meta = {"kind": "vae", "spec": asdict(model.spec)}
    if extra_meta:
        meta.update(extra_meta)
    nn.save_checkpoint(path, model.store, meta)


def load_vae(path) -> VaeModel:
    store, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "vae":
        raise nn.CheckpointError(f"{path}: not a vae checkpoint")
    spec = VaeSpec(**meta["spec"])
    expected = VaeModel.init(spec, seed=0).expected_shapes()
    store, meta = nn.load_checkpoint(path, expect_shapes=expected)
    return VaeModel(spec, store)
