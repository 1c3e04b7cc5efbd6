"""Shifted-noise denoising diffusion over motion state vectors.

The forward process corrupts a motion toward gaussian noise whose mean and
per-channel spread come from the sequence's encoded latent distributions
(decoded into state space) instead of N(0, I).  The denoiser predicts the
clean sequence directly; the reverse step rebuilds the posterior mean from
that prediction after subtracting the deterministic noise-mean offset, which
makes the whole process collapse to the textbook chain when the noise is
standard normal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .motion import motion_to_state, state_to_motion, forward_kinematics, state_dim
from .synth import Dataset
from .tracking import SimulationBlowupError, TrackerConfig, build_character, track
from .vae import VaeModel, decode, encode, motion_losses, state_noise_params

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule tables, index 0 holding the boundary convention
    (beta_0 = 0, cumulative alpha_0 = 1) so t runs 1..T directly.
    """

    betas: np.ndarray                 # (T+1,)
    alphas: np.ndarray                # (T+1,)
    alphas_cumprod: np.ndarray        # (T+1,), strictly decreasing after 0
    posterior_variance: np.ndarray    # (T+1,), element 1 is exactly 0

    @property
    def num_steps(self) -> int:
        return len(self.betas) - 1


def make_schedule(num_steps: int, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> DiffusionSchedule:
    """Linearly spaced betas; all derived tables precomputed."""
    if not 1 <= num_steps <= 1000:
        raise ValueError(f"schedule: num_steps {num_steps} outside [1, 1000]")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"schedule: need 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})")
    betas = np.zeros(num_steps + 1)
    betas[1:] = np.linspace(beta_start, beta_end, num_steps)
    alphas = 1.0 - betas
    acp = np.cumprod(alphas)
    post_var = np.zeros(num_steps + 1)
    post_var[1:] = betas[1:] * (1.0 - acp[:-1]) / (1.0 - acp[1:])
    return DiffusionSchedule(betas=betas, alphas=alphas, alphas_cumprod=acp,
                             posterior_variance=post_var)


@dataclass
class StateGaussian:
    """Per-frame noise distribution in state space: mean and per-channel
    std, both (H, state_dim).  The standard-normal case is mean 0, std 1.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError(
                f"state gaussian: mean {self.mean.shape} vs std {self.std.shape}")
        if np.any(self.std < 0):
            raise ValueError("state gaussian: negative std")

    @staticmethod
    def standard(shape: tuple) -> "StateGaussian":
        return StateGaussian(np.zeros(shape), np.ones(shape))


def _check_t(schedule: DiffusionSchedule, t: int) -> int:
    t = int(t)
    if not 1 <= t <= schedule.num_steps:
        raise ValueError(f"t={t} outside [1, {schedule.num_steps}]")
    return t


def forward_diffuse(schedule: DiffusionSchedule, x0: np.ndarray, t: int,
                    noise: StateGaussian,
                    rng: np.random.Generator) -> np.ndarray:
    """x_t = sqrt(acp_t) x0 + sqrt(1 - acp_t) (mean + std * eps)."""
    t = _check_t(schedule, t)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-2:] != noise.mean.shape:
        raise ValueError(
            f"forward_diffuse: state {x0.shape} vs noise {noise.mean.shape}")
    acp = schedule.alphas_cumprod[t]
    eps = noise.mean + noise.std * rng.standard_normal(x0.shape)
    return np.sqrt(acp) * x0 + np.sqrt(1.0 - acp) * eps


def reverse_step(schedule: DiffusionSchedule, x_t: np.ndarray,
                 x0_pred: np.ndarray, t: int, noise: StateGaussian,
                 rng: np.random.Generator | None = None,
                 stochastic: bool = True) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}.

    The deterministic offset sqrt(1 - acp_t) * mean is removed, the
    standard clean-prediction posterior mean is formed, and the offset for
    step t-1 is restored; the stochastic term is scaled per-channel by the
    noise std.  At t = 1 the posterior variance is 0 and the result is the
    clean prediction itself.
    """
    t = _check_t(schedule, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_pred = np.asarray(x0_pred, dtype=np.float64)
    acp_t = schedule.alphas_cumprod[t]
    acp_prev = schedule.alphas_cumprod[t - 1]
    beta_t = schedule.betas[t]
    alpha_t = schedule.alphas[t]
    y_t = x_t - np.sqrt(1.0 - acp_t) * noise.mean
    mean = (np.sqrt(acp_prev) * beta_t / (1.0 - acp_t) * x0_pred
            + np.sqrt(alpha_t) * (1.0 - acp_prev) / (1.0 - acp_t) * y_t
            + np.sqrt(1.0 - acp_prev) * noise.mean)
    if stochastic and t > 1:
        if rng is None:
            raise ValueError("reverse_step: stochastic mode needs an rng")
        sigma = np.sqrt(schedule.posterior_variance[t])
        mean = mean + sigma * noise.std * rng.standard_normal(x_t.shape)
    return mean


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

@dataclass
class Condition:
    """Per-frame denoiser conditioning: observation-feature embeddings
    (H, emb_dim), physics-gradient channels (H, J, 3) and a 0/1 flag saying
    whether guidance actually ran.  Gradient channels must be zero when it
    did not.
    """

    embeddings: np.ndarray
    gradients: np.ndarray
    executed: bool

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.gradients = np.asarray(self.gradients, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError(f"condition embeddings: expected (H, D), got "
                             f"{self.embeddings.shape}")
        if (self.gradients.ndim != 3 or self.gradients.shape[2] != 3
                or self.gradients.shape[0] != self.embeddings.shape[0]):
            raise ValueError(f"condition gradients: expected (H, J, 3), got "
                             f"{self.gradients.shape}")
        if not self.executed and np.any(self.gradients != 0.0):
            raise ValueError(
                "condition: gradient channels must be zero when not executed")

    @property
    def num_frames(self) -> int:
        return int(self.embeddings.shape[0])

    def vector(self) -> np.ndarray:
        """(H, emb_dim + 3J + 1) concatenation fed to the denoiser."""
        H = self.num_frames
        flag = np.full((H, 1), 1.0 if self.executed else 0.0)
        return np.concatenate(
            [self.embeddings, self.gradients.reshape(H, -1), flag], axis=1)


def condition_dim(num_joints: int, emb_dim: int) -> int:
    return emb_dim + 3 * num_joints + 1


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

TIME_EMB_DIM = 8


def time_embedding(t: int, num_steps: int) -> np.ndarray:
    """Fixed sinusoidal encoding of the step fraction, (TIME_EMB_DIM,)."""
    u = t / max(num_steps, 1)
    return np.array([u, 1.0 - u,
                     np.sin(np.pi * u), np.cos(np.pi * u),
                     np.sin(2 * np.pi * u), np.cos(2 * np.pi * u),
                     np.sin(4 * np.pi * u), np.cos(4 * np.pi * u)])


@dataclass
class DenoiserSpec:
    num_joints: int = 9
    feat_dim: int = 32
    emb_dim: int = 16
    hidden: int = 64

    @property
    def state_dim(self) -> int:
        return state_dim(self.num_joints)

    @property
    def cond_dim(self) -> int:
        return condition_dim(self.num_joints, self.emb_dim)

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.cond_dim + TIME_EMB_DIM

    def embed(self) -> nn.MLPSpec:
        return nn.MLPSpec((self.feat_dim, self.emb_dim), prefix="den.emb")

    def trunk_in(self) -> nn.MLPSpec:
        return nn.MLPSpec((self.input_dim, self.hidden), prefix="den.in")

    def gru(self) -> nn.GRUSpec:
        return nn.GRUSpec(self.hidden, self.hidden, prefix="den.gru",
                          bidirectional=True)

    def head(self) -> nn.MLPSpec:
        # the head sees the recurrent summary plus the raw per-frame input
        # again: state, gradients and time must not have to survive the GRU
        return nn.MLPSpec((2 * self.hidden + self.input_dim, self.hidden,
                           self.state_dim), prefix="den.out")


class DenoiserModel:
    def __init__(self, spec: DenoiserSpec, store: nn.ParamStore):
        self.spec = spec
        self.store = store

    @staticmethod
    def init(spec: DenoiserSpec, seed: int) -> "DenoiserModel":
        rng = np.random.default_rng(seed)
        store = nn.ParamStore()
        nn.init_mlp(store, spec.embed(), rng)
        nn.init_mlp(store, spec.trunk_in(), rng)
        nn.init_gru(store, spec.gru(), rng)
        nn.init_mlp(store, spec.head(), rng)
        return DenoiserModel(spec, store)

    def expected_shapes(self) -> dict[str, tuple]:
        return {name: t.data.shape for name, t in self.store.params.items()}

    def embed_features(self, features: np.ndarray) -> np.ndarray:
        """Observation features (H, feat_dim) -> embeddings (H, emb_dim)."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.spec.feat_dim:
            raise ValueError(
                f"embed_features: shape {feats.shape}, expected "
                f"(H, {self.spec.feat_dim})")
        return nn.mlp_forward(self.store, self.spec.embed(), Tensor(feats)).data


def denoiser_forward_t(model: DenoiserModel, x_t: Tensor, cond: Tensor,
                       t_emb: np.ndarray) -> Tensor:
    """Graph forward: x_t (B, H, state), cond (B, H, cond_dim), t_emb
    (B, TIME_EMB_DIM) -> clean-state prediction (B, H, state).
    """
    spec = model.spec
    B, H = x_t.shape[0], x_t.shape[1]
    temb = np.broadcast_to(t_emb[:, None, :], (B, H, TIME_EMB_DIM))
    inputs = ad.concat([x_t, cond, Tensor(temb)], axis=-1)
    h = ad.tanh(nn.mlp_forward(model.store, spec.trunk_in(), inputs))
    h = nn.seq_encode(model.store, spec.gru(), h)
    # residual form: the net predicts a correction to the (possibly tracked)
    # input state, so preserving a good input costs no capacity
    delta = nn.mlp_forward(model.store, spec.head(),
                           ad.concat([h, inputs], axis=-1))
    return ad.add(x_t, delta)


def denoise_predict(model: DenoiserModel, x_t: np.ndarray, t: int,
                    cond: Condition, num_steps: int) -> np.ndarray:
    """Inference-path clean prediction for one sequence (H, state_dim)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or x_t.shape[1] != model.spec.state_dim:
        raise ValueError(
            f"denoise_predict: state shape {x_t.shape}, expected "
            f"(H, {model.spec.state_dim})")
    vec = cond.vector()
    if vec.shape != (x_t.shape[0], model.spec.cond_dim):
        raise ValueError(
            f"denoise_predict: condition {vec.shape}, expected "
            f"({x_t.shape[0]}, {model.spec.cond_dim})")
    out = denoiser_forward_t(model, Tensor(x_t[None]), Tensor(vec[None]),
                             time_embedding(t, num_steps)[None])
    return out.data[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class DiffusionTrainConfig:
    spec: DenoiserSpec = field(default_factory=DenoiserSpec)
    epochs: int = 60
    batch_size: int = 6
    learning_rate: float = 2e-3
    p_phys: float = 0.5
    w_diff: float = 1.0
    w_joint: float = 1.0
    w_reproj: float = 1e-4
    noise_draws: int = 16
    noise_floor: float = 1e-3
    gradient_scale: str | float = "rms"
    seed: int = 0


def scaled_gradients(gradients: np.ndarray, scale: str | float) -> np.ndarray:
    """Normalize gradient channels to unit RMS over the sequence (or apply a
    fixed multiplier) so their magnitude is camera-invariant.
    """
    g = np.asarray(gradients, dtype=np.float64)
    if isinstance(scale, str):
        if scale != "rms":
            raise ValueError(f"unknown gradient scale {scale!r}")
        rms = float(np.sqrt(np.mean(g ** 2)))
        return g / rms if rms > 1e-12 else g
    return g * float(scale)


def _sequence_cache(dataset: Dataset, vae: VaeModel, cfg: DiffusionTrainConfig,
                    tracker_cfg: TrackerConfig, rng: np.random.Generator):
    """Precompute per-sequence constants: clean states, gt joints,
    observations, decoded noise distributions, and physics characters.
    """
    cache = []
    for motion, obs in dataset.samples:
        dists = encode(vae, obs.features)
        m, s = state_noise_params(vae, dists, rng, draws=cfg.noise_draws,
                                  floor=cfg.noise_floor)
        _, beta = decode(vae, dists.mu)
        cache.append({
            "x0": motion_to_state(motion),
            "joints": forward_kinematics(dataset.skeleton, motion),
            "kp2d": obs.kp2d,
            "conf": obs.conf,
            "feats": obs.features,
            "noise": StateGaussian(m, s),
            "character": build_character(dataset.skeleton, beta, tracker_cfg),
        })
    return cache


def train_diffusion(dataset: Dataset, vae: VaeModel,
                    schedule: DiffusionSchedule, cfg: DiffusionTrainConfig,
                    tracker_cfg: TrackerConfig | None = None
                    ) -> tuple[DenoiserModel, list[dict]]:
    """Train the clean-motion predictor with the frozen VAE's noise
    distributions.  Each batch element draws a uniform step t; with
    probability p_phys the noisy motion is physically tracked first and the
    tracked state plus its reprojection gradients condition the prediction
    (Table-style guidance-aware training); otherwise gradient channels stay
    zero.  Tracker blowups fall back to the unguided branch.
    """
    from .guidance import projection_gradient   # deferred: avoids module cycle

    spec = cfg.spec
    if spec.num_joints != dataset.skeleton.joint_count:
        raise ValueError(
            f"train_diffusion: spec joints {spec.num_joints} != dataset "
            f"{dataset.skeleton.joint_count}")
    if vae.spec.feat_dim != spec.feat_dim:
        raise ValueError("train_diffusion: feature dims disagree with the VAE")
    tracker_cfg = tracker_cfg or TrackerConfig()
    model = DenoiserModel.init(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    cache = _sequence_cache(dataset, vae, cfg, tracker_cfg, rng)
    n = len(cache)
    T = schedule.num_steps
    skeleton, camera = dataset.skeleton, dataset.camera
    H = cache[0]["x0"].shape[0]
    history = []
    fallbacks = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xs, grad_flags = [], []
            for i in idx:
                seq = cache[i]
                t = int(rng.integers(1, T + 1))
                x_t = forward_diffuse(schedule, seq["x0"], t, seq["noise"], rng)
                x_in, grads, executed = x_t, np.zeros((H, spec.num_joints, 3)), False
                if rng.random() < cfg.p_phys:
                    try:
                        result = track(seq["character"],
                                       state_to_motion(x_t, spec.num_joints,
                                                       dataset.fps),
                                       tracker_cfg)
                        x_in = motion_to_state(result.motion)
                        tracked_joints = forward_kinematics(
                            seq["character"].skeleton, result.motion)
                        grads = scaled_gradients(
                            projection_gradient(tracked_joints, seq["kp2d"],
                                                seq["conf"], camera,
                                                frame_mask=result.success),
                            cfg.gradient_scale)
                        executed = True
                    except SimulationBlowupError:
                        fallbacks += 1
                xs.append((x_in, t))
                grad_flags.append(np.concatenate(
                    [grads.reshape(H, -1),
                     np.full((H, 1), 1.0 if executed else 0.0)], axis=1))
            # graph forward over the batch; embeddings computed in-graph so
            # the embedding layer trains with everything else
            x_in_t = Tensor(np.stack([x for x, _ in xs]))
            emb_t = nn.mlp_forward(model.store, spec.embed(),
                                   Tensor(np.stack([cache[i]["feats"]
                                                    for i in idx])))
            cond_t = ad.concat([emb_t, Tensor(np.stack(grad_flags))], axis=-1)
            temb = np.stack([time_embedding(t, T) for _, t in xs])
            x0_pred = denoiser_forward_t(model, x_in_t, cond_t, temb)
            parts = motion_losses(
                skeleton, camera, x0_pred, None,
                np.stack([cache[i]["x0"] for i in idx]),
                skeleton.beta,
                np.stack([cache[i]["joints"] for i in idx]),
                np.stack([cache[i]["kp2d"] for i in idx]),
                np.stack([cache[i]["conf"] for i in idx]))
            l_diff = ad.mul(parts["motion"], 1.0 / H)
            total = ad.add(ad.mul(l_diff, cfg.w_diff),
                           ad.add(ad.mul(parts["joint"], cfg.w_joint),
                                  ad.mul(parts["reproj"], cfg.w_reproj)))
            if not np.isfinite(total.data):
                raise nn.GradientError(
                    f"diffusion training diverged at epoch {epoch}")
            model.store.zero_grad()
            total.backward()
            nn.adam_step(model.store, model.store.gradients(),
                         cfg.learning_rate)
            for k, v in (("diff", float(l_diff.data)),
                         ("joint", float(parts["joint"].data)),
                         ("reproj", float(parts["reproj"].data)),
                         ("total", float(total.data))):
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        history.append({k: v / batches for k, v in sums.items()})
        if epoch % 20 == 0 or epoch == cfg.epochs - 1:
            logger.info("diffusion epoch %d: %s", epoch,
                        {k: round(v, 4) for k, v in history[-1].items()})
    if fallbacks:
        logger.info("diffusion training: %d tracker blowup fallbacks", fallbacks)
    return model, history


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_denoiser(path, model: DenoiserModel,
                  schedule: DiffusionSchedule | None = None,
                  extra_meta: dict | None = None) -> None:
    meta = {"kind": "denoiser", "spec": asdict(model.spec)}
    if schedule is not None:
        meta["schedule"] = {
            "num_steps": schedule.num_steps,
            "beta_start": float(schedule.betas[1]),
            "beta_end": float(schedule.betas[-1]),
        }
    if extra_meta:
        meta.update(extra_meta)
    nn.save_checkpoint(path, model.store, meta)


def load_denoiser(path) -> tuple[DenoiserModel, DiffusionSchedule | None]:
    store, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise nn.CheckpointError(f"{path}: not a denoiser checkpoint")
    spec = DenoiserSpec(**meta["spec"])
    expected = DenoiserModel.init(spec, seed=0).expected_shapes()
    store, meta = nn.load_checkpoint(path, expect_shapes=expected)
    schedule = None
    if "schedule" in meta:
        s = meta["schedule"]
        schedule = make_schedule(s["num_steps"], s["beta_start"], s["beta_end"])
    return DenoiserModel(spec, store), schedule
