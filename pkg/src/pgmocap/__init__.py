"""pgmocap: physics-guided reverse-diffusion human motion capture, desk scale.

A sequence VAE encodes 2D observation features into per-frame latent
gaussians; a diffusion model denoises motions initialized from those
distributions; a simulated character tracks intermediate motions and its
reprojection-loss gradients steer the remaining denoising steps.
"""

from .motion import (BehindCameraError, Camera, DegenerateRotationError,
                     GRAVITY, Motion, MotionFormatError, Skeleton,
                     default_camera, forward_kinematics, load_motion,
                     matrix_to_rot6d, motion_to_state, project_points,
                     rot6d_to_matrix, rotation_about, save_motion, so3_exp,
                     so3_log, state_to_motion)
from .metrics import MetricReport, compute_metrics, procrustes_align
from .synth import (Dataset, FrustumError, NoiseConfig, Observations,
                    generate_dataset, generate_motion, load_dataset,
                    make_skeleton, save_dataset, synthesize_observations)
from .nn import CheckpointError, GradientError, ParamStore, load_checkpoint, save_checkpoint
from .tracking import (Character, SimulationBlowupError, TrackResult,
                       TrackerConfig, build_character, pd_policy, step_sim,
                       success_rate, track)
from .vae import (LatentGaussianSeq, VaeModel, VaeSpec, VaeTrainConfig,
                  decode, decode_motion, encode, load_vae, reparam_sample,
                  save_vae, state_noise_params, train_vae, vae_loss)
from .diffusion import (Condition, DenoiserModel, DenoiserSpec,
                        DiffusionSchedule, DiffusionTrainConfig,
                        StateGaussian, denoise_predict, forward_diffuse,
                        load_denoiser, make_schedule, reverse_step,
                        save_denoiser, train_diffusion)
from .guidance import (CaptureResult, GuidanceConfig, REFERENCE_FULL_SCALE,
                       ablate, build_condition, capture, default_arms,
                       parse_arm, projection_gradient)
from .config import (ConfigError, DataConfig, PipelineConfig, ScheduleConfig,
                     build_camera, config_from_dict, config_hash,
                     config_to_dict, load_config, save_config)

__version__ = "0.1.0"
