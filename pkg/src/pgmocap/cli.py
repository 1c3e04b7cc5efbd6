"""Command-line entry points: gen-data, train-vae, train-diffusion, capture,
eval, ablate.

Every command is driven by one JSON config (plus --seed overrides) and its
outputs embed the config hash and seed, so reruns are byte-identical and a
stale output produced under a different config is refused rather than
silently overwritten.  Exit codes: 0 ok, 2 config, 3 data, 4 model,
5 runtime.  PGM_LOG sets the log level.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import (ConfigError, PipelineConfig, build_camera, config_hash,
                     load_config)
from .diffusion import load_denoiser, make_schedule, save_denoiser, train_diffusion
from .guidance import ablate, capture, default_arms, parse_arm
from .metrics import METRICS_FORMAT_VERSION, compute_metrics
from .motion import MotionFormatError, load_motion, save_motion
from .nn import CheckpointError, GradientError
from .synth import (DATA_FORMAT_VERSION, FrustumError, generate_dataset,
                    load_dataset, make_skeleton, save_dataset)
from .tracking import SimulationBlowupError
from .vae import load_vae, save_vae, train_vae

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4
EXIT_RUNTIME = 5


def _existing_hash(path: Path) -> str | None:
    """Best-effort extraction of the config hash from an existing output."""
    try:
        with path.open("rb") as f:
            first = f.readline(1 << 20)
        doc = json.loads(first.decode("utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError):
        try:
            doc = json.loads(path.read_text())
        except (OSError, UnicodeDecodeError, json.JSONDecodeError):
            return None
    if not isinstance(doc, dict):
        return None
    found = doc.get("config_hash")
    if found is None and isinstance(doc.get("meta"), dict):
        found = doc["meta"].get("config_hash")
    return found


def _refuse_stale(path, new_hash: str) -> None:
    path = Path(path)
    if not path.exists():
        return
    old = _existing_hash(path)
    if old is not None and old != new_hash:
        raise ConfigError(
            f"{path}: existing output has config hash {old}, current config "
            f"hashes to {new_hash}; refusing to overwrite (remove the file "
            f"or rerun with the original config)")


def _load_dataset_checked(path):
    path = Path(path)
    if not path.exists():
        raise MotionFormatError(f"dataset file not found: {path}")
    return load_dataset(path)


def _load_vae_checked(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return load_vae(path)


def _load_denoiser_checked(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return load_denoiser(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data.seed = args.seed
    h = config_hash(cfg)
    d = cfg.data
    skeleton = make_skeleton(d.skeleton)
    camera = build_camera(d)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, count, salt in (("train", d.num_train_sequences, 0),
                               ("test", d.num_test_sequences, 1)):
        seed = int(np.random.SeedSequence([d.seed, salt]).generate_state(1)[0])
        dataset = generate_dataset(skeleton, camera, d.noise, list(d.kinds),
                                   count, d.num_frames, d.fps, seed,
                                   jitter=d.motion_jitter)
        path = out_dir / f"{split}.jsonl"
        _refuse_stale(path, h)
        save_dataset(path, dataset,
                     {"config_hash": h, "command_seed": int(d.seed)})
        print(f"wrote {path} ({count} sequences, {d.num_frames} frames)")


def cmd_train_vae(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.vae.seed = args.seed
    h = config_hash(cfg)
    dataset = _load_dataset_checked(args.data)
    model, history = train_vae(dataset, cfg.vae)
    out = Path(args.out)
    _refuse_stale(out, h)
    save_vae(out, model, {"config_hash": h, "seed": int(cfg.vae.seed),
                          "final_loss": history[-1]["total"]})
    print(f"wrote {out} (final loss {history[-1]['total']:.6f})")


def cmd_train_diffusion(args) -> None:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.schedule.num_steps = args.steps
        cfg.guidance.num_steps = args.steps
        if cfg.guidance.guided_steps > args.steps:
            cfg.guidance.guided_steps = args.steps
    if args.seed is not None:
        cfg.diffusion.seed = args.seed
    h = config_hash(cfg)
    dataset = _load_dataset_checked(args.data)
    vae = _load_vae_checked(args.vae)
    schedule = make_schedule(cfg.schedule.num_steps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end)
    model, history = train_diffusion(dataset, vae, schedule, cfg.diffusion,
                                     cfg.tracker)
    out = Path(args.out)
    _refuse_stale(out, h)
    save_denoiser(out, model, schedule,
                  {"config_hash": h, "seed": int(cfg.diffusion.seed),
                   "final_loss": history[-1]["total"]})
    print(f"wrote {out} ({schedule.num_steps}-step model, "
          f"final loss {history[-1]['total']:.6f})")


def cmd_capture(args) -> None:
    cfg = load_config(args.config)
    h = config_hash(cfg)
    seed = args.seed if args.seed is not None else 0
    dataset = _load_dataset_checked(args.data)
    if not 0 <= args.index < len(dataset.samples):
        raise MotionFormatError(
            f"--index {args.index} out of range [0, {len(dataset.samples)})")
    vae = _load_vae_checked(args.vae)
    denoiser, schedule = _load_denoiser_checked(args.denoiser)
    if schedule is None:
        schedule = make_schedule(cfg.schedule.num_steps,
                                 cfg.schedule.beta_start, cfg.schedule.beta_end)
    if schedule.num_steps != cfg.guidance.num_steps:
        raise ConfigError(
            f"config.guidance.num_steps: {cfg.guidance.num_steps} does not "
            f"match the {schedule.num_steps}-step denoiser checkpoint")
    _, obs = dataset.samples[args.index]
    result = capture(obs, dataset.camera, dataset.skeleton, vae, denoiser,
                     schedule, cfg.guidance, cfg.tracker, seed=seed,
                     fps=dataset.fps)
    out = Path(args.out)
    _refuse_stale(out, h)
    save_motion(out, result.motion, dataset.skeleton,
                {"config_hash": h, "seed": seed, "content": "denoised"})
    diag = {"version": "pgm-capture-diag/1", "config_hash": h, "seed": seed,
            "sequence_index": args.index,
            "diagnostics": result.diagnostics}
    if result.track_result is not None:
        tr = result.track_result
        diag["final_track"] = {
            "frame_success_fraction": tr.frame_success_fraction,
            "sequence_success": bool(
                tr.frame_success_fraction
                >= cfg.tracker.success_frame_fraction),
        }
        if args.tracked_out:
            save_motion(args.tracked_out, tr.motion, dataset.skeleton,
                        {"config_hash": h, "seed": seed, "content": "tracked"})
            print(f"wrote {args.tracked_out}")
    diag_path = Path(str(out) + ".diag.json")
    diag_path.write_text(json.dumps(diag, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out} and {diag_path}")


def _load_gt_motion(path, index):
    """Ground truth may be a single motion file or a dataset + index."""
    with open(path) as fh:
        head = json.loads(fh.readline())
    if head.get("version") == DATA_FORMAT_VERSION:
        dataset = load_dataset(path)
        if not 0 <= index < len(dataset.samples):
            raise MotionFormatError(
                f"eval: --index {index} out of range "
                f"(dataset has {len(dataset.samples)} sequences)")
        return dataset.samples[index][0], dataset.skeleton
    return load_motion(path)


def cmd_eval(args) -> None:
    pred, pred_skel = load_motion(args.pred)
    gt, gt_skel = _load_gt_motion(args.gt, args.index)
    if pred_skel.joint_count != gt_skel.joint_count:
        raise MotionFormatError(
            f"eval: skeleton mismatch ({pred_skel.joint_count} vs "
            f"{gt_skel.joint_count} joints)")
    report = compute_metrics(pred, gt, gt_skel)
    doc = {"version": METRICS_FORMAT_VERSION}
    doc.update(dataclasses.asdict(report))
    out = Path(args.out)
    out.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out} (mpjpe {report.mpjpe:.2f} mm, "
          f"pa_mpjpe {report.pa_mpjpe:.2f} mm, pck {report.pck:.3f})")


_CSV_COLUMNS = ["arm", "pipeline", "num_sequences", "mpjpe", "pa_mpjpe",
                "pck", "vel_err", "vel_err_std", "foot_z_err", "success_rate",
                "ref_pa_mpjpe_mm", "ref_vel_err_mm", "ref_success_rate"]


def cmd_ablate(args) -> None:
    cfg = load_config(args.config)
    h = config_hash(cfg)
    seed = args.seed if args.seed is not None else 0
    dataset = _load_dataset_checked(args.data)
    vae = _load_vae_checked(args.vae)
    denoisers = {}
    for path in args.denoiser or []:
        model, schedule = _load_denoiser_checked(path)
        if schedule is None:
            raise CheckpointError(f"{path}: checkpoint carries no schedule")
        denoisers[schedule.num_steps] = (model, schedule)
    arms = args.arm or default_arms()
    for name in arms:                       # validate names before the run
        try:
            parse_arm(name)
        except ValueError as e:
            raise ConfigError(f"--arm: {e}") from e
    report = ablate(dataset, vae, denoisers, arms, cfg.tracker, cfg.guidance,
                    seed=seed)
    report["config_hash"] = h
    out = Path(args.out)
    _refuse_stale(out, h)
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out} ({len(report['arms'])} arms, "
          f"{len(report['skipped'])} skipped)")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=_CSV_COLUMNS)
            writer.writeheader()
            for row in report["arms"]:
                ref = row.get("reference_full_scale") or {}
                flat = {"arm": row["arm"], "pipeline": row["pipeline"],
                        "num_sequences": row["num_sequences"],
                        "ref_pa_mpjpe_mm": ref.get("pa_mpjpe_mm", ""),
                        "ref_vel_err_mm": ref.get("vel_err_mm", ""),
                        "ref_success_rate": ref.get("success_rate", "")}
                for k, v in row["metrics"].items():
                    flat[k] = "" if v is None else v
                writer.writerow(flat)
        print(f"wrote {args.csv}")


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgmocap",
        description="physics-guided diffusion motion capture (desk scale)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True, seed=True, out=True):
        if config:
            p.add_argument("--config", required=True, help="pipeline JSON config")
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="generate train/test datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="train the latent prior")
    common(p)
    p.add_argument("--data", required=True, help="training dataset (pgm-data/1)")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-diffusion", help="train the denoiser")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True, help="trained VAE checkpoint")
    p.add_argument("--steps", type=int, default=None,
                   help="override schedule step count")
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("capture", help="reconstruct one sequence")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0,
                   help="sequence index in the dataset")
    p.add_argument("--vae", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--tracked-out", default=None,
                   help="also write the physics-tracked motion here")
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("eval", help="compare predicted vs ground-truth motion")
    common(p, config=False, seed=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True,
                   help="ground-truth motion file, or a dataset (with --index)")
    p.add_argument("--index", type=int, default=0,
                   help="sequence index when --gt is a dataset")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run evaluation arms")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--denoiser", action="append", default=None,
                   help="denoiser checkpoint (repeatable, one per step count)")
    p.add_argument("--arm", action="append", default=None,
                   help="arm name (repeatable); default: the standard set")
    p.add_argument("--csv", default=None, help="also write a CSV table")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("PGM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MotionFormatError, FrustumError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except (SimulationBlowupError, GradientError, FloatingPointError,
            ValueError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
