"""End-to-end command-line tests: every subcommand runs at toy scale.

A module-scoped workspace runs the full chain once (gen-data -> train-vae ->
train-diffusion); the individual tests exercise capture/eval/ablate on top of
those artifacts plus the error paths and exit codes.
"""

import json
import os
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from pgmocap.cli import _CSV_COLUMNS, main
from pgmocap.config import config_hash, load_config
from pgmocap.diffusion import load_denoiser
from pgmocap.guidance import ABLATE_FORMAT_VERSION
from pgmocap.metrics import METRICS_FORMAT_VERSION
from pgmocap.motion import MOTION_FORMAT_VERSION, load_motion, save_motion
from pgmocap.synth import DATA_FORMAT_VERSION, load_dataset
from pgmocap.vae import load_vae

TOY_CONFIG = {
    "data": {"num_train_sequences": 3, "num_test_sequences": 2,
             "num_frames": 45, "seed": 13},
    "vae": {"epochs": 8, "batch_size": 3, "seed": 1},
    "schedule": {"num_steps": 3},
    "diffusion": {"epochs": 3, "batch_size": 3, "seed": 2},
    "guidance": {"num_steps": 3, "guided_steps": 1},
}


def write_config(path, overrides=None):
    cfg = json.loads(json.dumps(TOY_CONFIG))
    for dotted, value in (overrides or {}).items():
        node = cfg
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    path.write_text(json.dumps(cfg, indent=1))
    return path


def first_line(path):
    # checkpoints carry binary tensor data after the JSON header line
    with open(path, "rb") as f:
        return json.loads(f.readline().decode())


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Full toy pipeline: dataset + trained VAE + trained 3-step denoiser."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "config.json")
    data = root / "data"
    vae = root / "vae.ckpt"
    den = root / "den3.ckpt"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == 0
    assert main(["train-vae", "--config", str(config),
                 "--data", str(data / "train.jsonl"), "--out", str(vae)]) == 0
    assert main(["train-diffusion", "--config", str(config),
                 "--data", str(data / "train.jsonl"),
                 "--vae", str(vae), "--out", str(den)]) == 0
    return SimpleNamespace(root=root, config=config, data=data, vae=vae, den=den)


# -- gen-data -----------------------------------------------------------------

def test_gen_data_writes_both_splits(ws):
    train = load_dataset(ws.data / "train.jsonl")
    test = load_dataset(ws.data / "test.jsonl")
    assert len(train.samples) == 3
    assert len(test.samples) == 2
    header = first_line(ws.data / "train.jsonl")
    assert header["version"] == DATA_FORMAT_VERSION
    assert header["command_seed"] == 13
    assert len(header["config_hash"]) == 16
    assert header["config_hash"] == config_hash(load_config(ws.config))


def test_gen_data_rerun_is_byte_identical(ws):
    before = {s: (ws.data / s).read_bytes() for s in ("train.jsonl", "test.jsonl")}
    assert main(["gen-data", "--config", str(ws.config), "--out", str(ws.data)]) == 0
    for split, blob in before.items():
        assert (ws.data / split).read_bytes() == blob


def test_gen_data_refuses_stale_overwrite(ws, tmp_path, capsys):
    """A config with a different hash must not clobber existing outputs."""
    other = write_config(tmp_path / "other.json", {"data.seed": 99})
    code = main(["gen-data", "--config", str(other), "--out", str(ws.data)])
    assert code == 2
    assert "refusing to overwrite" in capsys.readouterr().err
    assert first_line(ws.data / "train.jsonl")["command_seed"] == 13  # intact


# -- training commands --------------------------------------------------------

def test_vae_checkpoint_header_and_load(ws):
    meta = first_line(ws.vae)["meta"]
    assert meta["kind"] == "vae"
    assert meta["config_hash"] == config_hash(load_config(ws.config))
    assert meta["seed"] == 1
    assert np.isfinite(meta["final_loss"])
    model = load_vae(ws.vae)
    assert model.spec.num_joints == 9


def test_denoiser_checkpoint_carries_schedule(ws):
    model, schedule = load_denoiser(ws.den)
    assert model.spec.num_joints == 9
    assert schedule is not None
    assert schedule.num_steps == 3


def test_train_vae_seed_flag_enters_hash(ws, tmp_path, capsys):
    out = tmp_path / "vae42.ckpt"
    args = ["train-vae", "--config", str(ws.config),
            "--data", str(ws.data / "train.jsonl"), "--out", str(out)]
    assert main(args + ["--seed", "42"]) == 0
    assert first_line(out)["meta"]["seed"] == 42
    # same path, different effective config -> stale-hash refusal
    assert main(args + ["--seed", "43"]) == 2
    assert "refusing to overwrite" in capsys.readouterr().err
    assert first_line(out)["meta"]["seed"] == 42


def test_train_vae_missing_dataset(ws, tmp_path, capsys):
    code = main(["train-vae", "--config", str(ws.config),
                 "--data", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "v.ckpt")])
    assert code == 3
    assert "dataset file not found" in capsys.readouterr().err


def test_train_diffusion_rejects_wrong_checkpoint_kind(ws, tmp_path, capsys):
    code = main(["train-diffusion", "--config", str(ws.config),
                 "--data", str(ws.data / "train.jsonl"),
                 "--vae", str(ws.den), "--out", str(tmp_path / "d.ckpt")])
    assert code == 4
    assert "model error" in capsys.readouterr().err


def test_dataset_config_disagreement_is_runtime_error(ws, tmp_path, capsys):
    """A self-consistent config can still disagree with the data on disk."""
    narrow = write_config(tmp_path / "narrow.json", {
        "data.noise": {"feat_dim": 16},
        "vae.spec": {"feat_dim": 16},
        "diffusion.spec": {"feat_dim": 16},
    })
    code = main(["train-vae", "--config", str(narrow),
                 "--data", str(ws.data / "train.jsonl"),
                 "--out", str(tmp_path / "v.ckpt")])
    assert code == 5
    assert "runtime error" in capsys.readouterr().err


# -- capture ------------------------------------------------------------------

def test_capture_writes_motion_and_diagnostics(ws, tmp_path):
    out = tmp_path / "cap.pgm"
    tracked = tmp_path / "cap_tracked.pgm"
    code = main(["capture", "--config", str(ws.config), "--seed", "5",
                 "--data", str(ws.data / "test.jsonl"), "--index", "1",
                 "--vae", str(ws.vae), "--denoiser", str(ws.den),
                 "--out", str(out), "--tracked-out", str(tracked)])
    assert code == 0

    header = first_line(out)
    assert header["version"] == MOTION_FORMAT_VERSION
    assert header["content"] == "denoised"
    assert header["seed"] == 5
    motion, skeleton = load_motion(out)
    assert motion.num_frames == 45
    assert skeleton.joint_count == 9
    assert first_line(tracked)["content"] == "tracked"

    diag = json.loads((tmp_path / "cap.pgm.diag.json").read_text())
    assert diag["version"] == "pgm-capture-diag/1"
    assert diag["sequence_index"] == 1
    steps = diag["diagnostics"]["steps"]
    assert [s["t"] for s in steps] == [3, 2, 1]
    assert sum(s["guided"] for s in steps) == 1
    assert set(diag["final_track"]) == {"frame_success_fraction",
                                        "sequence_success"}


def test_capture_same_seed_same_bytes(ws, tmp_path):
    def run(name, seed):
        out = tmp_path / name
        assert main(["capture", "--config", str(ws.config), "--seed", str(seed),
                     "--data", str(ws.data / "test.jsonl"),
                     "--vae", str(ws.vae), "--denoiser", str(ws.den),
                     "--out", str(out)]) == 0
        return out.read_bytes()

    assert run("a.pgm", 7) == run("b.pgm", 7)
    assert run("c.pgm", 8) != run("a.pgm", 7)


def test_capture_index_out_of_range(ws, tmp_path, capsys):
    code = main(["capture", "--config", str(ws.config),
                 "--data", str(ws.data / "test.jsonl"), "--index", "99",
                 "--vae", str(ws.vae), "--denoiser", str(ws.den),
                 "--out", str(tmp_path / "x.pgm")])
    assert code == 3
    assert "index" in capsys.readouterr().err


def test_capture_schedule_mismatch(ws, tmp_path, capsys):
    """Config asks for 5 steps but the checkpoint was trained with 3."""
    five = write_config(tmp_path / "five.json", {
        "schedule.num_steps": 5, "guidance.num_steps": 5})
    code = main(["capture", "--config", str(five),
                 "--data", str(ws.data / "test.jsonl"),
                 "--vae", str(ws.vae), "--denoiser", str(ws.den),
                 "--out", str(tmp_path / "x.pgm")])
    assert code == 2


def test_capture_rejects_vae_as_denoiser(ws, tmp_path):
    code = main(["capture", "--config", str(ws.config),
                 "--data", str(ws.data / "test.jsonl"),
                 "--vae", str(ws.vae), "--denoiser", str(ws.vae),
                 "--out", str(tmp_path / "x.pgm")])
    assert code == 4


# -- eval ---------------------------------------------------------------------

def test_eval_identical_motions_score_perfectly(ws, tmp_path, capsys):
    dataset = load_dataset(ws.data / "test.jsonl")
    save_motion(tmp_path / "pred.pgm", dataset.samples[0][0],
                dataset.skeleton)
    out = tmp_path / "metrics.json"
    code = main(["eval", "--pred", str(tmp_path / "pred.pgm"),
                 "--gt", str(ws.data / "test.jsonl"), "--index", "0",
                 "--out", str(out)])
    assert code == 0
    assert "pa_mpjpe" in capsys.readouterr().out
    report = json.loads(out.read_text())
    assert report["version"] == METRICS_FORMAT_VERSION
    assert report["mpjpe"] == 0.0
    assert report["pa_mpjpe"] < 1e-6
    assert report["pck"] == 1.0
    assert report["vel_err"] == 0.0
    assert report["success_rate"] is None


def test_eval_against_plain_motion_file(ws, tmp_path):
    dataset = load_dataset(ws.data / "test.jsonl")
    path = tmp_path / "m.pgm"
    save_motion(path, dataset.samples[1][0], dataset.skeleton)
    out = tmp_path / "metrics.json"
    assert main(["eval", "--pred", str(path), "--gt", str(path),
                 "--out", str(out)]) == 0
    assert json.loads(out.read_text())["mpjpe"] == 0.0


def test_eval_skeleton_mismatch(ws, tmp_path, capsys):
    from pgmocap.synth import generate_motion, make_skeleton

    chain = make_skeleton("chain3")
    motion = generate_motion(chain, "idle", num_frames=45, seed=0)
    save_motion(tmp_path / "pred.pgm", motion, chain)
    code = main(["eval", "--pred", str(tmp_path / "pred.pgm"),
                 "--gt", str(ws.data / "test.jsonl"), "--index", "0",
                 "--out", str(tmp_path / "m.json")])
    assert code == 3
    assert "skeleton mismatch" in capsys.readouterr().err


# -- ablate -------------------------------------------------------------------

def test_ablate_report_and_csv(ws, tmp_path):
    out = tmp_path / "ablate.json"
    csv_path = tmp_path / "ablate.csv"
    code = main(["ablate", "--config", str(ws.config), "--seed", "3",
                 "--data", str(ws.data / "test.jsonl"),
                 "--vae", str(ws.vae), "--denoiser", str(ws.den),
                 "--arm", "vae", "--arm", "vae_tracked", "--arm", "latent_T3_s0",
                 "--out", str(out), "--csv", str(csv_path)])
    assert code == 0

    report = json.loads(out.read_text())
    assert report["version"] == ABLATE_FORMAT_VERSION
    assert report["config_hash"] == config_hash(load_config(ws.config))
    assert report["skipped"] == []
    rows = {r["arm"]: r for r in report["arms"]}
    assert set(rows) == {"vae", "vae_tracked", "latent_T3_s0"}
    for row in rows.values():
        assert row["num_sequences"] == 2
        assert row["metrics"]["pa_mpjpe"] <= row["metrics"]["mpjpe"] + 1e-12
    assert rows["vae"]["metrics"]["success_rate"] is None
    assert 0.0 <= rows["vae_tracked"]["metrics"]["success_rate"] <= 1.0
    assert rows["vae"]["reference_full_scale"]  # known full-scale numbers

    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].split(",") == _CSV_COLUMNS
    assert len(lines) == 4
    vae_line = next(l for l in lines[1:] if l.startswith("vae,"))
    cells = dict(zip(_CSV_COLUMNS, vae_line.split(",")))
    assert cells["success_rate"] == ""  # None renders as empty cell


def test_ablate_skips_arms_without_matching_model(ws, tmp_path):
    out = tmp_path / "ablate.json"
    code = main(["ablate", "--config", str(ws.config), "--seed", "3",
                 "--data", str(ws.data / "test.jsonl"),
                 "--vae", str(ws.vae), "--denoiser", str(ws.den),
                 "--arm", "latent_T5_s0", "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["arms"] == []
    assert report["skipped"] == [{"arm": "latent_T5_s0",
                                  "reason": "no 5-step model"}]


def test_ablate_rejects_unknown_arm(ws, tmp_path, capsys):
    code = main(["ablate", "--config", str(ws.config),
                 "--data", str(ws.data / "test.jsonl"),
                 "--vae", str(ws.vae), "--denoiser", str(ws.den),
                 "--arm", "warp_T5_s1", "--out", str(tmp_path / "a.json")])
    assert code == 2
    assert "--arm" in capsys.readouterr().err


# -- config / logging plumbing ------------------------------------------------

def test_bad_config_inputs_exit_2(ws, tmp_path, capsys):
    missing = main(["gen-data", "--config", str(tmp_path / "nope.json"),
                    "--out", str(tmp_path / "d")])
    assert missing == 2

    garbled = tmp_path / "garbled.json"
    garbled.write_text("{not json")
    assert main(["gen-data", "--config", str(garbled),
                 "--out", str(tmp_path / "d")]) == 2

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"data": {"num_framez": 10}}))
    assert main(["gen-data", "--config", str(unknown),
                 "--out", str(tmp_path / "d")]) == 2
    assert "unknown field" in capsys.readouterr().err

    inconsistent = write_config(tmp_path / "inconsistent.json",
                                {"guidance.num_steps": 4})
    assert main(["gen-data", "--config", str(inconsistent),
                 "--out", str(tmp_path / "d")]) == 2


def test_log_level_env_var(ws, tmp_path):
    """PGM_LOG=INFO surfaces training progress; default stays quiet."""
    def run(env_extra, out_name):
        env = {k: v for k, v in os.environ.items() if k != "PGM_LOG"}
        env.update(env_extra)
        proc = subprocess.run(
            [sys.executable, "-m", "pgmocap.cli", "train-vae",
             "--config", str(ws.config), "--data", str(ws.data / "train.jsonl"),
             "--out", str(tmp_path / out_name)],
            capture_output=True, text=True, env=env)
        assert proc.returncode == 0
        return proc.stderr

    assert "INFO pgmocap.vae" in run({"PGM_LOG": "info"}, "v1.ckpt")
    assert "INFO" not in run({}, "v2.ckpt")
