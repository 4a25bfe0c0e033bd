import json
import subprocess
import sys

import numpy as np
import pytest

from mt3 import checkpoint, data
from mt3.cli import main

TINY = ["--set", "data.synth_resolution=8", "--set", "model.widths=[4,8]",
        "--set", "model.blocks_per_stage=1", "--set", "model.hidden_dim=8",
        "--set", "model.proj_dim=4", "--set", "data.synth_per_class=4",
        "--set", "data.test_per_class=1", "--set", "meta.meta_batch=2",
        "--set", "meta.task_size=4", "--set", "meta.max_steps=4",
        "--set", "joint.batch_size=16", "--set", "joint.max_steps=3",
        "--set", "baseline.batch_size=16", "--set", "baseline.max_steps=3",
        "--set", "adapt.batch=4"]


def train(out, *extra, regime="mt3"):
    return main(["train", "--regime", regime, "--output", str(out), *TINY, *extra])


def log_lines(out):
    return (out / "train_log.jsonl").read_text().splitlines()


def test_train_writes_log_config_and_checkpoints(tmp_path, capsys):
    out = tmp_path / "run"
    assert train(out, "--set", "checkpoint_every=2") == 0
    recs = [json.loads(line) for line in log_lines(out)]
    assert [r["step"] for r in recs] == [0, 1, 2, 3]
    assert {"acc_before", "acc_after", "loss_byol", "meta_grad_norm"} <= set(recs[0])
    assert (out / "config.json").exists() and (out / "final.ckpt").exists()
    assert (out / "step-0000002.ckpt").exists()
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["finished"]


def test_existing_run_is_protected(tmp_path):
    out = tmp_path / "run"
    assert train(out) == 0
    assert train(out) == 2
    assert train(out, "--force") == 0


def test_deterministic_rerun_bit_identical_logs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert train(a, "--deterministic") == 0 and train(b, "--deterministic") == 0
    assert log_lines(a) == log_lines(b)
    assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()


@pytest.mark.parametrize("regime", ["mt3", "jt"])
def test_interrupted_resume_matches_uninterrupted(tmp_path, regime):
    full, part = tmp_path / "full", tmp_path / "part"
    assert train(full, regime=regime) == 0
    assert train(part, "--until", "2", regime=regime) == 0
    assert not (part / "final.ckpt").exists() and (part / "step-0000002.ckpt").exists()
    assert train(part, "--resume", regime=regime) == 0
    assert log_lines(full) == log_lines(part)
    a = checkpoint.load(full / "final.ckpt").state
    b = checkpoint.load(part / "final.ckpt").state
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)


def test_resume_rejects_changed_config(tmp_path):
    out = tmp_path / "run"
    assert train(out, "--until", "2") == 0
    assert train(out, "--resume", "--set", "meta.inner_lr=0.2") == 2
    assert train(out, "--resume", "--force", "--set", "meta.inner_lr=0.2") == 0
    assert main(["train", "--output", str(tmp_path / "empty"), "--resume", *TINY]) == 2


def test_config_errors_exit_2(tmp_path):
    assert train(tmp_path / "x", "--set", "meta.bogus=1") == 2
    assert train(tmp_path / "y", regime="ttt") == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2


def test_eval_outputs_and_regime_check(tmp_path, capsys):
    run = tmp_path / "run"
    assert train(run) == 0
    ev = tmp_path / "ev"
    ck = str(run / "final.ckpt")
    assert main(["eval", "--checkpoint", ck, "--output", str(ev), *TINY,
                 "--set", 'data.synth_corruptions=[{"kind": "contrast", "params": {"factor": 0.3}}]']) == 0
    table = (ev / "table.txt").read_text()
    assert "mt3" in table and "avg." in table and "contr" in table
    rep = json.loads((ev / "eval_mt3.json").read_text())
    assert rep["corruptions"] and (ev / "mt3_adapt_loss.csv").exists()
    assert main(["eval", "--checkpoint", ck, "--regimes", "ttt", "--output", str(tmp_path / "e2"),
                 *TINY]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), *TINY]) == 3


def test_eval_alpha_zero_matches_mt(tmp_path):
    run = tmp_path / "run"
    assert train(run) == 0
    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(run / "final.ckpt"), "--alpha-zero",
                 "--output", str(ev), *TINY]) == 0
    mt = json.loads((ev / "eval_mt.json").read_text())["clean"]["records"]
    mt3 = json.loads((ev / "eval_mt3.json").read_text())["clean"]["records"]
    assert [r["pre"] for r in mt] == [r["post"] for r in mt3]


def test_baseline_checkpoint_rejects_adaptation(tmp_path):
    run = tmp_path / "run"
    assert train(run, regime="baseline") == 0
    args = ["eval", "--checkpoint", str(run / "final.ckpt"), *TINY]
    assert main(args + ["--regimes", "mt3", "--output", str(tmp_path / "a")]) == 2
    assert main(args + ["--regimes", "mt3", "--force", "--output", str(tmp_path / "b")]) == 2
    assert main(args + ["--output", str(tmp_path / "c")]) == 0


def test_inspect_checkpoint(tmp_path, capsys):
    run = tmp_path / "run"
    assert train(run) == 0
    capsys.readouterr()
    assert main(["inspect-checkpoint", str(run / "final.ckpt")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["step"] == 4 and set(info["parameters_per_group"]) == {"f", "h", "p", "q"}
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["inspect-checkpoint", str(tmp_path / "junk.ckpt")]) == 3


def test_corrupt_command(tmp_path):
    out = tmp_path / "c" / "noise.npy"
    assert main(["corrupt", "gaussian-noise", "--params", '{"sigma": 0.1}', "--per-class", "2",
                 "--resolution", "8", "--output", str(out)]) == 0
    imgs = data.read_npy_u8(out)
    assert imgs.shape == (20, 8, 8, 3)
    assert len(data.read_npy(out.with_name("labels.npy"), ("<i8",))) == 20
    assert main(["corrupt", "contrast", "--params", '{"factor": 7}', "--output", str(out)]) == 2
    (tmp_path / "bad.bin").write_bytes(bytes(100))
    assert main(["corrupt", "contrast", "--params", '{"factor": 0.5}', "--input",
                 str(tmp_path / "bad.bin"), "--output", str(out)]) == 3


def test_corrupt_npy_roundtrip_through_cli(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (3, 8, 8, 3), dtype=np.uint8)
    data.write_npy(tmp_path / "in.npy", imgs)
    out = tmp_path / "o" / "id.npy"
    assert main(["corrupt", "gaussian-noise", "--params", '{"sigma": 0.0}', "--input",
                 str(tmp_path / "in.npy"), "--output", str(out)]) == 0
    assert np.array_equal(data.read_npy(out, ("|u1",)), imgs)


def test_verify_command_and_mutation(capsys):
    assert main(["verify", "--trials", "2", "--json"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] and len(summary["checks"]) >= 40
    assert main(["verify", "--trials", "2", "--json", "--inject-sign-error", "exp"]) == 1
    failed = json.loads(capsys.readouterr().out)["failed"]
    assert "grad:exp" in failed and "grad:mul" not in failed


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mt3", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout
