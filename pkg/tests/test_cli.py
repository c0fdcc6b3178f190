import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from dvaegan import cli, data, rating
from dvaegan.errors import ConfigError


def run(argv):
    return cli.main(argv)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """Shared tiny dataset + trained run for the reconstruct/evaluate/rate tests."""
    root = tmp_path_factory.mktemp("cli")
    ds_dir = root / "ds"
    assert (
        run(
            [
                "synth",
                "--out",
                str(ds_dir),
                "--n-train",
                "16",
                "--n-test",
                "4",
                "--d-x",
                "24",
                "--image-hw",
                "16",
                "--seed",
                "5",
            ]
        )
        == 0
    )
    run_dir = root / "run"
    assert (
        run(
            [
                "train",
                "--dataset",
                str(ds_dir),
                "--out",
                str(run_dir),
                "--epochs",
                "2",
                "1",
                "1",
                "--batch-size",
                "4",
                "--d-z",
                "4",
                "--cog-hidden",
                "8",
                "--conv-channels",
                "2",
                "3",
                "--seed",
                "6",
            ]
        )
        == 0
    )
    return root, ds_dir, run_dir


def test_synth_default_split_sizes(tmp_path, capsys):
    out = tmp_path / "ds"
    assert run(["synth", "--out", str(out), "--image-hw", "20", "--d-x", "64"]) == 0
    printed = capsys.readouterr().out
    assert "1200 train / 50 test" in printed
    doc = json.loads((out / "manifest.json").read_text())
    splits = [r["split"] for r in doc["records"]]
    assert splits.count("train") == 1200 and splits.count("test") == 50


def test_synth_byte_identical_rerun(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--n-train", "8", "--n-test", "2", "--d-x", "16", "--image-hw", "16", "--seed", "9"]
    assert run(["synth", "--out", str(a)] + args) == 0
    assert run(["synth", "--out", str(b)] + args) == 0
    assert tree_digest(a) == tree_digest(b)


def test_synth_invalid_family_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(["synth", "--out", str(tmp_path / "x"), "--family", "spirals"])
    assert exc.value.code == 2
    # same family error through the config file exits 2 without SystemExit
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "synth": {"family": "spirals"}}))
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "y")]) == 2


def test_config_file_unknown_keys_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "synth": {"n_trian": 5}}))
    rc = run(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "unknown keys" in capsys.readouterr().err
    cfg.write_text(json.dumps({"version": 2, "synth": {}}))
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text(json.dumps({"version": 1, "sinth": {}}))
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_config_file_overridden_by_flags(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(
        json.dumps(
            {
                "version": 1,
                "synth": {"n_train": 6, "n_test": 2, "d_x": 16, "image_hw": 16, "seed": 1},
            }
        )
    )
    out = tmp_path / "ds"
    assert run(["synth", "--config", str(cfg), "--out", str(out), "--n-train", "4"]) == 0
    assert "4 train / 2 test" in capsys.readouterr().out


def test_reconstruct_outputs_and_footprint(small_run, tmp_path, capsys):
    root, ds_dir, run_dir = small_run
    out = tmp_path / "recons"
    rc = run(
        [
            "reconstruct",
            "--checkpoint",
            str(run_dir / "stage3.ckpt"),
            "--signals",
            str(ds_dir),
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    printed = capsys.readouterr().out
    assert "not loaded: disc, e_vis" in printed
    assert len(list(out.glob("*.dvgt"))) == 4
    assert len(list(out.glob("*.pgm"))) == 4
    # deterministic across reruns
    out2 = tmp_path / "recons2"
    run(
        [
            "reconstruct",
            "--checkpoint",
            str(run_dir / "stage3.ckpt"),
            "--signals",
            str(ds_dir),
            "--out",
            str(out2),
        ]
    )
    assert tree_digest(out) == tree_digest(out2)


def test_evaluate_perfect_copies_scores_ones(small_run, tmp_path, capsys):
    root, ds_dir, run_dir = small_run
    dataset = data.load_manifest(ds_dir)
    recons = tmp_path / "copies"
    recons.mkdir()
    for i in dataset.test_idx:
        stim = dataset.stimulus(i)
        data.write_tensor(recons / f"{stim.id}.dvgt", stim.pixels)
    rc = run(
        [
            "evaluate",
            "--recons",
            str(recons),
            "--dataset",
            str(ds_dir),
            "--out",
            str(tmp_path / "eval"),
            "--seed",
            "3",
        ]
    )
    assert rc == 0
    printed = capsys.readouterr().out
    assert "pcc 1.0000" in printed and "pixcom 1.0000" in printed
    doc = json.loads((tmp_path / "eval" / "eval_report.json").read_text())
    assert doc["aggregates"]["ssim"]["mean"] == pytest.approx(1.0)


def test_evaluate_checkpoint_path_deterministic(small_run, tmp_path, capsys):
    root, ds_dir, run_dir = small_run
    argv = [
        "evaluate",
        "--checkpoint",
        str(run_dir / "stage3.ckpt"),
        "--dataset",
        str(ds_dir),
        "--seed",
        "7",
    ]
    assert run(argv + ["--out", str(tmp_path / "e1")]) == 0
    assert run(argv + ["--out", str(tmp_path / "e2")]) == 0
    d1 = json.loads((tmp_path / "e1" / "eval_report.json").read_text())
    d2 = json.loads((tmp_path / "e2" / "eval_report.json").read_text())
    assert d1 == d2


def test_train_vae_gan_ablation_stage2_log_absent(small_run, tmp_path):
    root, ds_dir, _ = small_run
    out = tmp_path / "ab"
    rc = run(
        [
            "train",
            "--dataset",
            str(ds_dir),
            "--out",
            str(out),
            "--epochs",
            "1",
            "0",
            "1",
            "--batch-size",
            "4",
            "--d-z",
            "4",
            "--cog-hidden",
            "8",
            "--conv-channels",
            "2",
            "3",
            "--ablation",
            "vae-gan",
            "--seed",
            "8",
        ]
    )
    assert rc == 0
    lines = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert {l["stage"] for l in lines} == {1, 3}
    assert not (out / "stage2.ckpt").exists()


def test_train_stage_resume_matches(small_run, tmp_path):
    root, ds_dir, run_dir = small_run
    resumed = tmp_path / "resumed"
    rc = run(
        [
            "train",
            "--dataset",
            str(ds_dir),
            "--out",
            str(resumed),
            "--epochs",
            "2",
            "1",
            "1",
            "--batch-size",
            "4",
            "--stage",
            "2",
            "--checkpoint",
            str(run_dir / "stage1.ckpt"),
            "--seed",
            "6",
        ]
    )
    assert rc == 0
    assert (resumed / "stage3.ckpt").read_bytes() == (run_dir / "stage3.ckpt").read_bytes()


def test_train_stage_resume_requires_checkpoint(small_run, tmp_path):
    root, ds_dir, _ = small_run
    rc = run(
        ["train", "--dataset", str(ds_dir), "--out", str(tmp_path / "x"), "--stage", "2"]
    )
    assert rc == 2


def test_rate_build_and_score_writes_result(small_run, tmp_path, capsys):
    root, ds_dir, run_dir = small_run
    recons = tmp_path / "recons"
    rc = run(
        [
            "reconstruct",
            "--checkpoint",
            str(run_dir / "stage3.ckpt"),
            "--signals",
            str(ds_dir),
            "--out",
            str(recons),
        ]
    )
    assert rc == 0
    session_file = tmp_path / "session.json"
    rc = run(
        [
            "rate",
            "--session-file",
            str(session_file),
            "--recons",
            str(recons),
            "--dataset",
            str(ds_dir),
            "--no-serve",
            "--seed",
            "11",
        ]
    )
    assert rc == 0
    assert session_file.exists()
    # scripted rater answers offline through the event log, then --score
    session = rating.load_session(session_file)
    events = tmp_path / "session.events.jsonl"
    service = rating.RatingService(session, events_path=events)
    for t in session.trials:
        service.record_choice("scripted", t.trial, t.correct)
    rc = run(
        [
            "rate",
            "--session-file",
            str(session_file),
            "--events",
            str(events),
            "--score",
            "--out",
            str(tmp_path / "result.json"),
        ]
    )
    assert rc == 0
    doc = json.loads((tmp_path / "result.json").read_text())
    assert doc["pooled"] == 1.0 and doc["n_choices"] == session.n_trials
