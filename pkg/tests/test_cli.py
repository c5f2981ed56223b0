"""End-to-end command-line tests, run in process for speed.

A module-scoped fixture drives the full pipeline once in a temp directory
(gen-data, the three pretrains, a short train, eval); the tests then assert
on the artifacts and output of each stage. Error paths get fresh dirs.
"""

import io
import json
import os
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import pytest
import yaml
from PIL import Image

from storyvis.cli import main
from storyvis.config import EvalConfig, config_to_dict
from storyvis.evaluation.report import MetricReport

from conftest import make_tiny_run


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    try:
        with redirect_stdout(out), redirect_stderr(err):
            code = main(argv)
    except SystemExit as e:   # argparse usage errors
        code = e.code
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    """Config file + output dir with the whole pipeline already run."""
    root = tmp_path_factory.mktemp("cli")
    cfg = make_tiny_run()
    cfg.out_dir = "run"
    cfg.data.num_stories = 40
    cfg.pretrain.captioner_epochs = 1
    cfg.pretrain.classifier_epochs = 4
    cfg.eval = EvalConfig(num_negatives=1, rprecision_runs=2,
                          rprecision_mismatches=3)
    cfg_path = root / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(config_to_dict(cfg)))

    out = str(root / "run")
    base = ["--config", str(cfg_path), "--out", out]
    logs = {}
    for name, argv in [
        ("gen-data", ["gen-data"] + base),
        ("pre-cap", ["pretrain", "captioner"] + base),
        ("pre-clf", ["pretrain", "classifier"] + base),
        ("pre-damsm", ["pretrain", "damsm"] + base),
        ("train", ["train", "--max-steps", "4"] + base),
        ("eval", ["eval", "--split", "val"] + base),
    ]:
        code, stdout, stderr = run_cli(argv)
        assert code == 0, f"{name} failed:\n{stdout}\n{stderr}"
        logs[name] = stdout
    return {"root": root, "out": Path(out), "cfg_path": str(cfg_path),
            "base": base, "logs": logs}


def test_gen_data_layout_and_summary(cli_env):
    out = cli_env["out"]
    assert (out / "data" / "splits.json").exists()
    assert (out / "data" / "captions.jsonl").exists()
    assert (out / "data" / "characters.json").exists()
    checksums = json.loads((out / "data" / "checksums.json").read_text())
    assert set(checksums) == {"train", "val", "test"}
    assert "train: 32 stories" in cli_env["logs"]["gen-data"]
    assert checksums["train"] in cli_env["logs"]["gen-data"]
    splits = json.loads((out / "data" / "splits.json").read_text())
    some_id = splits["train"][0]
    assert (out / "data" / "frames" / some_id / "0.png").exists()


def test_pretrain_snapshots_and_messages(cli_env):
    snaps = cli_env["out"] / "snapshots"
    assert (snaps / "captioner.pt").exists()
    assert (snaps / "classifier.pt").exists()
    assert (snaps / "damsm.pt").exists()
    assert "captioner frozen; val greedy token accuracy" in cli_env["logs"]["pre-cap"]
    assert "classifier frozen; val micro-F1" in cli_env["logs"]["pre-clf"]
    assert "matching model frozen" in cli_env["logs"]["pre-damsm"]


def test_train_artifacts(cli_env):
    tdir = cli_env["out"] / "train"
    assert (tdir / "checkpoint_final.pt").exists()
    assert (tdir / "losses.jsonl").exists()
    records = [json.loads(l) for l in
               (tdir / "losses.jsonl").read_text().splitlines()]
    assert len(records) == 4
    assert "trained 4 steps" in cli_env["logs"]["train"]
    assert "final checkpoint:" in cli_env["logs"]["train"]


def test_eval_report_artifacts(cli_env):
    edir = cli_env["out"] / "eval" / "val-checkpoint_final"
    report = MetricReport.from_json((edir / "metrics.json").read_text())
    report.validate()
    assert report.metadata["split"] == "val"
    assert report.metadata["config_hash"]
    assert (edir / "frame_predictions.jsonl").exists()
    # stdout carries the same report
    printed = json.loads(
        cli_env["logs"]["eval"][:cli_env["logs"]["eval"].rindex("}") + 1])
    assert printed["char_f1"] == report.char_f1


def test_eval_is_repeatable(cli_env):
    edir = cli_env["out"] / "eval" / "val-checkpoint_final"
    first = (edir / "metrics.json").read_text()
    code, _, err = run_cli(["eval", "--split", "val"] + cli_env["base"])
    assert code == 0, err
    assert (edir / "metrics.json").read_text() == first


def test_generate_from_split(cli_env):
    code, stdout, err = run_cli(
        ["generate", "--split", "val", "--num-stories", "2"] + cli_env["base"])
    assert code == 0, err
    paths = stdout.strip().splitlines()
    assert len(paths) == 2
    for p in paths:
        img = Image.open(p)
        # ground-truth row above the generated row, 5 frames of 32px + padding
        assert img.height > 64 and img.width > 160


def test_generate_from_caption_file(cli_env):
    data = cli_env["out"] / "data"
    first = json.loads(
        (data / "captions.jsonl").read_text().splitlines()[0])
    captions_path = cli_env["root"] / "captions.json"
    captions_path.write_text(json.dumps([first["captions"]]))
    code, stdout, err = run_cli(
        ["generate", "--captions", str(captions_path)] + cli_env["base"])
    assert code == 0, err
    out_path = stdout.strip().splitlines()[0]
    assert out_path.endswith("custom_000.png") and os.path.exists(out_path)

    captions_path.write_text(json.dumps([first["captions"][:4]]))
    code, _, err = run_cli(
        ["generate", "--captions", str(captions_path)] + cli_env["base"])
    assert code == 1
    assert "expected 5" in err


def test_set_override_changes_dataset_size(cli_env):
    out = str(cli_env["root"] / "smaller")
    code, stdout, _ = run_cli(
        ["gen-data", "--config", cli_env["cfg_path"], "--out", out,
         "--set", "data.num_stories=20"])
    assert code == 0
    assert "train: 16 stories" in stdout


def test_seed_flag_changes_data(cli_env):
    out = str(cli_env["root"] / "reseed")
    sums = []
    for seed in ("101", "101", "202"):
        code, _, err = run_cli(
            ["gen-data", "--config", cli_env["cfg_path"], "--out", out,
             "--seed", seed, "--set", "data.num_stories=20"])
        assert code == 0, err
        sums.append(json.loads(
            (Path(out) / "data" / "checksums.json").read_text())["train"])
    assert sums[0] == sums[1] and sums[0] != sums[2]


def test_error_paths_and_messages(cli_env, tmp_path):
    empty = str(tmp_path / "empty")

    code, _, err = run_cli(
        ["eval", "--config", cli_env["cfg_path"], "--out", empty])
    assert code == 1 and "run `storyvis gen-data` first" in err

    code, _, _ = run_cli(
        ["gen-data", "--config", cli_env["cfg_path"], "--out", empty,
         "--set", "data.num_stories=20"])
    assert code == 0
    code, _, err = run_cli(
        ["train", "--config", cli_env["cfg_path"], "--out", empty,
         "--max-steps", "1"])
    assert code == 1
    assert "missing captioner snapshot; run `storyvis pretrain captioner` first" in err

    code, _, err = run_cli(
        ["generate", "--config", cli_env["cfg_path"], "--out", empty])
    assert code == 1 and "run `storyvis train` first" in err


def test_bad_flags_are_rejected(cli_env, tmp_path):
    code, _, err = run_cli(
        ["gen-data", "--config", cli_env["cfg_path"],
         "--out", str(tmp_path / "x"), "--set", "model.nope=3"])
    assert code == 1 and "unknown config key 'model.nope'" in err

    code, _, err = run_cli(
        ["gen-data", "--config", cli_env["cfg_path"],
         "--out", str(tmp_path / "y"), "--set", "oops"])
    assert code == 1 and "KEY=VALUE" in err

    code, _, err = run_cli(["gen-data", "--preset", "bogus"])
    assert code == 2, "argparse rejects unknown preset choices"

    code, _, err = run_cli(["not-a-command"])
    assert code == 2


def test_out_dir_from_environment(cli_env, tmp_path, monkeypatch):
    monkeypatch.setenv("STORYVIS_OUT", str(tmp_path))
    code, _, err = run_cli(
        ["gen-data", "--config", cli_env["cfg_path"],
         "--set", "data.num_stories=20"])
    assert code == 0, err
    assert (tmp_path / "run" / "data" / "splits.json").exists()
