import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from physpan.cli import main

TINY_MODEL = ["--set", "horizon=8", "--set", "image_dim=6", "--set", "query_dim=4",
              "--set", "context_dim=4", "--set", "conv_width=4", "--set", "embed_dim=2",
              "--set", "time_bins=2", "--set", "sim_enc_widths=4,4,4,8",
              "--set", "sim_latent=8", "--set", "sim_hidden=4", "--set", "epochs=1"]


def dir_digest(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["gen", "--task", "contact", "--n", "8", "--seed", "5", "--out", str(root),
               "--set", "resolution=16"])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory, cli_dataset):
    out = tmp_path_factory.mktemp("cli_run") / "run"
    rc = main(["train", "--variant", "pip", "--data", str(cli_dataset), "--out", str(out),
               "--seed", "1"] + TINY_MODEL)
    assert rc == 0
    return out


def test_gen_writes_manifest_and_distribution(cli_dataset):
    doc = json.loads((cli_dataset / "manifest.json").read_text())
    assert doc["scene_count"] == 8
    assert len(doc["scenes"]) == 8
    assert (cli_dataset / "distribution.csv").exists()
    assert (cli_dataset / "config.resolved").exists()


def test_gen_refuses_nonempty_dir_without_force(cli_dataset, capsys):
    rc = main(["gen", "--task", "contact", "--n", "8", "--seed", "5",
               "--out", str(cli_dataset), "--set", "resolution=16"])
    assert rc == 1
    assert "--force" in capsys.readouterr().err


def test_gen_force_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "d"
    args = ["gen", "--task", "containment", "--n", "5", "--seed", "2", "--out", str(out),
            "--set", "resolution=16"]
    assert main(args) == 0
    first = dir_digest(out)
    assert main(args + ["--force"]) == 0
    assert dir_digest(out) == first


def test_gen_combined_equal_thirds(tmp_path):
    out = tmp_path / "c"
    rc = main(["gen", "--task", "combined", "--n", "9", "--seed", "4", "--out", str(out),
               "--set", "resolution=16"])
    assert rc == 0
    doc = json.loads((out / "manifest.json").read_text())
    tasks = [s["task"] for s in doc["scenes"]]
    assert sorted(set(tasks)) == ["contact", "containment", "stability"]
    assert all(tasks.count(t) == 3 for t in set(tasks))


def test_gen_unknown_task_is_usage_error(tmp_path, capsys):
    rc = main(["gen", "--task", "gravity", "--n", "2", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_train_writes_all_four_artifacts(cli_run):
    names = {p.name for p in cli_run.iterdir()}
    assert {"best.ckpt", "final.ckpt", "metrics.csv", "config.resolved"} <= names


def test_train_same_seed_identical_metrics(tmp_path, cli_dataset):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        rc = main(["train", "--variant", "baseline", "--data", str(cli_dataset),
                   "--out", str(out), "--seed", "7"] + TINY_MODEL)
        assert rc == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_train_pip_no_ss_has_no_span_parameters(tmp_path, cli_dataset):
    out = tmp_path / "noss"
    rc = main(["train", "--variant", "pip_no_ss", "--data", str(cli_dataset),
               "--out", str(out), "--seed", "2"] + TINY_MODEL)
    assert rc == 0
    from physpan import blobio
    params, meta = blobio.read_checkpoint(out / "best.ckpt")
    assert meta["variant"] == "pip_no_ss"
    assert not [n for n in params if n.startswith("span.")]


def test_eval_console_matches_csv(cli_run, cli_dataset, tmp_path, capsys):
    out = tmp_path / "ev"
    rc = main(["eval", "--ckpt", str(cli_run / "best.ckpt"), "--data", str(cli_dataset),
               "--split", "test", "--out", str(out)])
    assert rc == 0
    console = capsys.readouterr().out.strip().splitlines()[-1]
    cell = (out / "eval.csv").read_text().splitlines()[1].split(",")[1]
    assert console == f"accuracy {cell}"


def test_eval_invalid_split_usage_error(cli_run, cli_dataset, tmp_path):
    rc = main(["eval", "--ckpt", str(cli_run / "best.ckpt"), "--data", str(cli_dataset),
               "--split", "holdout", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_spans_outputs_and_schema(cli_run, cli_dataset, tmp_path):
    out = tmp_path / "sp"
    rc = main(["spans", "--ckpt", str(cli_run / "best.ckpt"), "--data", str(cli_dataset),
               "--split", "test", "--out", str(out)])
    assert rc == 0
    lines = (out / "spans.csv").read_text().splitlines()
    assert lines[0] == "sample_id,span_idx,frame_idx,r_value,selected"
    assert (out / "histogram.csv").exists()
    assert (out / "span_scores.csv").exists()


def test_spans_rejects_non_pip_checkpoint(tmp_path, cli_dataset, capsys):
    out = tmp_path / "noss2"
    rc = main(["train", "--variant", "pip_no_ss", "--data", str(cli_dataset),
               "--out", str(out), "--seed", "3"] + TINY_MODEL)
    assert rc == 0
    rc = main(["spans", "--ckpt", str(out / "best.ckpt"), "--data", str(cli_dataset),
               "--split", "test", "--out", str(tmp_path / "sp2")])
    assert rc == 1
    assert "pip" in capsys.readouterr().err


def test_report_histogram_bar_count_equals_horizon(cli_run, cli_dataset, tmp_path):
    out = tmp_path / "rep"
    rc = main(["report", "--ckpt", str(cli_run / "best.ckpt"), "--data", str(cli_dataset),
               "--split", "test", "--out", str(out)])
    assert rc == 0
    svg = (out / "histogram.svg").read_text()
    assert svg.count('class="bar"') == 8  # tiny config horizon
    assert (out / "loss_curves.svg").exists()
    strips = list(out.glob("strip_*_pred.ppm"))
    assert strips and strips[0].read_bytes().startswith(b"P6\n")
    assert list(out.glob("trajectory_*.csv"))


def test_commands_do_not_mutate_dataset(cli_run, cli_dataset, tmp_path):
    before = dir_digest(cli_dataset)
    main(["eval", "--ckpt", str(cli_run / "best.ckpt"), "--data", str(cli_dataset),
          "--split", "val", "--out", str(tmp_path / "e2")])
    main(["spans", "--ckpt", str(cli_run / "best.ckpt"), "--data", str(cli_dataset),
          "--split", "val", "--out", str(tmp_path / "s2")])
    assert dir_digest(cli_dataset) == before


def test_corrupt_dataset_is_runtime_error(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen", "--task", "containment", "--n", "5", "--seed", "1",
                 "--out", str(data), "--set", "resolution=16"]) == 0
    blob = next((data / "scenes").rglob("frames.blob"))
    raw = bytearray(blob.read_bytes())
    raw[-1] ^= 0xFF
    blob.write_bytes(bytes(raw))
    rc = main(["train", "--variant", "baseline", "--data", str(data),
               "--out", str(tmp_path / "run")] + TINY_MODEL)
    assert rc == 2
    assert "checksum" in capsys.readouterr().err


def test_config_file_and_override_precedence(tmp_path, cli_dataset):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=1\nlr=0.002  # file value\nhorizon=8\nimage_dim=6\n"
                   "query_dim=4\ncontext_dim=4\nconv_width=4\nembed_dim=2\n"
                   "time_bins=2\nsim_enc_widths=4,4,4,8\nsim_latent=8\nsim_hidden=4\n")
    out = tmp_path / "run"
    rc = main(["train", "--variant", "baseline", "--data", str(cli_dataset),
               "--out", str(out), "--config", str(cfg), "--set", "lr=0.004"])
    assert rc == 0
    resolved = dict(line.split("=", 1) for line in
                    (out / "config.resolved").read_text().splitlines())
    assert resolved["lr"] == "0.004"
    assert resolved["epochs"] == "1"


def test_unknown_config_key_is_usage_error(tmp_path, cli_dataset):
    rc = main(["train", "--variant", "baseline", "--data", str(cli_dataset),
               "--out", str(tmp_path / "x"), "--set", "warp_speed=9"])
    assert rc == 1
