import json
import os

import numpy as np
import pytest

from miret.checkpoint import load_arrays, save_arrays
from miret.cli import main
from miret.training import read_metrics

BASE_CONFIG = {
    "seed": 5,
    "world": {
        "item_count": 60,
        "cluster_count": 3,
        "user_count": 40,
        "interests_per_user": 2,
        "drift_prob": 0.3,
        "noise_prob": 0.05,
        "trace_len_min": 21,
        "trace_len_max": 21,
        "seed": 5,
    },
    "model": {
        "dim": 8,
        "layers": 1,
        "heads": 2,
        "interests": 2,
        "max_seq_len": 20,
        "windows": [[4, 2]],
        "raw_tail": 12,
        "watch_bucket_count": 6,
        "duration_bucket_count": 8,
    },
    "train": {"batch_size": 8, "steps": 12, "checkpoint_every": 6},
    "eval": {"cutoffs": [5, 10, 20], "request_count": 20},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(BASE_CONFIG))
    return str(path)


def gen(cfg_path, out):
    assert main(["gen-data", "--config", cfg_path, "--out", str(out)]) == 0
    return os.path.join(str(out), "dataset.ndjson")


def train(cfg_path, data, out, extra=()):
    code = main(["train", "--config", cfg_path, "--data", data, "--out", str(out), *extra])
    assert code == 0
    return os.path.join(str(out), "checkpoint-final")


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_is_byte_identical_across_runs(tmp_path, cfg_path):
    p1 = gen(cfg_path, tmp_path / "d1")
    p2 = gen(cfg_path, tmp_path / "d2")
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_gen_data_manifest_echoes_resolved_spec(tmp_path, cfg_path):
    path = gen(cfg_path, tmp_path / "d")
    manifest = json.load(open(path + ".manifest.json"))
    assert manifest["world"]["item_count"] == 60
    assert manifest["world"]["cluster_count"] == 3
    assert manifest["trace_count"] == 40
    assert manifest["config_hash"]


def test_missing_required_key_named_in_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1}))
    code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
    assert code == 2
    assert "world" in capsys.readouterr().err


def test_unknown_key_rejected_with_path(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**BASE_CONFIG, "model": {"dim": 8, "warp_factor": 9}}))
    code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
    assert code == 2
    assert "model.warp_factor" in capsys.readouterr().err


def test_set_override_applies(tmp_path, cfg_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--config", cfg_path, "--set", "world.user_count=7", "--out", str(out)]) == 0
    lines = open(out / "dataset.ndjson").read().splitlines()
    assert len(lines) == 7


# ---------------------------------------------------------------------------
# train


def test_train_writes_metrics_checkpoints_and_figures(tmp_path, cfg_path):
    data = gen(cfg_path, tmp_path / "d")
    out = tmp_path / "run"
    ckpt = train(cfg_path, data, out)
    metrics = read_metrics(out / "metrics.ndjson")
    steps = [m["step"] for m in metrics]
    assert steps == list(range(1, 13))
    assert os.path.exists(ckpt + ".manifest.json")
    assert os.path.exists(str(out / "checkpoint-000006.bin"))
    assert os.path.exists(str(out / "metrics.csv"))
    assert os.path.exists(str(out / "training_curves.png"))
    summary = json.load(open(out / "summary.json"))
    assert summary["steps"] == 12


def test_training_metrics_bit_identical_across_runs(tmp_path, cfg_path):
    data = gen(cfg_path, tmp_path / "d")
    train(cfg_path, data, tmp_path / "r1")
    train(cfg_path, data, tmp_path / "r2")
    m1 = open(tmp_path / "r1" / "metrics.ndjson", "rb").read()
    m2 = open(tmp_path / "r2" / "metrics.ndjson", "rb").read()
    assert m1 == m2


def test_resume_reproduces_subsequent_steps_exactly(tmp_path, cfg_path):
    data = gen(cfg_path, tmp_path / "d")
    full = tmp_path / "full"
    train(cfg_path, data, full)
    half = tmp_path / "half"
    train(cfg_path, data, half, extra=("--steps", "6"))
    resumed = tmp_path / "resumed"
    code = main(
        ["train", "--config", cfg_path, "--data", data, "--out", str(resumed),
         "--resume", str(half / "checkpoint-final")]
    )
    assert code == 0
    full_metrics = read_metrics(full / "metrics.ndjson")
    resumed_metrics = read_metrics(resumed / "metrics.ndjson")
    assert resumed_metrics == full_metrics[6:]


def test_nan_loss_aborts_with_diagnostics(tmp_path, cfg_path, capsys):
    data = gen(cfg_path, tmp_path / "d")
    out = tmp_path / "run"
    ckpt = train(cfg_path, data, out, extra=("--steps", "6"))
    arrays, extra = load_arrays(ckpt)
    arrays["fuse.weight"] = np.full_like(arrays["fuse.weight"], np.nan)
    bad = str(tmp_path / "bad-ckpt")
    save_arrays(bad, arrays, extra)
    with np.errstate(invalid="ignore"):
        code = main(["train", "--config", cfg_path, "--data", data, "--out", str(tmp_path / "r2"), "--resume", bad])
    assert code == 4
    err = capsys.readouterr().err
    assert "non-finite loss" in err and "batch index" in err and "norms" in err


# ---------------------------------------------------------------------------
# eval


def test_eval_report_monotone_and_stamped(tmp_path, cfg_path):
    data = gen(cfg_path, tmp_path / "d")
    ckpt = train(cfg_path, data, tmp_path / "run")
    out = tmp_path / "eval"
    code = main(["eval", "--config", cfg_path, "--checkpoint", ckpt, "--data", data, "--out", str(out)])
    assert code == 0
    report = json.load(open(out / "report.json"))
    values = [report["hit_rate"][str(k)] for k in report["cutoffs"]]
    assert values == sorted(values)
    assert report["config_hash"]
    assert os.path.exists(str(out / "report.csv"))
    assert os.path.exists(str(out / "hit_rate.png"))


def test_eval_refuses_config_hash_mismatch(tmp_path, cfg_path, capsys):
    data = gen(cfg_path, tmp_path / "d")
    ckpt = train(cfg_path, data, tmp_path / "run")
    code = main(
        ["eval", "--config", cfg_path, "--set", "model.layers=2", "--checkpoint", ckpt,
         "--data", data, "--out", str(tmp_path / "eval")]
    )
    assert code == 2
    assert "refusing" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# retrieve


def test_retrieve_prints_ranked_table(tmp_path, cfg_path, capsys):
    data = gen(cfg_path, tmp_path / "d")
    ckpt = train(cfg_path, data, tmp_path / "run")
    history = [
        {"item_id": 3, "watch_time": 10.0, "duration": 60.0, "tag_id": 0, "labels": [0]},
        {"item_id": 21, "watch_time": 5.0, "duration": 30.0, "tag_id": 1},
    ]
    hist_path = tmp_path / "history.json"
    hist_path.write_text(json.dumps(history))
    out = tmp_path / "ret"
    capsys.readouterr()  # drain gen/train output
    code = main(
        ["retrieve", "--config", cfg_path, "--checkpoint", ckpt, "--history", str(hist_path),
         "--k", "5", "--out", str(out)]
    )
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert "rank" in lines[0]
    assert len(lines) == 2 + 5
    assert os.path.exists(str(out / "retrieved.csv"))


# ---------------------------------------------------------------------------
# ablate


def test_ablate_query_tokens_produces_row_per_value(tmp_path, cfg_path):
    out = tmp_path / "sweep"
    code = main(
        ["ablate", "--config", cfg_path, "--axis", "query_tokens", "--values", "1,2",
         "--steps", "4", "--out", str(out)]
    )
    assert code == 0
    sweep = json.load(open(out / "sweep.json"))
    assert [r[0] for r in sweep["rows"]] == ["1", "2"]
    assert os.path.exists(str(out / "sweep.csv"))
    assert os.path.exists(str(out / "sweep.png"))


def test_ablate_compression_axis_has_three_fixed_variants(tmp_path, cfg_path):
    out = tmp_path / "sweep"
    code = main(
        ["ablate", "--config", cfg_path, "--axis", "compression", "--steps", "3",
         "--set", "world.user_count=24", "--set", "eval.request_count=10",
         "--set", "train.batch_size=6", "--out", str(out)]
    )
    assert code == 0
    sweep = json.load(open(out / "sweep.json"))
    assert [r[0] for r in sweep["rows"]] == ["64-raw", "256-raw", "256-compressed"]


def test_ablate_requires_values_for_numeric_axes(tmp_path, cfg_path, capsys):
    code = main(["ablate", "--config", cfg_path, "--axis", "layers", "--out", str(tmp_path / "s")])
    assert code == 2
    assert "--values" in capsys.readouterr().err


def test_ablate_seq_len_axis_scales_world_and_model(tmp_path, cfg_path):
    out = tmp_path / "sweep"
    code = main(
        ["ablate", "--config", cfg_path, "--axis", "seq_len", "--values", "8,16",
         "--steps", "3", "--set", "world.user_count=24", "--set", "eval.request_count=10",
         "--set", "train.batch_size=6", "--out", str(out)]
    )
    assert code == 0
    sweep = json.load(open(out / "sweep.json"))
    assert [r[0] for r in sweep["rows"]] == ["8", "16"]
