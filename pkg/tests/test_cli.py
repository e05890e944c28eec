import csv
import json
import subprocess
import sys

import pytest
import yaml

from vesselxfer import cli
from vesselxfer.config import ConfigError, load_config, parse_config
from vesselxfer.objectives import NonFiniteLossError

SMOKE = {
    "n_images": 5,
    "data": {"n_dsa": 10, "n_fundus": 4, "image_size": 64},
    "phantom": {"image_size": 64, "n_branches": 7, "width_range": [1.5, 6.0]},
    "fundus_phantom": {"image_size": 64, "n_branches": 15, "width_range": [1.5, 4.0]},
    "train": {
        "epochs_flat": 2,
        "epochs_decay": 2,
        "batch_size": 2,
        "patch_size": 48,
        "base_width": 4,
        "depth": 3,
        "disc_width": 4,
        "disc_layers": 1,
        "frangi": {"scales": [1, 2, 3]},
    },
    "eval": {"figure_rows": 2, "figure_tile": 32},
    "repro": {"seeds": [0]},
}


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "smoke.yaml"
    path.write_text(yaml.safe_dump(SMOKE))
    return path


def only_run_dir(out, command):
    dirs = sorted(out.glob(f"{command}-*"))
    assert len(dirs) == 1
    return dirs[0]


def test_config_sections_and_unknown_keys(smoke_config):
    cfg, digest = load_config(smoke_config)
    assert cfg.train.depth == 3 and cfg.phantom.width_range == (1.5, 6.0)
    assert len(digest) == 64
    with pytest.raises(ConfigError, match="train.not_a_field"):
        parse_config({"train": {"not_a_field": 1}})
    with pytest.raises(ConfigError, match="bogus"):
        parse_config({"bogus": {}})
    with pytest.raises(ConfigError):
        parse_config({"train": {"lr": -1}})


def test_unknown_key_exits_2_naming_key(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  learning_rate: 0.1\n")
    proc = subprocess.run(
        [sys.executable, "-m", "vesselxfer", "synth", "--config", str(bad), "--out", str(tmp_path / "runs")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert "train.learning_rate" in proc.stderr


def test_unknown_method_is_config_error(tmp_path, smoke_config):
    code = cli.main(["train", "--config", str(smoke_config), "--method", "cyclegan", "--out", str(tmp_path)])
    assert code == 2


def test_synth_writes_triples_and_manifest(tmp_path, smoke_config):
    assert cli.main(["synth", "--config", str(smoke_config), "--out", str(tmp_path)]) == 0
    run = only_run_dir(tmp_path, "synth")
    rows = list(csv.DictReader(open(run / "dataset" / "manifest.csv")))
    assert len(rows) == 5
    for row in rows:
        assert all((run / "dataset" / row[k]).is_file() for k in ("image", "mask", "background"))
    man = json.loads((run / "manifest.json").read_text())
    assert man["command"] == "synth" and man["seed"] == 0 and "phantom_spec" in man["inputs"]
    assert not (run / ".manifest.json.tmp").exists()


def test_missing_dsa_dir_exits_3(tmp_path, smoke_config):
    cfg = dict(SMOKE, data={**SMOKE["data"], "dsa_dir": str(tmp_path / "nowhere")})
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["frangi", "--config", str(path), "--out", str(tmp_path / "runs")]) == 3


def test_numerical_failure_exits_4(tmp_path, smoke_config, monkeypatch):
    def boom(*args, **kwargs):
        raise NonFiniteLossError("seg", float("nan"), 3)

    monkeypatch.setattr(cli, "train_classic_unet", boom)
    code = cli.main(["train", "--config", str(smoke_config), "--method", "classic_unet", "--out", str(tmp_path)])
    assert code == 4


def test_frangi_train_eval_on_synthesised_dir(tmp_path, smoke_config):
    out = tmp_path / "runs"
    assert cli.main(["synth", "--config", str(smoke_config), "--out", str(out)]) == 0
    data = only_run_dir(out, "synth") / "dataset"
    cfg = dict(SMOKE, data={**SMOKE["data"], "dsa_dir": str(data)})
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg))

    assert cli.main(["frangi", "--config", str(path), "--out", str(out)]) == 0
    assert len(list((only_run_dir(out, "frangi") / "labels").glob("*.png"))) == 5

    assert cli.main(["train", "--config", str(path), "--method", "classic_unet", "--out", str(out)]) == 0
    train_run = only_run_dir(out, "train")
    assert (train_run / "logs" / "losses.csv").is_file()
    assert (train_run / "config.snapshot").is_file()

    cfg["eval"] = {**SMOKE["eval"], "checkpoint": str(train_run)}
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["eval", "--config", str(path), "--out", str(out)]) == 0
    ev = only_run_dir(out, "eval")
    summary = (ev / "summary.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in summary[1:]] == ["frangi", "classic_unet"]
    assert (ev / "comparison.png").is_file()


def test_repro_smoke_table_shape_and_determinism(tmp_path, smoke_config):
    tables = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert cli.main(["repro", "--config", str(smoke_config), "--out", str(out)]) == 0
        run = only_run_dir(out, "repro")
        tables.append((run / "seed_0" / "summary.csv").read_text())
        assert (run / "manifest.json").is_file()
    lines = tables[0].splitlines()
    assert lines[0] == "method,accuracy,precision,recall,dice"
    assert [line.split(",")[0] for line in lines[1:]] == ["frangi", "classic_unet", "add_unet", "scgan"]
    assert all(len(line.split(",")) == 5 for line in lines)
    assert tables[0] == tables[1]
