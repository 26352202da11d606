import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from hygdl.cli import dispatch
from hygdl.config import RunConfig, load_config, parse_config
from hygdl.errors import ConfigParseError, MissingInput

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny.yaml"
REFERENCE_SWEEP = ROOT / "configs" / "mae_ood_reference_sweep.csv"


def _tiny(tmp_path, name="run", **train):
    data = yaml.safe_load(TINY.read_text())
    data["output_dir"] = str(tmp_path / name)
    data["train"].update(train)
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_defaults_and_example_config_agree():
    assert parse_config("") == RunConfig()
    assert load_config(ROOT / "configs" / "default.yaml") == RunConfig()


def test_unknown_key_reports_field_and_line():
    text = "version: 1\ntrain:\n  epochs: 3\n  epocs: 4\n"
    with pytest.raises(ConfigParseError) as info:
        parse_config(text)
    assert info.value.field == "train.epocs" and info.value.line == 4


@pytest.mark.parametrize(
    "text, field",
    [
        ("train:\n  epochs: three\n", "train.epochs"),
        ("train:\n  mask_ratio: 1.0\n", "train.mask_ratio"),
        ("disentangle:\n  mode: k1-per-sample\n  k: 2\n", "disentangle.k"),
        ("ablations:\n  no_distill: 1\n", "ablations.no_distill"),
        ("version: 2\n", "version"),
        ("train: 5\n", "train"),
    ],
)
def test_invalid_values(text, field):
    with pytest.raises(ConfigParseError) as info:
        parse_config(text)
    assert info.value.field == field


def test_invalid_yaml_has_line():
    with pytest.raises(ConfigParseError) as info:
        parse_config("train:\n  epochs: [1,\n")
    assert info.value.line is not None


def test_missing_config(tmp_path):
    with pytest.raises(MissingInput):
        load_config(tmp_path / "nope.yaml")


def test_resolved_config_scales_stages():
    cfg = parse_config("train:\n  epochs: 200\n").resolved()
    assert (cfg.curriculum.stage1_end, cfg.curriculum.stage2_end) == (2, 20)
    assert cfg.train_config().curriculum.total_epochs == 200


def test_unknown_subcommand(capsys):
    assert dispatch(["bogus", "x.yaml"]) != 0
    err = capsys.readouterr().err
    assert "usage: hygdl" in err
    assert json.loads(err.strip().splitlines()[-1])["error"] == "UnknownCommand"
    assert dispatch([]) != 0


def test_error_line_is_machine_readable(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  nope: 1\n")
    assert dispatch(["pretrain", str(bad)]) == 1
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec == {"error": "ConfigParseError", "message": rec["message"], "field": "train.nope", "line": 2}
    assert dispatch(["probe", str(tmp_path / "missing.yaml")]) == 1


def test_diagnose_reference_table(capsys):
    assert dispatch(["diagnose", str(REFERENCE_SWEEP)]) == 0
    out = capsys.readouterr().out
    assert "peak_epoch=1000" in out and "rise_and_fall=true" in out and "final=12.57" in out


def test_pretrain_probe_diagnose_plot(tmp_path, capsys):
    cfg = _tiny(tmp_path, epochs=3)
    out = tmp_path / "run"
    assert dispatch(["pretrain", str(cfg)]) == 0
    for name in ("metrics.jsonl", "config.resolved.yaml", "manifest.json", "last.ckpt",
                 "checkpoints/epoch_0001.ckpt", "checkpoints/epoch_0003.ckpt"):
        assert (out / name).is_file(), name
    records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert records[0]["kind"] == "header"
    assert [r["epoch"] for r in records if r["kind"] == "epoch"] == [0, 1, 2]
    # the archived config reproduces the run's settings exactly
    assert load_config(out / "config.resolved.yaml") == load_config(cfg).resolved()

    assert dispatch(["probe", str(cfg)]) == 0
    assert (out / "probe_sweep.csv").is_file()
    assert dispatch(["diagnose", str(cfg)]) == 0
    assert set(json.loads((out / "diagnosis.json").read_text())) == {"in-domain", "ood"}
    assert dispatch(["plot", str(cfg)]) == 0
    assert (out / "probe_curves.png").stat().st_size > 0
    assert (out / "reconstructions.png").stat().st_size > 0


def test_metrics_streams_are_byte_identical(tmp_path):
    a, b = _tiny(tmp_path, "a"), _tiny(tmp_path, "b")
    assert dispatch(["pretrain", str(a)]) == 0
    assert dispatch(["pretrain", str(b)]) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_pretrain_resumes_from_last_checkpoint(tmp_path):
    from hygdl.runs import pretrain

    full = _tiny(tmp_path, "full", epochs=3)
    cut = _tiny(tmp_path, "cut", epochs=3)
    pretrain(load_config(full))
    pretrain(load_config(cut), max_steps=5)
    pretrain(load_config(cut))
    assert (tmp_path / "full" / "metrics.jsonl").read_text() == (tmp_path / "cut" / "metrics.jsonl").read_text()


def test_console_script_runs():
    exe = shutil.which("hygdl")
    cmd = [exe] if exe else [sys.executable, "-m", "hygdl.cli"]
    proc = subprocess.run(cmd + ["diagnose", str(REFERENCE_SWEEP)], capture_output=True, text=True)
    assert proc.returncode == 0 and "peak_epoch=1000" in proc.stdout
    proc = subprocess.run(cmd + ["nonsense"], capture_output=True, text=True)
    assert proc.returncode != 0 and "usage" in proc.stderr
