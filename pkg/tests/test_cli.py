import csv
import re

import pytest

from solvis import synthgen as sg
from solvis.cli import EXIT_FAIL1, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from solvis.config import Config
from solvis.orchestrator import Rig


@pytest.fixture(scope="module")
def model_file(model, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.txt"
    model.save(path)
    return path


def simulate(out, *extra):
    return main(["simulate", "--out", str(out), *extra])


def analyze(scene_dir, preset, model_file):
    return main(["analyze", "--white", str(scene_dir / f"preset{preset}_white.png"),
                 "--check", str(scene_dir / f"preset{preset}_check.png"), "--model", str(model_file)])


@pytest.mark.parametrize("preset, code, label", [("A", EXIT_OK, "Pass"), ("D", EXIT_FAIL1, "Fail1")])
def test_analyze_exit_codes(tmp_path, model_file, capsys, preset, code, label):
    assert simulate(tmp_path, "--preset", preset, "--seed", "5") == EXIT_OK
    capsys.readouterr()
    assert analyze(tmp_path, preset, model_file) == code
    out = capsys.readouterr().out
    assert re.search(r"^config hash: [0-9a-f]+$", out, re.M)
    assert out.splitlines()[1] == label
    assert "superposition_ratio" in out


def test_analyze_with_ground_truth(tmp_path, model_file, capsys):
    simulate(tmp_path, "--preset", "B", "--seed", "5")
    code = main(["analyze", "--white", str(tmp_path / "presetB_white.png"), "--check",
                 str(tmp_path / "presetB_check.png"), "--model", str(model_file),
                 "--ground-truth", str(tmp_path / "presetB_grid.png")])
    assert code == 11
    assert "Fail2" in capsys.readouterr().out


def test_missing_file_is_a_usage_error(tmp_path, model_file, capsys):
    code = main(["analyze", "--white", str(tmp_path / "nope.png"), "--check", str(tmp_path / "nope.png"),
                 "--model", str(model_file)])
    assert code == EXIT_USAGE
    assert "no such file" in capsys.readouterr().err


def test_unknown_config_key_is_a_usage_error(tmp_path):
    assert simulate(tmp_path, "--set", "svm.bogus=1") == EXIT_USAGE


def test_config_file_changes_the_hash(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[svm]\nC = 2.0\n")
    simulate(tmp_path / "out", "--config", str(cfg))
    out = capsys.readouterr().out
    assert f"config hash: {Config().with_items({'svm.C': 2.0}).hash()}" in out


def test_undecodable_image_is_a_runtime_error(tmp_path, model_file):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    code = main(["analyze", "--white", str(bad), "--check", str(bad), "--model", str(model_file)])
    assert code == EXIT_RUNTIME


def test_validate_needs_two_folds(tmp_path, capsys):
    manifest = tmp_path / "m.csv"
    manifest.write_text("case_id,white_png,check_png,label,scenario,augmentation\n")
    assert main(["validate", "--manifest", str(manifest), "--folds", "1"]) == EXIT_USAGE
    assert "--folds" in capsys.readouterr().err


def test_simulate_series(tmp_path):
    assert simulate(tmp_path, "--series", "4", "--preset", "B") == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "manifest.csv")))
    assert len(rows) == 4 and rows[-1]["label"] == "Pass"
    assert (tmp_path / "series.json").exists()


def test_simulate_train_validate_loop(tmp_path, capsys):
    data = tmp_path / "data"
    assert simulate(data, "--dataset", "--counts", "Fail1=6,Fail2=6,Pass=6", "--seed", "3") == EXIT_OK
    manifest = str(data / "manifest.csv")
    model = tmp_path / "model.txt"
    assert main(["train", "--manifest", manifest, "--augment", "--out", str(model),
                 "--features", str(tmp_path / "features.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[in_sample]" in out and "trained on 72 cases" in out
    assert model.exists() and (tmp_path / "features.csv").exists()
    assert main(["validate", "--manifest", manifest, "--augment", "--folds", "4", "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[cv]" in out
    mean = float(re.search(r"^mean\s+([\d.]+)%", out, re.M).group(1))
    assert mean >= 80.0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["data", "features.csv", "model.txt"]


def test_serve_against_emulators(tmp_path, model_file, capsys):
    steps = sg.dissolution_series(sg.category_preset("B", 3), 3).steps
    with Rig.start(list(steps)) as rig:
        code = main(["serve", "--display", rig.display.endpoint, "--camera", rig.camera.endpoint,
                     "--model", str(model_file), "--count", "3", "--minutes-per-step", "5",
                     "--out", str(tmp_path / "run")])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "run" / "trend.csv")))
    assert [r["status"] for r in rows] == ["ok"] * 3 and rows[-1]["label"] == "Pass"
    ratios = [float(r["superposition_ratio"]) for r in rows]
    assert ratios == sorted(ratios)
    assert (tmp_path / "run" / "trend.svg").read_text().startswith("<svg")
    assert len(list((tmp_path / "run" / "records").iterdir())) == 3
    assert "3 records, 0 failures" in capsys.readouterr().out


def test_serve_with_nobody_listening(tmp_path, model_file):
    code = main(["serve", "--display", "127.0.0.1:1", "--camera", "127.0.0.1:1", "--model", str(model_file),
                 "--out", str(tmp_path)])
    assert code == EXIT_RUNTIME


def test_emulate_runs_for_a_while(capsys):
    assert main(["emulate", "rig", "--display-port", "0", "--camera-port", "0", "--duration", "0.3"]) == EXIT_OK
    assert capsys.readouterr().out.count("listening on") == 2
