import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from oseg import __version__
from oseg.cli import run
from oseg.data import DEFAULT_PALETTE, load_image, load_mask, save_image, save_mask
from oseg.experiment import SAExperimentConfig, run_sa_experiment
from oseg.viz import render_overlay

PALETTE = [c for _, _, c in DEFAULT_PALETTE]


def schema(name: str) -> dict:
    return json.loads(resources.files("oseg").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(doc, name: str) -> None:
    jsonschema.validate(doc, schema(name))


@pytest.fixture
def masks(tmp_path, rng):
    truth = rng.integers(0, 6, size=(32, 32)).astype(np.uint8)
    pred = truth.copy()
    pred[:8] = (pred[:8] + 1) % 6
    save_mask(tmp_path / "t.png", truth)
    save_mask(tmp_path / "p.png", pred)
    return tmp_path / "p.png", tmp_path / "t.png"


# ---------------------------------------------------------------- exit codes

def test_no_arguments_is_usage_error(capsys):
    assert run([]) == 2
    assert "subcommand" in capsys.readouterr().err


def test_unknown_subcommand_and_bad_flag():
    assert run(["paint-it-black"]) == 2
    assert run(["evaluate", "--pred", "x.png"]) == 2


def test_version(capsys):
    assert run(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "oseg.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "oseg.cli"], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == ""


def test_missing_input_is_runtime_failure(tmp_path, capsys):
    code = run(["simulate-sensor", "--model", "grayscale", "--in", str(tmp_path / "none.png"),
                "--out", str(tmp_path / "o.png")])
    assert code == 1 and "error" in capsys.readouterr().err


def test_missing_out_is_usage_error(tmp_path):
    save_image(tmp_path / "a.png", np.zeros((4, 4, 3), np.uint8))
    assert run(["simulate-sensor", "--model", "grayscale", "--in", str(tmp_path / "a.png")]) == 2


# ---------------------------------------------------------------- reports

def test_evaluate_prints_report(masks, capsys):
    pred, truth = masks
    assert run(["evaluate", "--pred", str(pred), "--truth", str(truth), "--classes", "6"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"miou", "macro_f1"} <= set(report)
    validate(report, "evaluation_report")


def test_evaluate_out_file_and_config_echo(masks, tmp_path, capsys):
    pred, truth = masks
    out = tmp_path / "r.json"
    argv = ["evaluate", "--pred", str(pred), "--truth", str(truth), "--classes", "6", "--out", str(out)]
    assert run(argv) == 0
    assert capsys.readouterr().out == ""
    validate(json.loads(out.read_text()), "evaluation_report")
    echo = json.loads((tmp_path / "r.json.config.json").read_text())
    validate(echo, "config_echo")
    assert echo["subcommand"] == "evaluate" and echo["argv"] == argv and echo["flags"]["classes"] == 6


def test_evaluate_rejects_out_of_range_truth(masks, capsys):
    pred, truth = masks
    assert run(["evaluate", "--pred", str(pred), "--truth", str(truth), "--classes", "3"]) == 1


def test_count_buildings(tmp_path, capsys):
    truth = np.zeros((16, 16), np.uint8)
    truth[1:4, 1:4] = 1
    truth[8:12, 8:12] = 1
    pred = truth.copy()
    pred[14, 0] = 1
    save_mask(tmp_path / "t.png", truth)
    save_mask(tmp_path / "p.png", pred)
    assert run(["count-buildings", "--pred", str(tmp_path / "p.png"), "--truth", str(tmp_path / "t.png")]) == 0
    report = json.loads(capsys.readouterr().out)
    validate(report, "building_count")
    assert report == {"pred_count": 3, "truth_count": 2, "difference": 1}


def test_threads_flag_and_environment(masks, monkeypatch, capsys):
    pred, truth = masks
    base = ["evaluate", "--pred", str(pred), "--truth", str(truth), "--classes", "6"]
    assert run(base + ["--threads", "1"]) == 0
    assert run(base + ["--threads", "0"]) == 2
    monkeypatch.setenv("OSEG_THREADS", "1")
    assert run(base) == 0
    monkeypatch.setenv("OSEG_THREADS", "many")
    assert run(base) == 2


# ---------------------------------------------------------------- image subcommands

def test_simulate_sensor_and_overlay(tmp_path, rng):
    img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    save_image(tmp_path / "a.png", img)
    assert run(["simulate-sensor", "--model", "brg1", "--in", str(tmp_path / "a.png"),
                "--out", str(tmp_path / "b.png")]) == 0
    assert load_image(tmp_path / "b.png")[0, 0].tolist() == [img[0, 0, 2], img[0, 0, 0], img[0, 0, 1]]
    mask = rng.integers(0, 6, size=(16, 16)).astype(np.uint8)
    save_mask(tmp_path / "m.png", mask)
    assert run(["overlay", "--image", str(tmp_path / "a.png"), "--mask", str(tmp_path / "m.png"),
                "--opacity", "1", "--out", str(tmp_path / "o.png")]) == 0
    out = load_image(tmp_path / "o.png")
    assert np.array_equal(out[mask == 0], img[mask == 0])
    assert np.array_equal(out[mask == 2], np.tile(PALETTE[2], ((mask == 2).sum(), 1)))


def test_generate_train_infer_pipeline(tmp_path):
    data = tmp_path / "data"
    assert run(["generate-synthetic", "--count", "2", "--test-count", "1", "--out-dir", str(data)]) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    validate(manifest, "manifest")
    assert (data / "config.json").exists()
    weights = tmp_path / "seg.bin"
    assert run(["train-seg", "--manifest", str(data / "manifest.json"), "--steps", "2", "--filters", "4",
                "--out", str(weights), "--loss-log", str(tmp_path / "loss.jsonl")]) == 0
    for line in (tmp_path / "loss.jsonl").read_text().splitlines():
        validate(json.loads(line), "segmenter_loss_line")
    assert run(["infer", "--weights", str(weights), "--in", str(data / "images" / "scene_0002.png"),
                "--out", str(tmp_path / "pred.png")]) == 0
    assert load_mask(tmp_path / "pred.png").shape == (64, 64)


def test_train_adapt_and_translate(tmp_path, rng):
    for d in ("src", "tgt"):
        (tmp_path / d).mkdir()
        save_image(tmp_path / d / "a.png", rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8))
    w = tmp_path / "tr.bin"
    assert run(["train-adapt", "--source-dir", str(tmp_path / "src"), "--target-dir", str(tmp_path / "tgt"),
                "--epochs", "1", "--base-filters", "4", "--out", str(w)]) == 0
    for line in (tmp_path / "tr.bin.loss.jsonl").read_text().splitlines():
        validate(json.loads(line), "translator_loss_line")
    assert run(["translate", "--weights", str(w), "--direction", "target_to_source",
                "--in", str(tmp_path / "src" / "a.png"), "--out", str(tmp_path / "x.png")]) == 0
    assert load_image(tmp_path / "x.png").shape == (32, 32, 3)
    assert run(["train-adapt", "--source-dir", str(tmp_path / "nope"), "--target-dir", str(tmp_path / "tgt"),
                "--epochs", "1", "--out", str(w)]) == 1


# ---------------------------------------------------------------- overlay arithmetic

def test_overlay_examples(rng):
    img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    mask = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
    assert np.array_equal(render_overlay(img, mask, PALETTE, 0.0), img)
    full = render_overlay(img, mask, PALETTE, 1.0)
    assert np.array_equal(full[mask == 1], np.tile(PALETTE[1], ((mask == 1).sum(), 1)))
    half = render_overlay(img, mask, PALETTE, 0.5)
    for y in range(8):
        for x in range(8):
            for c in range(3):
                want = int(img[y, x, c]) if mask[y, x] == 0 else \
                    (int(img[y, x, c]) + PALETTE[mask[y, x]][c] + 1) // 2
                assert half[y, x, c] == want


def test_overlay_errors(rng):
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(ValueError, match="palette"):
        render_overlay(img, np.full((4, 4), 3, np.uint8), PALETTE[:2])
    with pytest.raises(ValueError):
        render_overlay(img, np.zeros((3, 4), np.uint8), PALETTE)
    ignored = np.full((4, 4), 255, np.uint8)
    assert np.array_equal(render_overlay(img, ignored, PALETTE[:1], 1.0), img)


# ---------------------------------------------------------------- sa-experiment contract

def test_sa_experiment_rows_and_determinism():
    cfg = dict(seed=1, train_scenes=1, target_scenes=1, test_scenes=1, seg_filters=4, seg_steps=2,
               translator_filters=4, translator_epochs=1)
    report = run_sa_experiment(SAExperimentConfig(**cfg))
    validate(report, "sa_report")
    rows = {(r["sensor"], r["adaptation"]) for r in report["rows"]}
    assert rows == {(s, a) for s in ("grayscale", "brg1", "brg2") for a in (False, True)}
    again = run_sa_experiment(SAExperimentConfig(**cfg))
    assert json.dumps(report, sort_keys=True) == json.dumps(again, sort_keys=True)


def test_sa_experiment_config_validation():
    with pytest.raises(ValueError):
        run_sa_experiment(SAExperimentConfig(mode="sideways"))
    with pytest.raises(ValueError):
        run_sa_experiment(SAExperimentConfig(sensors=("infrared",)))
