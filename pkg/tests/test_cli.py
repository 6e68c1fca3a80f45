import json

import numpy as np
import pytest

from asiftmerge.cli import format_rate, iou, main
from asiftmerge.errors import DimensionMismatchError
from asiftmerge.imageio import read_color, read_mask, write_color, write_mask
from synth import product_shot

GRID = ["--max-tilt-exponent", "2"]


# -- helpers -----------------------------------------------------------------

def test_iou_examples():
    a = np.array([[True, True]])
    assert iou(a, a) == 1.0
    assert iou(a, np.array([[True, False]])) == 0.5
    assert iou(np.array([[True, False]]), np.array([[False, True]])) == 0.0
    assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0
    with pytest.raises(DimensionMismatchError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


@pytest.mark.parametrize("d,n,text", [
    (26, 30, "86.66"), (28, 30, "93.33"), (29, 30, "96.66"),
    (0, 30, "0.00"), (30, 30, "100.00"), (23, 24, "95.83"), (22, 24, "91.66"),
    (21, 24, "87.50"), (20, 24, "83.33"), (1, 3, "33.33"), (2, 3, "66.66"),
])
def test_rate_truncates(d, n, text):
    assert format_rate(d, n) == text


# -- usage and error statuses --------------------------------------------------

def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["detect", "--model", "m"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["detect", "--model", "m", "--out", "o", "--metric", "cosine", "x.png"])
    assert exc.value.code == 1
    assert main(["detect", "--model", "m", "--out", "o", "--ratio", "1.5", "x.png"]) == 1


def test_missing_files_exit_two(tmp_path):
    assert main(["train", "--model", "n", "--out", str(tmp_path / "m"), str(tmp_path / "nope.png")]) == 2
    bad = tmp_path / "bad.asfm"
    bad.write_bytes(b"JUNK")
    img = tmp_path / "i.png"
    write_color(img, np.zeros((32, 32, 3), np.uint8))
    assert main(["detect", "--model", str(bad), "--out", str(tmp_path / "o"), str(img)]) == 2


def test_train_constant_image_fails(tmp_path):
    img = tmp_path / "flat.png"
    write_color(img, np.full((64, 64, 3), 100, np.uint8))
    assert main(["train", "--model", "flat", "--out", str(tmp_path / "m.asfm"), *GRID, str(img)]) == 2
    assert not (tmp_path / "m.asfm").exists()


# -- eval ----------------------------------------------------------------------

def _prediction_manifest(tmp_path, detected, tested):
    truth = np.zeros((8, 8), bool)
    truth[2:6, 2:6] = True
    write_mask(tmp_path / "truth.pgm", truth)
    write_mask(tmp_path / "hit.pgm", truth)
    write_mask(tmp_path / "miss.pgm", np.zeros((8, 8), bool))
    entries = [{"image": f"img{i}.png", "truth_mask": "truth.pgm",
                "prediction": "hit.pgm" if i < detected else "miss.pgm"} for i in range(tested)]
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(entries))
    return path


@pytest.mark.parametrize("d,n,text", [(26, 30, "86.66"), (0, 30, "0.00"), (30, 30, "100.00")])
def test_eval_rates(tmp_path, capsys, d, n, text):
    manifest = _prediction_manifest(tmp_path, d, n)
    assert main(["eval", "--manifest", str(manifest), "--name", "rack"]) == 0
    out = capsys.readouterr().out
    summary = json.loads(out[: out.index("}\n") + 2])
    assert summary == {"accuracy_rate": text, "dataset": "rack", "iou_threshold": 0.9,
                       "n_detected": d, "n_tested": n}
    assert f"{text} %" in out


def test_eval_needs_model_without_predictions(tmp_path):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps([{"image": "a.png", "truth_mask": "t.pgm"}]))
    assert main(["eval", "--manifest", str(manifest)]) == 1


@pytest.mark.parametrize("text", ["{", "[]", '[{"image": "a.png"}]', '{"image": "a"}'])
def test_eval_bad_manifest(tmp_path, text):
    manifest = tmp_path / "m.json"
    manifest.write_text(text)
    assert main(["eval", "--manifest", str(manifest)]) == 2


# -- train / detect round trip ------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    img, truth = product_shot(2)
    write_color(d / "shot.png", img)
    write_mask(d / "truth.pgm", truth)
    assert main(["train", "--model", "widget", "--out", str(d / "m.asfm"), *GRID, str(d / "shot.png")]) == 0
    return d


def test_model_file_header(trained):
    data = (trained / "m.asfm").read_bytes()
    assert data[:8] == b"ASFM\x01\x00\x00\x00"


def test_detect_on_training_image(trained):
    out = trained / "det"
    assert main(["detect", "--model", str(trained / "m.asfm"), "--out", str(out), *GRID,
                 "--truth", str(trained / "truth.pgm"), str(trained / "shot.png")]) == 0
    report = json.loads((trained / "det_report.json").read_text())
    assert report["found"] is True and report["iou"] >= 0.9 and report["full_detection"]
    assert report["model"] == "widget"
    assert report["params"]["merge"]["metric"] == "euclidean"
    assert report["params"]["asift"]["max_tilt_exponent"] == 2
    assert "timings" not in report
    mask = read_mask(trained / "det_mask.pgm")
    assert mask.sum() == report["object_pixels"] > 0
    overlay = read_color(trained / "det_overlay.png")
    green = np.all(overlay == (0, 255, 0), axis=2)
    assert green.any() and np.all(mask[green])
    lines = (trained / "det_contours.txt").read_text().splitlines()
    assert len(lines) >= 1


def test_detect_constant_image_not_found(trained, tmp_path):
    img = tmp_path / "flat.ppm"
    write_color(img, np.full((64, 64, 3), 30, np.uint8))
    assert main(["detect", "--model", str(trained / "m.asfm"), "--out", str(tmp_path / "x"), *GRID,
                 "--timings", str(img)]) == 0
    report = json.loads((tmp_path / "x_report.json").read_text())
    assert report["found"] is False and report["object_pixels"] == 0
    assert set(report["timings"]) == {"keypoints", "segmentation", "merging", "boundary"}
    assert not read_mask(tmp_path / "x_mask.pgm").any()
    assert (tmp_path / "x_contours.txt").read_text() == ""


def test_detect_options_echoed(trained, tmp_path):
    assert main(["detect", "--model", str(trained / "m.asfm"), "--out", str(tmp_path / "y"), *GRID,
                 "--fast", "--metric", "cityblock", "--min-seeds", "2", "--iou-threshold", "0.8",
                 str(trained / "shot.png")]) == 0
    params = json.loads((tmp_path / "y_report.json").read_text())["params"]
    assert params["fast"] is True and params["iou_threshold"] == 0.8
    assert params["merge"]["metric"] == "cityblock" and params["merge"]["min_seed_keypoints"] == 2


def test_eval_runs_detection(trained, tmp_path, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps([{"image": str(trained / "shot.png"),
                                     "truth_mask": str(trained / "truth.pgm")}]))
    assert main(["eval", "--model", str(trained / "m.asfm"), "--manifest", str(manifest), *GRID,
                 "--out-dir", str(tmp_path / "ev")]) == 0
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert summary["n_detected"] == 1 and summary["accuracy_rate"] == "100.00"
    assert (tmp_path / "ev" / "0000_mask.pgm").exists()
