import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mhc_hsi import __version__
from mhc_hsi.cli import main
from mhc_hsi.images import read_pgm
from mhc_hsi.metrics import metrics_from_confusion

TINY = ["--d", "8", "--blocks", "1", "--groups", "2", "--state-size", "2", "--quiet"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "scene.hsic"
    assert main(["synth", "--h", "8", "--w", "8", "--k", "3", "--c", "12", "--seed", "1", "--out", str(path)]) == 0
    return root, path


@pytest.fixture(scope="module")
def trained(data):
    root, path = data
    out = root / "run"
    assert main(["train", "--data", str(path), "--out", str(out), "--steps", "60", "--lr", "0.01",
                 "--train-fraction", "0.3", *TINY]) == 0
    return out


def test_synth_writes_cube_and_manifest(data):
    root, path = data
    manifest = json.loads((root / "scene.hsic.manifest.json").read_text())
    assert manifest["version"] == __version__ and manifest["seed"] == 1
    assert manifest["args"]["k"] == 3


def test_train_outputs(trained):
    assert (trained / "checkpoint.mhc").stat().st_size > 0
    rows = list(csv.reader((trained / "history.csv").open()))
    assert rows[0] == ["step", "loss", "train_oa"] and len(rows) == 61
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config"]["hidden_dim"] == 8 and manifest["seed"] == 0
    assert manifest["version"] == __version__


def test_eval_outputs(data, trained, tmp_path):
    _, path = data
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(path), "--ckpt", str(trained / "checkpoint.mhc"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["train"]["oa"] == 100.0
    for part in ("train", "test"):
        # external recomputation from the emitted confusion matrix
        cm = np.array(report[part]["confusion_matrix"])
        m = metrics_from_confusion(cm)
        assert abs(m.oa - report[part]["oa"]) < 0.01
        assert abs(m.aa - report[part]["aa"]) < 0.01
        assert abs(m.kappa - report[part]["kappa"]) < 0.01
        assert cm.sum() == report[part]["n_pixels"]
    classmap = read_pgm(out / "classmap.pgm")
    assert classmap.size == 64 and set(np.unique(classmap)) <= {1, 2, 3}
    assert (out / "classmap.ppm").read_bytes().startswith(b"P6\n8 8\n255\n")
    rows = list(csv.DictReader((out / "per_class.csv").open()))
    assert [int(r["class"]) for r in rows] == [1, 2, 3]
    assert sum(int(r["test_count"]) for r in rows) == report["test"]["n_pixels"]


def test_eval_config_mismatch(data, trained, tmp_path, capsys):
    root, _ = data
    other = root / "other.hsic"
    assert main(["synth", "--h", "4", "--w", "4", "--k", "2", "--c", "10", "--out", str(other)]) == 0
    code = main(["eval", "--data", str(other), "--ckpt", str(trained / "checkpoint.mhc"), "--out", str(tmp_path / "e")])
    assert code == 2
    err = capsys.readouterr().err
    assert "checkpoint: D=8 n=5 C=12" in err and "data:       C=10" in err
    code = main(["eval", "--data", str(data[1]), "--ckpt", str(trained / "checkpoint.mhc"), "--out",
                 str(tmp_path / "e"), "--n", "4"])
    assert code == 2


def test_export_hres(data, trained, tmp_path):
    _, path = data
    out = tmp_path / "maps"
    assert main(["export-hres", "--ckpt", str(trained / "checkpoint.mhc"), "--data", str(path), "--layer", "0",
                 "--sublayer", "ffn", "--out", str(out)]) == 0
    pgms = sorted(p.name for p in out.glob("H0_*_to_*.pgm"))
    assert len(pgms) == 25 and "H0_VIS_to_FULL.pgm" in pgms
    rows = list(csv.DictReader((out / "H0_class_means.csv").open()))
    labels = np.load(out / "H0_raw.npz")
    assert len(rows) == 25 * 3
    labeled = None
    for name in {r["map"] for r in rows}:
        mine = [r for r in rows if r["map"] == name]
        total = sum(int(r["count"]) for r in mine)
        labeled = total if labeled is None else labeled
        assert total == labeled == 64
        raw = labels[name]
        assert np.all((raw > 0) & (raw <= 1))


def test_untrained_maps_are_flat_gray(data, tmp_path):
    _, path = data
    run = tmp_path / "zero"
    assert main(["train", "--data", str(path), "--out", str(run), "--steps", "0", *TINY]) == 0
    out = tmp_path / "maps"
    assert main(["export-hres", "--ckpt", str(run / "checkpoint.mhc"), "--data", str(path), "--layer", "0",
                 "--out", str(out)]) == 0
    for p in out.glob("*.pgm"):
        assert np.all(read_pgm(p) == 128)


def test_exit_codes(data, trained, tmp_path, capsys):
    _, path = data
    assert main(["train", "--data", str(path), "--out", str(tmp_path / "a"), "--rho", "1.5"]) == 2
    assert "rho must be in (0,1]" in capsys.readouterr().err
    assert main(["train", "--data", str(path), "--out", str(tmp_path / "b"), "--n", "4"]) == 2
    assert main(["train", "--data", str(tmp_path / "missing.hsic"), "--out", str(tmp_path / "c")]) == 3
    bad = tmp_path / "bad.hsic"
    bad.write_bytes(path.read_bytes()[:100])
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "d")]) == 3
    assert main(["export-hres", "--ckpt", str(trained / "checkpoint.mhc"), "--data", str(path), "--layer", "5",
                 "--out", str(tmp_path / "e")]) == 2
    with np.errstate(all="ignore"):
        code = main(["train", "--data", str(path), "--out", str(tmp_path / "f"), "--steps", "5", "--lr", "1e300",
                     *TINY])
    assert code == 4
    assert "non-finite" in capsys.readouterr().err


def test_thread_variable(data, tmp_path, monkeypatch):
    _, path = data
    monkeypatch.setenv("MHC_THREADS", "lots")
    assert main(["train", "--data", str(path), "--out", str(tmp_path / "a"), "--steps", "1", *TINY]) == 2
    monkeypatch.setenv("MHC_THREADS", "0")
    assert main(["train", "--data", str(path), "--out", str(tmp_path / "b"), "--steps", "1", *TINY]) == 0


def test_duplicate_stream_runs(data, tmp_path):
    _, path = data
    for n in (2, 4):
        out = tmp_path / f"dup{n}"
        assert main(["train", "--data", str(path), "--out", str(out), "--streams", "duplicate", "--n", str(n),
                     "--steps", "2", *TINY]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["n_streams"] == n and manifest["config"]["stream_mode"] == "duplicate"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mhc_hsi", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
