import csv
import hashlib
import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from latent_denoising import gradcheck as gc
from latent_denoising.analysis import FeatureDump
from latent_denoising.cli import main
from latent_denoising.formats import read_checkpoint, read_feature_dump, write_feature_dump
from latent_denoising.losses import LossValue, loss_con
from latent_denoising.pnm import write_ppm
from oracles import fixed_test_images

TINY = "steps = {steps}\ndataset_size = 32\nprobe_size = 10\nprobe_every = 2\nbatch_size = 4\n"


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# train

def test_train_missing_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_train_invalid_config(tmp_path):
    (tmp_path / "c.cfg").write_text("rho_nn = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_train_zero_steps(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY.format(steps=0))
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "metrics.csv").read_text() == "step,lang,rec,rel,con,whd,total\n"
    assert len((tmp_path / "o" / "probe.csv").read_text().splitlines()) == 2


def test_train_artifacts_and_determinism(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY.format(steps=6))
    for name in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / name)]) == 0
    for artifact in ("metrics.csv", "probe.csv", "checkpoint.ldck", "features.ldfd", "attention.json"):
        assert digest(tmp_path / "a" / artifact) == digest(tmp_path / "b" / artifact), artifact
    rows = list(csv.DictReader(open(tmp_path / "a" / "metrics.csv")))
    assert [int(r["step"]) for r in rows] == list(range(6))
    tensors, text = read_checkpoint(tmp_path / "a" / "checkpoint.ldck")
    assert "steps = 6" in text and "e_tau" in tensors
    dump = read_feature_dump(tmp_path / "a" / "features.ldfd")
    assert [i for i, _ in dump.layers] == [0, 1, 2, 3, 4] and dump.num_rows == 10
    report = json.loads((tmp_path / "a" / "attention.json").read_text())
    assert 0 < report["attention_entropy"] <= np.log(16) + 1e-12 and report["layer"] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_exit_3(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY.format(steps=2) + "lr = 1e308\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o")]) == 3


# corrupt

def test_corrupt_empty_and_rerun(tmp_path):
    (tmp_path / "in").mkdir()
    assert main(["corrupt", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "o"), "--family", "noise", "--severity", "3", "--seed", "1"]) == 0
    assert (tmp_path / "o" / "manifest.csv").read_text() == "id,family,subtype,severity,sha256\n"
    for i, img in enumerate(fixed_test_images()):
        write_ppm(tmp_path / "in" / f"{i}.ppm", img)
    args = ["--family", "blur", "--severity", "5", "--seed", "7"]
    assert main(["corrupt", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["corrupt", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "b"), *args]) == 0
    assert digest(tmp_path / "a" / "manifest.csv") == digest(tmp_path / "b" / "manifest.csv")


@pytest.mark.parametrize("extra", [["--severity", "6"], ["--severity", "0"]])
def test_corrupt_invalid_severity(tmp_path, extra):
    (tmp_path / "in").mkdir()
    assert main(["corrupt", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "o"), "--family", "noise", *extra]) == 2


def test_corrupt_missing_dir(tmp_path):
    assert main(["corrupt", "--in", str(tmp_path / "x"), "--out", str(tmp_path / "o"), "--family", "noise", "--severity", "1"]) == 2


# analyze

@pytest.fixture
def blob_dump(tmp_path):
    rng = np.random.default_rng(0)
    centers = np.eye(3, 6) * 10
    x = np.concatenate([c + rng.normal(scale=0.3, size=(40, 6)) for c in centers]).astype(np.float32)
    y = np.repeat(np.arange(3), 40)
    path = tmp_path / "blobs.ldfd"
    write_feature_dump(path, FeatureDump([(0, x), (1, x[:, :3] * 2)], y))
    return path


def test_analyze_cka_self(blob_dump, tmp_path):
    out = tmp_path / "r.json"
    assert main(["analyze", "--dump", str(blob_dump), "--reference", str(blob_dump), "--mode", "cka", "--out", str(out)]) == 0
    layers = json.loads(out.read_text())["layers"]
    assert all(abs(v["cka"] - 1.0) <= 1e-12 for v in layers.values())


def test_analyze_knn_stdout(blob_dump, capsys):
    assert main(["analyze", "--dump", str(blob_dump), "--mode", "knn"]) == 0
    layers = json.loads(capsys.readouterr().out)["layers"]
    assert all(v["knn"] == 1.0 for v in layers.values())


def test_analyze_spectrum_csv(blob_dump, tmp_path):
    csv_path = tmp_path / "s.csv"
    assert main(["analyze", "--dump", str(blob_dump), "--mode", "spectrum", "--out", str(tmp_path / "s.json"), "--csv", str(csv_path)]) == 0
    rows = list(csv.DictReader(open(csv_path)))
    for layer in ("0", "1"):
        values = [float(r["value"]) for r in rows if r["layer"] == layer]
        assert values[0] == 1.0 and values == sorted(values, reverse=True)


def test_analyze_cka_row_mismatch(blob_dump, tmp_path):
    other = tmp_path / "small.ldfd"
    write_feature_dump(other, FeatureDump([(0, np.ones((5, 2), np.float32))], np.zeros(5)))
    assert main(["analyze", "--dump", str(blob_dump), "--reference", str(other), "--mode", "cka"]) == 2


def test_analyze_unreadable(tmp_path):
    (tmp_path / "bad.ldfd").write_bytes(b"junk")
    assert main(["analyze", "--dump", str(tmp_path / "bad.ldfd"), "--mode", "rank"]) == 2


# gradcheck

def test_gradcheck_passes_and_repeats(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    first = capsys.readouterr().out
    assert main(["gradcheck", "--seed", "0"]) == 0
    assert capsys.readouterr().out == first
    assert all(name in first for name in ("rec", "rel", "con", "composite"))


def test_gradcheck_mutation_exit_1(monkeypatch, capsys):
    real = gc.default_loss_fns

    def mutated():
        fns = real()
        fns["con"] = lambda s, t: LossValue(loss_con(s, t)[0], -loss_con(s, t)[1])
        return fns

    monkeypatch.setattr(gc, "default_loss_fns", mutated)
    assert main(["gradcheck"]) == 1
    assert "con" in capsys.readouterr().err


# plot

def test_plot_command(tmp_path):
    (tmp_path / "m.csv").write_text("step,lang,total\n0,2,2\n1,1,1.5\n")
    assert main(["plot", "--metrics", str(tmp_path / "m.csv"), "--out", str(tmp_path / "m.svg")]) == 0
    ET.fromstring((tmp_path / "m.svg").read_text())
    (tmp_path / "bad.csv").write_text("step,lang\n0,x\n")
    assert main(["plot", "--metrics", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "b.svg")]) == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--mode", "cka"])
    assert exc.value.code == 2


def test_console_script_module_entry(tmp_path):
    out = subprocess.run([sys.executable, "-m", "latent_denoising.cli", "plot", "--metrics", str(tmp_path / "none.csv"), "--out", str(tmp_path / "x.svg")])
    assert out.returncode == 2
