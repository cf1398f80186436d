import csv
import json

import numpy as np
import pytest

from adsvfd.cli import main
from adsvfd.geometry import WeightedPointCloud, tube_model
from adsvfd.meshio import write_cloud_ply
from builders import fibonacci_sphere

TINY = ["--w-fa", "8", "--l-fa", "2", "--w-df", "8", "--l-df", "2", "--n-e", "1",
        "--n-z", "16", "--M", "60", "--dtype", "float64"]


@pytest.fixture
def shapes(tmp_path):
    u = fibonacci_sphere(80)
    paths = []
    for name, axes in (("tpl", (1.0, 1.0, 1.0)), ("s1", (1.2, 1.0, 0.9)), ("s2", (0.9, 1.1, 1.0))):
        n = u / np.array(axes)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        p = tmp_path / f"{name}.ply"
        write_cloud_ply(p, WeightedPointCloud(u * axes, np.full(80, 1 / 80), n))
        paths.append(str(p))
    return paths


@pytest.fixture
def trained(tmp_path, shapes):
    out = tmp_path / "run"
    code = main(["train", "--template", shapes[0], "--sources", shapes[1], shapes[2],
                 "--epochs", "2", "--out", str(out), *TINY])
    assert code == 0
    return out


def test_train_smoke(trained):
    assert (trained / "model.ckpt").exists()
    rows = list(csv.DictReader(open(trained / "loss.csv")))
    assert len(rows) == 2
    summary = json.loads((trained / "summary.json").read_text())
    s = summary["shapes"]["s1"]
    assert {"direct_fld_max", "inverse_bld_mean"} <= set(s["physical"]) & set(s["unit"])


def test_dump_config_defaults(capsys):
    assert main(["train", "--dump-config", "--epochs", "7"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["train.K"]["value"] == 10 and cfg["train.M"]["value"] == 2000
    assert cfg["train.batch_size"]["value"] == 8
    assert cfg["train.epochs"] == {"value": 7, "source": "flag"}
    assert cfg["train.K"]["source"] == "default"


def test_config_file_precedence(tmp_path, capsys):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train.epochs": 3, "train.K": 5}))
    assert main(["train", "--config", str(f), "--K", "6", "--dump-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["train.epochs"] == {"value": 3, "source": "file"}
    assert cfg["train.K"] == {"value": 6, "source": "flag"}
    f.write_text(json.dumps({"train.bogus": 1}))
    assert main(["train", "--config", str(f), "--dump-config"]) == 1


def test_missing_template_names_field(capsys, shapes):
    assert main(["train", "--sources", shapes[1]]) == 1
    assert "paths.template" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:Sinkhorn stopped")
def test_metrics_identical(shapes, capsys):
    assert main(["metrics", shapes[1], shapes[1], "--epsilon", "1e-2"]) == 0
    out = json.loads(capsys.readouterr().out)
    for k in ("cd", "cdw", "pcd"):
        assert out[k] == 0.0
    assert abs(out["ncd"]) < 1e-12
    assert out["fld_bld"]["fld_max"] == 0.0


def test_metrics_missing_normals(tmp_path, capsys):
    p = tmp_path / "a.ply"
    write_cloud_ply(p, WeightedPointCloud(np.random.default_rng(0).random((5, 3)), np.full(5, 0.2)))
    assert main(["metrics", str(p), str(p), "--measure", "ncd"]) == 1
    err = capsys.readouterr().err
    assert "normals" in err and "a.ply" in err


def test_corrupted_checkpoint(tmp_path, trained, shapes, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage!" + (trained / "model.ckpt").read_bytes()[8:])
    assert main(["infer", "--checkpoint", str(bad), "--shape", shapes[1],
                 "--out", str(tmp_path / "inf")]) == 3
    assert "invalid container" in capsys.readouterr().err


def test_infer_outputs(tmp_path, trained, shapes):
    out = tmp_path / "inf"
    assert main(["infer", "--checkpoint", str(trained / "model.ckpt"), "--shape", shapes[1],
                 "--out", str(out), "--set", "train.infer_adam_epochs=2",
                 "--set", "train.infer_lbfgs_epochs=1", "--set", "train.infer_lbfgs_iters=2"]) == 0
    d = json.loads((out / "diagnostics.json").read_text())
    for tag in ("unit", "physical"):
        assert {"direct_fld_max", "direct_fld_mean", "inverse_bld_max"} <= set(d[tag])
    assert len(json.loads((out / "code.json").read_text())["code"]) == 16
    assert (out / "direct.ply").exists() and (out / "inverse.ply").exists()


def test_generate_modes(tmp_path, trained):
    ck = str(trained / "model.ckpt")
    out = tmp_path / "gen"
    assert main(["generate", "--checkpoint", ck, "--mode", "interpolate", "--ids", "s1", "s2",
                 "--t", "0.25", "0.5", "0.75", "--out", str(out)]) == 0
    assert len(list(out.glob("interp_*.ply"))) == 3
    assert (out / "pca.csv").exists() and (out / "pca.svg").exists()
    out0 = tmp_path / "gen0"
    assert main(["generate", "--checkpoint", ck, "--n", "0", "--out", str(out0)]) == 0
    assert list(out0.glob("*.ply")) == [] and (out0 / "pca.svg").exists()
    assert main(["generate", "--checkpoint", ck, "--mode", "interpolate", "--ids", "s1", "zz",
                 "--out", str(out)]) == 1


def test_map_and_geodesic(tmp_path, trained, shapes):
    ck = str(trained / "model.ckpt")
    assert main(["map", "--checkpoint", ck, "--shape-id", "s1", "--source", shapes[1],
                 "--out", str(tmp_path / "m.ply")]) == 0
    assert main(["geodesic", "--checkpoint", ck, "--shape-id", "s1", "--K", "4",
                 "--out", str(tmp_path / "geo")]) == 0
    assert len(list((tmp_path / "geo").glob("step_*.ply"))) == 5


def test_augment_two_tubes(tmp_path):
    d = tmp_path / "models"
    d.mkdir()
    for name, r in (("a", 0.1), ("b", 0.13)):
        (d / f"{name}.json").write_text(tube_model(radius=r).to_json())
    runs = []
    for k in range(2):
        out = tmp_path / f"aug{k}"
        assert main(["augment", "--models", str(d), "--n", "1", "--seed", "3",
                     "--out", str(out)]) == 0
        runs.append(out)
    rows = list(csv.DictReader(open(runs[0] / "report.csv")))
    assert rows[-1]["accepted"] == "True"
    assert {"C", "L", "min_sj", "bottom_decile"} <= set(rows[0])
    a = (runs[0] / "augmented_0000.ply").read_bytes()
    assert a == (runs[1] / "augmented_0000.ply").read_bytes()


def test_augment_needs_two_models(tmp_path):
    d = tmp_path / "models"
    d.mkdir()
    (d / "a.json").write_text(tube_model().to_json())
    assert main(["augment", "--models", str(d), "--out", str(tmp_path / "o")]) == 1
