import csv
import json

import numpy as np
import pytest

from s3vdc import cli
from s3vdc.errors import NonFiniteLossError

CONFIG = """
[data]
source = "blobs"
n = 1200
clusters = 2
dim = 4
seed = 3

[model]
clusters = 2
latent_dim = 2
hidden = [16]

[schedule]
gamma = 1e-3
t_gamma = 60
t_beta = 20
t_static = 10
periods = 1

[train]
batch_size = 64

[gmm]
k = 4
"""


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "toy.toml"
    p.write_text(CONFIG)
    return p


@pytest.fixture(scope="module")
def trained(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "a"
    assert cli.main(["train", "--config", str(cfg_path), "--seed", "1", "--out", str(out)]) == 0
    return out


def test_train_writes_run(trained):
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["final_step"] == 90
    assert (trained / "loss_history.csv").exists()
    assert manifest["config_file"]["data"]["source"] == "blobs"


def test_train_deterministic(cfg_path, trained, tmp_path):
    out = tmp_path / "b"
    assert cli.main(["train", "--config", str(cfg_path), "--seed", "1", "--out", str(out)]) == 0
    assert (out / "loss_history.csv").read_bytes() == (trained / "loss_history.csv").read_bytes()
    a = json.loads((trained / "manifest.json").read_text())["final_metrics"]
    b = json.loads((out / "manifest.json").read_text())["final_metrics"]
    assert a == b


def test_manifest_config_reproduces_run(trained, tmp_path):
    from s3vdc import config as cfgmod

    snap = json.loads((trained / "manifest.json").read_text())["config_file"]
    rerun = tmp_path / "toml"
    cli.run_training(cfgmod.validate(snap), seed=1, out=rerun)
    assert (rerun / "loss_history.csv").read_bytes() == (trained / "loss_history.csv").read_bytes()


def test_missing_key_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(CONFIG.replace("latent_dim = 2\n", ""))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "model.latent_dim" in capsys.readouterr().err


def test_nan_exit_code(cfg_path, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteLossError("nan", phase="gamma", step=1, breakdown={})

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "x")]) == 3


def test_eval_reports(trained, tmp_path):
    out = tmp_path / "m.json"
    assert cli.main(["eval", "--run", str(trained), "--importance-samples", "8", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert {"accuracy", "nmi", "silhouette", "calinski_harabasz", "neg_log_px", "cluster_sizes", "pi"} <= set(rep)
    assert 0 <= rep["accuracy"] <= 1


def test_eval_importance_samples_tighten(trained):
    one = np.mean([cli.run_eval(trained, importance_samples=1, seed=s)["neg_log_px"] for s in range(5)])
    many = np.mean([cli.run_eval(trained, importance_samples=128, seed=s)["neg_log_px"] for s in range(5)])
    assert many <= one


def test_eval_missing_run(tmp_path):
    assert cli.main(["eval", "--run", str(tmp_path / "nope")]) == 1


def test_generate(trained, tmp_path):
    out = tmp_path / "g.npz"
    assert cli.main(["generate", "--run", str(trained), "--count", "50", "--seed", "2", "--out", str(out)]) == 0
    with np.load(out) as z:
        assert z["samples"].shape == (50, 4) and z["clusters"].shape == (50,)
    out2 = tmp_path / "g2.npz"
    cli.main(["generate", "--run", str(trained), "--count", "50", "--seed", "2", "--out", str(out2)])
    with np.load(out) as a, np.load(out2) as b:
        assert np.array_equal(a["samples"], b["samples"])
    assert cli.main(["generate", "--run", str(trained), "--count", "5", "--cluster", "7",
                     "--out", str(tmp_path / "g3.npz")]) == 1


def test_embed_export(trained, tmp_path, capsys):
    out = tmp_path / "e.csv"
    assert cli.main(["embed", "--run", str(trained), "--out", str(out), "--project"]) == 0
    info = json.loads(capsys.readouterr().out)
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["sample_id", "z0", "z1"] and len(rows) == 1201
    assert (tmp_path / "e.png").exists()
    assert info["projected_silhouette"] >= 0.5
    again = tmp_path / "e2.csv"
    cli.main(["embed", "--run", str(trained), "--out", str(again)])
    first = [r[:5] for r in rows]
    with open(again) as fh:
        assert [r[:5] for r in csv.reader(fh)] == first


def test_select_k_single_row(cfg_path, tmp_path):
    out = tmp_path / "k.json"
    assert cli.main(["select-k", "--config", str(cfg_path), "--k-range", "3..3", "--importance-samples", "4",
                     "--json", "--out", str(out)]) == 0
    table = json.loads(out.read_text())
    assert table["argmin"] == 3 and table["rows"][0]["argmin"]


def test_select_k_reuse_gamma(cfg_path):
    from s3vdc import config as cfgmod

    table = cli.select_k(cfgmod.load(cfg_path), [2, 3], reuse_gamma=True, importance_samples=4)
    assert [r["clusters"] for r in table["rows"]] == [2, 3]
    assert table["argmin"] in (2, 3)


def test_select_k_empty_range(cfg_path):
    assert cli.main(["select-k", "--config", str(cfg_path), "--k-range", "5..4"]) == 1


def test_stability_identical_seeds(cfg_path, tmp_path):
    out = tmp_path / "s.json"
    assert cli.main(["stability", "--config", str(cfg_path), "--seeds", "4,4", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["trials"] == 2 and rep["accuracy"]["std"] == 0.0


def test_stability_trials(cfg_path, tmp_path):
    out = tmp_path / "s.json"
    assert cli.main(["stability", "--config", str(cfg_path), "--trials", "3", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["trials"] == 3 and [r["seed"] for r in rep["runs"]] == [0, 1, 2]
    assert {"mean", "std"} <= set(rep["accuracy"])


def test_project_2d_keeps_separation():
    from s3vdc.metrics import silhouette

    g = np.random.default_rng(0)
    z = np.concatenate([g.normal(size=(200, 6)), g.normal(size=(200, 6)) + 8])
    assert silhouette(cli.project_2d(z), np.repeat([0, 1], 200)) >= 0.5
