import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from tribogen import contact
from tribogen.cli import main
from tribogen.dataset import Manifest, recipes
from tribogen.neural import load_checkpoint
from tribogen.params import BoundsTable, GmmParams

TINY_NET = {"encoder_widths": [8], "encoder_dropout": [0.0], "decoder_widths": [8],
            "decoder_dropout": [0.0], "latent_dim": 2}
TINY_TRAIN = {"batch_size": 32, "total_steps": 3, "warmup_steps": 1, "eval_every": 3}


def write_config(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def error_json(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def manifest_path(m):
    return str(Path(m.root) / "manifest.json")


def copy_dataset(m, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(m.root, dst)
    return dst / "manifest.json"


def test_generate_reports_sample_count_and_is_idempotent(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["generate", "--recipes", "1000", "--out", str(out)]) == 0
    assert "generated 16000 samples" in capsys.readouterr().out
    m = Manifest.load(out / "manifest.json")
    assert m.sample_count() == 16000
    mtimes = {p: p.stat().st_mtime_ns for p in out.iterdir()}
    assert main(["generate", "--recipes", "1000", "--out", str(out)]) == 0
    assert "up-to-date" in capsys.readouterr().out
    assert {p: p.stat().st_mtime_ns for p in out.iterdir()} == mtimes


def test_invalid_bounds_rejected_before_writing(tmp_path, capsys):
    b = BoundsTable().to_dict()
    b["lower"][3], b["upper"][3] = b["upper"][3], b["lower"][3]
    cfg = write_config(tmp_path, {"generate": {"recipe_count": 10, "bounds": b}})
    out = tmp_path / "data"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 2
    assert error_json(capsys)["exit_code"] == 2
    assert not out.exists()


@pytest.mark.parametrize("cfg", [{"bogus": 1}, {"generate": {"recipe_count": 5, "colour": "red"}},
                                 {"schema_version": 99}])
def test_unknown_keys_and_schema_rejected(tmp_path, capsys, cfg):
    path = write_config(tmp_path, cfg)
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "d")]) == 2
    assert not (tmp_path / "d").exists()


def test_missing_config_file_is_io_error(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 4
    assert error_json(capsys)["error"]


def test_train_vae_is_unconditional(small_dataset, tmp_path, capsys):
    cfg = write_config(tmp_path, {"train": {**TINY_TRAIN, "network": TINY_NET}})
    assert main(["train", "--config", str(cfg), "--model", "vae", "--manifest", manifest_path(small_dataset),
                 "--out", str(tmp_path), "--seed", "3"]) == 0
    ckpts = list(tmp_path.glob("vae-*-s3.ckpt"))
    assert len(ckpts) == 1 and list(tmp_path.glob("vae-trace-*-s3.csv"))
    spec = load_checkpoint(ckpts[0]).spec
    assert not spec.conditional and spec.encoder_in == 23


def test_train_cvae_defaults(small_dataset, tmp_path):
    cfg = write_config(tmp_path, {"train": {**TINY_TRAIN, "total_steps": 1, "eval_every": 1}})
    assert main(["train", "--config", str(cfg), "--model", "cvae", "--manifest", manifest_path(small_dataset),
                 "--out", str(tmp_path)]) == 0
    spec = load_checkpoint(next(tmp_path.glob("cvae-*.ckpt"))).spec
    assert spec.conditional and spec.latent_dim == 56
    assert spec.encoder_widths == (1915, 1723, 767) and spec.decoder_widths == (347, 308, 328)


def test_train_is_reproducible(small_dataset, tmp_path):
    cfg = write_config(tmp_path, {"train": {**TINY_TRAIN, "network": TINY_NET}})
    paths = []
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--model", "vae", "--manifest",
                     manifest_path(small_dataset), "--out", str(tmp_path / d)]) == 0
        paths.append(next((tmp_path / d).glob("vae-*.ckpt")))
    assert paths[0].name == paths[1].name
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_without_scaler_is_validation_error(small_dataset, tmp_path, capsys):
    alt = copy_dataset(small_dataset, tmp_path)
    d = json.loads(alt.read_text())
    d["scaler"] = None
    alt.write_text(json.dumps(d))
    m = Manifest.load(alt)
    assert not m.scaler
    assert main(["train", "--manifest", str(alt), "--out", str(tmp_path / "r")]) == 2
    assert "scaler" in error_json(capsys)["message"]


@pytest.fixture(scope="module")
def tiny_cvae(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cvae")
    cfg = write_config(out, {"train": {**TINY_TRAIN, "network": TINY_NET}})
    assert main(["train", "--config", str(cfg), "--model", "cvae", "--manifest", manifest_path(small_dataset),
                 "--out", str(out)]) == 0
    return next(out.glob("cvae-*.ckpt"))


def test_eval_writes_reports(tiny_cvae, small_dataset, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tiny_cvae), "--manifest", manifest_path(small_dataset),
                 "--out", str(tmp_path), "--seed", "1"]) == 0
    assert "median parameter sMAPE" in capsys.readouterr().out
    report = json.loads(next(tmp_path.glob("eval-*-s1.json")).read_text())
    assert report["count"] == small_dataset.sample_count("test")


def test_eval_on_empty_split_is_validation_error(tiny_cvae, small_dataset, tmp_path, capsys):
    alt = copy_dataset(small_dataset, tmp_path)
    d = json.loads(alt.read_text())
    for s in d["shards"]:
        if s["split"] == "test":
            s["split"] = "train"
    alt.write_text(json.dumps(d))
    assert main(["eval", "--checkpoint", str(tiny_cvae), "--manifest", str(alt), "--out", str(tmp_path)]) == 2
    assert "empty" in error_json(capsys)["message"]


def test_invert_loads_external_target(tmp_path, capsys):
    theta = GmmParams.from_vector(recipes(2, 1)[0])
    law = contact.simulate_law(theta, 100, seed=1)
    target = tmp_path / "target.csv"
    law.to_csv(target)
    cfg = write_config(tmp_path, {"invert": {"iterations": 2, "popsize": 6, "final_seeds": 1}})
    assert main(["invert", "--config", str(cfg), "--target", str(target), "--n", "100",
                 "--strategy", "direct", "--out", str(tmp_path / "r")]) == 0
    res = json.loads(next((tmp_path / "r").glob("invert-direct-*.json")).read_text())
    assert res["n"] == 100 and len(res["theta"]) == 23
    with open(next((tmp_path / "r").glob("invert-direct-law-*.csv"))) as fh:
        assert len(list(csv.reader(fh))) == 129


def test_latent_invert_rejects_conditional_checkpoint(tiny_cvae, tmp_path, capsys):
    law = contact.simulate_law(GmmParams.from_vector(recipes(2, 1)[0]), 100, seed=1)
    law.to_csv(tmp_path / "t.csv")
    code = main(["invert", "--target", str(tmp_path / "t.csv"), "--n", "100", "--strategy", "latent",
                 "--checkpoint", str(tiny_cvae), "--out", str(tmp_path / "r")])
    assert code == 2


def test_analyze_sensitivity_defaults_shape(tmp_path, capsys):
    assert main(["analyze", "--kind", "sensitivity", "--out", str(tmp_path)]) == 0
    path = next(tmp_path.glob("sensitivity-*.csv"))
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 23 * 3
    cells = {(r[0], r[1]) for r in rows[1:]}
    assert len(cells) == 69 and {r[1] for r in rows[1:]} == {"100", "1500", "10000"}


def test_analyze_correlation(small_dataset, tmp_path):
    assert main(["analyze", "--kind", "correlation", "--manifest", manifest_path(small_dataset),
                 "--out", str(tmp_path)]) == 0
    d = json.loads(next(tmp_path.glob("correlation-*.json")).read_text())
    tt = np.array(d["theta_theta"], dtype=float)
    assert tt.shape == (23, 23) and np.allclose(np.diag(tt), 1)
    assert np.array(d["feature_theta"], dtype=float).shape == (129, 23)


def test_analyze_heatmap_and_envelope(tiny_cvae, small_dataset, tmp_path):
    cfg = write_config(tmp_path, {"analyze": {"functional_samples": 20, "m": 3}})
    for kind in ("heatmap", "envelope"):
        assert main(["analyze", "--config", str(cfg), "--kind", kind, "--checkpoint", str(tiny_cvae),
                     "--manifest", manifest_path(small_dataset), "--out", str(tmp_path)]) == 0
    hm = json.loads(next(tmp_path.glob("heatmap-*.json")).read_text())
    assert np.sum(hm["counts"]) == 20
    env = json.loads(next(tmp_path.glob("envelope-*.json")).read_text())
    assert len(env["mean"]) == 128


def test_analyze_needs_checkpoint(capsys, tmp_path):
    assert main(["analyze", "--kind", "heatmap", "--out", str(tmp_path)]) == 2
