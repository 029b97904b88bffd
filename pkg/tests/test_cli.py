import csv
import hashlib
import json

import numpy as np
import pytest

from cortical_ssm.cli import ABLATION_GRID, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, RunConfig, crop_center, main
from cortical_ssm.explain import read_map_csv
from cortical_ssm.signal_io import ConfigurationError

BASE = {
    "synthetic": {"M": 4, "T": 64, "fs": 64.0, "band": [8.0, 12.0], "snr_db": 10.0, "n_samples": 48,
                  "n_groups": 6, "seed": 0},
    "model": {"L": 1, "Q": 8, "head_hidden": 16, "front_end": {"F": 8, "f_min": 2.0, "f_max": 30.0}},
    "train": {"epochs": 2, "batch_size": 8, "lr": 3e-3},
    "k": 3,
    "signal_band": [1.0, 30.0],
    "snr_sweep_db": [0.0, 3.0],
    "length_sweep": [48],
}


def write_config(path, **overrides):
    cfg = json.loads(json.dumps(BASE))
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out / "cfg.json")
    assert run("synth", "--config", cfg, "--out", out) == EXIT_OK
    assert run("train", "--config", cfg, "--out", out) == EXIT_OK
    return out, cfg


def test_synth_is_seed_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert run("synth", "--config", cfg, "--out", tmp_path / "a", "--seed", 5) == EXIT_OK
    assert run("synth", "--config", cfg, "--out", tmp_path / "b", "--seed", 5) == EXIT_OK
    assert run("synth", "--config", cfg, "--out", tmp_path / "c", "--seed", 6) == EXIT_OK
    a, b, c = (sha(tmp_path / d / "dataset.bin") for d in "abc")
    assert a == b != c


def test_synth_invalid_band_exit_two_without_partial_output(tmp_path, capsys):
    cfg = json.loads(json.dumps(BASE))
    cfg["synthetic"]["band"] = [40.0, 10.0]
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("synth", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == EXIT_CONFIG
    assert "error" in capsys.readouterr().err
    assert not list((tmp_path).rglob("dataset.bin*"))


def test_unknown_config_key_rejected(tmp_path):
    assert run("synth", "--config", write_config(tmp_path / "c.json", bogus=1), "--out", tmp_path) == EXIT_CONFIG
    cfg = json.loads(json.dumps(BASE))
    cfg["model"]["front_end"]["bogus"] = 1
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(cfg)
    cfg = json.loads(json.dumps(BASE))
    cfg["model"]["M"] = 3  # derived from the dataset
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(cfg)


def test_missing_config_and_dataset(tmp_path):
    assert run("train", "--config", tmp_path / "nope.json", "--out", tmp_path) == EXIT_CONFIG
    assert run("train", "--config", write_config(tmp_path / "c.json"), "--out", tmp_path / "empty") == EXIT_CONFIG


def test_fold_out_of_range(trained, tmp_path):
    out, cfg = trained
    assert run("train", "--config", cfg, "--out", tmp_path, "--dataset", out / "dataset.bin",
               "--folds", "7") == EXIT_CONFIG


def test_numerical_failure_exit_three(tmp_path):
    cfg = write_config(tmp_path / "c.json", train={"epochs": 2, "batch_size": 8, "lr": 1e30})
    assert run("synth", "--config", cfg, "--out", tmp_path) == EXIT_OK
    with np.errstate(all="ignore"):
        assert run("train", "--config", cfg, "--out", tmp_path, "--folds", "0") == EXIT_NUMERICAL


def test_train_outputs(trained):
    out, _ = trained
    summary = json.loads((out / "summary.json").read_text())
    assert [f["fold"] for f in summary["folds"]] == [0, 1, 2]
    for k in ("accuracy", "macro_f1", "auroc_macro", "auprc_macro", "kappa"):
        assert set(summary["summary"][k]) == {"mean", "std"}
    assert summary["n_parameters"] > 0
    rows = list(csv.reader(open(out / "metrics" / "metrics.csv")))
    assert rows[0] == ["fold", "accuracy", "macro_f1", "auroc", "auprc", "kappa"] and len(rows) == 4
    assert all((out / "checkpoints" / f"fold{i}.ckpt").exists() for i in range(3))
    hist = list(csv.DictReader(open(out / "history.csv")))
    assert len(hist) == 6


def test_single_fold_selection(trained, tmp_path):
    out, cfg = trained
    assert run("train", "--config", cfg, "--out", tmp_path, "--dataset", out / "dataset.bin",
               "--folds", "0") == EXIT_OK
    hist = json.loads((tmp_path / "history.json").read_text())
    ref = json.loads((out / "history.json").read_text())
    assert list(hist) == ["0"] and hist["0"] == ref["0"]


def test_resume_reproduces_history(trained, tmp_path):
    out, _ = trained
    short = write_config(tmp_path / "short.json", train={"epochs": 1, "batch_size": 8, "lr": 3e-3})
    full = write_config(tmp_path / "full.json")
    ds = out / "dataset.bin"
    assert run("train", "--config", short, "--out", tmp_path / "r", "--dataset", ds, "--folds", "1") == EXIT_OK
    assert run("train", "--config", full, "--out", tmp_path / "r", "--dataset", ds, "--folds", "1",
               "--resume") == EXIT_OK
    assert json.loads((tmp_path / "r" / "history.json").read_text())["1"] == \
        json.loads((out / "history.json").read_text())["1"]


def test_eval_reports_and_determinism(trained):
    out, cfg = trained
    assert run("eval", "--config", cfg, "--out", out) == EXIT_OK
    first = (out / "metrics" / "eval_summary.json").read_text()
    assert run("eval", "--config", cfg, "--out", out) == EXIT_OK
    assert (out / "metrics" / "eval_summary.json").read_text() == first
    for f in range(3):
        for d in ("0", "3"):
            rep = json.loads((out / "metrics" / f"snr_fold{f}_minus{d}db.json").read_text())
            assert rep["degradation_db"] == float(d)
    base = json.loads((out / "metrics" / "eval_fold0.json").read_text())
    zero = json.loads((out / "metrics" / "snr_fold0_minus0db.json").read_text())
    assert base["accuracy"] == zero["accuracy"]
    assert len(list(csv.reader(open(out / "metrics" / "length_sweep.csv")))) == 4


def test_eval_checkpoint_mismatch(trained, tmp_path):
    out, cfg = trained
    other = json.loads(json.dumps(BASE))
    other["synthetic"]["M"] = 5
    (tmp_path / "o.json").write_text(json.dumps(other))
    assert run("synth", "--config", tmp_path / "o.json", "--out", tmp_path) == EXIT_OK
    import shutil
    shutil.copytree(out / "checkpoints", tmp_path / "checkpoints", dirs_exist_ok=True)
    assert run("eval", "--config", tmp_path / "o.json", "--out", tmp_path) == EXIT_CONFIG


def test_explain_class_averages(trained):
    out, cfg = trained
    assert run("explain", "--config", cfg, "--out", out, "--folds", "0") == EXIT_OK
    status = json.loads((out / "maps" / "fold0_status.json").read_text())
    assert set(status) == {"0", "1"}
    for n, v in status.items():
        if isinstance(v, int):
            labels, z = read_map_csv(out / "maps" / f"fold0_class{n}_average_zch.csv")
            assert len(labels) == 4 and np.all(z >= 0)
            _, zf = read_map_csv(out / "maps" / f"fold0_class{n}_average_zfreq.csv")
            assert zf.shape == (8, 64) and np.all(zf >= 0)


def test_explain_single_sample(trained):
    out, cfg = trained
    before = set((out / "maps").iterdir())
    assert run("explain", "--config", cfg, "--out", out, "--folds", "0", "--sample", "2") == EXIT_OK
    new = {p.name for p in set((out / "maps").iterdir()) - before}
    assert sum(n.endswith("_zch.csv") for n in new) == 1 and sum(n.endswith("_zfreq.csv") for n in new) == 1
    assert run("explain", "--config", cfg, "--out", out, "--sample", "9999") == EXIT_CONFIG


def test_ablate_grid(trained, tmp_path):
    out, _ = trained
    cfg = write_config(tmp_path / "c.json", train={"epochs": 1, "batch_size": 16, "lr": 3e-3})
    assert run("ablate", "--config", cfg, "--out", tmp_path, "--dataset", out / "dataset.bin",
               "--folds", "0") == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "metrics" / "ablation.csv")))
    assert [r[0] for r in rows[1:]] == [name for name, _ in ABLATION_GRID]
    assert len(rows) == 9
    first = (tmp_path / "metrics" / "ablation.csv").read_text()
    assert run("ablate", "--config", cfg, "--out", tmp_path, "--dataset", out / "dataset.bin",
               "--folds", "0") == EXIT_OK
    assert (tmp_path / "metrics" / "ablation.csv").read_text() == first


def test_ablate_unknown_variant(tmp_path):
    assert run("ablate", "--config", write_config(tmp_path / "c.json", ablate_variants=["nope"]),
               "--out", tmp_path) == EXIT_CONFIG


def test_crop_center():
    x = np.arange(10.0)
    assert crop_center(x, 4).tolist() == [3.0, 4.0, 5.0, 6.0]
    with pytest.raises(ConfigurationError):
        crop_center(x, 11)
