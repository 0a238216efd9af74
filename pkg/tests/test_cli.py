import csv
import json

import numpy as np
import pytest

from cmrcnet.cli import main, parse_run_config
from cmrcnet.data import load_dataset, preprocess_sample
from cmrcnet.errors import ConfigError
from cmrcnet.pipeline import write_prediction_csv

SPEC = {"n_samples": 3, "spots_per_sample": 20, "d": 10, "patch_size": 8, "marker_count": 3, "seed": 1}
CFG = {
    "model": {"image_size": 8, "vit_patch": 4, "vit_dim": 8, "vit_depth": 1, "vit_heads": 2, "proj_dim": 8,
              "snn_hidden": 16, "recon_tokens": 2, "recon_dim": 8, "fusion_heads": 2, "init_xattn_heads": 2},
    "train": {"epochs": 1, "batch_size": 8},
    "eval": {"k_list": [1, 5], "heg_k": 4, "hvg_k": 4},
    "seed": 2,
}


def _json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = _json(root / "spec.json", SPEC)
    cfg = _json(root / "cfg.json", CFG)
    assert main(["synth", "--spec", spec, "--out", str(root / "ds"), "--quiet"]) == 0
    return root, cfg


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_default_layout(tmp_path):
    spec = _json(tmp_path / "s.json", {"spots_per_sample": 3, "d": 5, "patch_size": 4, "marker_count": 2})
    assert main(["synth", "--spec", spec, "--out", str(tmp_path / "d"), "--quiet"]) == 0
    dirs = sorted(p.name for p in (tmp_path / "d").iterdir() if p.is_dir())
    assert dirs == ["S01", "S02", "S03", "S04"]
    for name in ("spots.csv", "expr.csv", "patches.bin"):
        assert (tmp_path / "d" / "S01" / name).is_file()


def test_synth_byte_identical(work, tmp_path):
    root, _ = work
    lock = str(root / "ds" / "config.lock.json")
    assert main(["synth", "--spec", lock, "--out", str(tmp_path / "again"), "--quiet"]) == 0
    assert _tree(tmp_path / "again") == _tree(root / "ds")


def test_invalid_json_and_missing_data(work, tmp_path, capsys):
    root, cfg = work
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["train", "--config", str(bad), "--data", str(root / "ds"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--out", str(tmp_path / "o")]) == 2
    assert "data directory" in capsys.readouterr().err


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--k", "3"])
    assert exc.value.code == 2


def test_strict_config_keys():
    with pytest.raises(ConfigError, match="sections"):
        parse_run_config({"optim": {}})
    with pytest.raises(ConfigError, match="model config keys"):
        parse_run_config({"model": {"depth": 3}})
    with pytest.raises(ConfigError, match="train section"):
        parse_run_config({"train": {"seed": 3}})
    with pytest.raises(ConfigError):
        parse_run_config({"train": {"lr_schedule": "cos"}})
    with pytest.raises(ConfigError, match="seed"):
        parse_run_config({"seed": -1})
    rc, explicit = parse_run_config(CFG)
    assert explicit == set(CFG["model"]) and rc.train.model is rc.model and rc.train.seed == 2


def test_train_embed_infer_eval(work, tmp_path):
    root, cfg = work
    ds = str(root / "ds")
    tr = tmp_path / "tr"
    assert main(["train", "--config", cfg, "--data", ds, "--samples", "S01,S02", "--recon", "off",
                 "--out", str(tr), "--quiet"]) == 0
    lock = json.loads((tr / "config.lock.json").read_text())
    assert lock["model"]["recon_target"] == "off" and lock["model"]["gene_dim"] == 10
    assert lock["data"] == {"path": ds, "samples": "S01,S02"}
    records = [json.loads(line) for line in (tr / "train_log.jsonl").read_text().splitlines()]
    assert records and all(r["loss_r"] is None for r in records)

    cache = str(tmp_path / "ref.emb")
    assert main(["embed", "--model", str(tr / "model.ckpt"), "--data", ds, "--samples", "S01",
                 "--out", cache, "--quiet"]) == 0
    assert main(["infer", "--model", str(tr / "model.ckpt"), "--cache", cache, "--data", ds,
                 "--samples", "S03", "--k", "3", "--out", str(tmp_path / "inf"), "--quiet"]) == 0
    rows = list(csv.reader(open(tmp_path / "inf" / "pred_S03_k3.csv")))
    prov = list(csv.reader(open(tmp_path / "inf" / "pred_S03_k3.provenance.csv")))
    assert len(rows) == 21 and len(rows[0]) == 11
    assert len(prov) == 1 + 20 * 3 and {r[2] for r in prov[1:]} == {"S01"}
    assert main(["eval", "--pred", str(tmp_path / "inf" / "pred_S03_k3.csv"), "--data", ds,
                 "--heg-k", "4", "--hvg-k", "4", "--out", str(tmp_path / "ev0"), "--quiet"]) == 0

    # a prediction equal to the processed truth scores 1 on every defined gene
    truth = preprocess_sample(load_dataset(root / "ds")[0])
    pred = tmp_path / "truth.csv"
    write_prediction_csv(pred, truth.spot_ids, truth.gene_names, truth.expr)
    assert main(["eval", "--pred", str(pred), "--data", ds, "--heg-k", "4", "--hvg-k", "4",
                 "--out", str(tmp_path / "ev"), "--quiet"]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["fold"] == "S01"
    assert abs(metrics["heg_mean"] - 1.0) < 1e-6 and abs(metrics["hvg_mean"] - 1.0) < 1e-6
    for name in ("gene_corr_pred.csv", "gene_corr_truth.csv", "grid_GENE0000.csv", "config.lock.json"):
        assert (tmp_path / "ev" / name).is_file()


def test_infer_rejects_foreign_cache(work, tmp_path):
    root, cfg = work
    ds = str(root / "ds")
    for seed in (0, 1):
        assert main(["train", "--config", cfg, "--data", ds, "--samples", "S01", "--recon", "off",
                     "--out", str(tmp_path / f"m{seed}"), "--quiet", "--epochs", str(seed + 1)]) == 0
    cache = str(tmp_path / "c.emb")
    assert main(["embed", "--model", str(tmp_path / "m0" / "model.ckpt"), "--data", ds, "--out", cache, "--quiet"]) == 0
    code = main(["infer", "--model", str(tmp_path / "m1" / "model.ckpt"), "--cache", cache, "--data", ds,
                 "--k", "1", "--out", str(tmp_path / "inf"), "--quiet"])
    assert code == 2


def test_xval_artifacts_and_lock_rerun(work, tmp_path):
    root, cfg = work
    out = tmp_path / "xv"
    assert main(["xval", "--config", cfg, "--data", str(root / "ds"), "--out", str(out), "--quiet"]) == 0
    folds = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert folds == ["fold_S01", "fold_S02", "fold_S03"]
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["k_list"] == [1, 5]
    for name in ("model.ckpt", "cache.emb", "train_log.jsonl", "pred_k5.csv", "metrics_k1.json"):
        assert (out / "fold_S02" / name).is_file()
    again = tmp_path / "xv2"
    assert main(["xval", "--config", str(out / "config.lock.json"), "--out", str(again), "--quiet"]) == 0
    assert _tree(again) == _tree(out)


def test_xval_k_list_flag(work, tmp_path):
    root, cfg = work
    assert main(["xval", "--config", cfg, "--data", str(root / "ds"), "--k-list", "2", "--recon", "off",
                 "--out", str(tmp_path / "x"), "--quiet"]) == 0
    lock = json.loads((tmp_path / "x" / "config.lock.json").read_text())
    assert lock["eval"]["k_list"] == [2]
    assert main(["xval", "--config", cfg, "--data", str(root / "ds"), "--k-list", "a,b",
                 "--out", str(tmp_path / "y"), "--quiet"]) == 2
    assert np.isfinite(json.loads((tmp_path / "x" / "aggregate.json").read_text())["per_k"]["2"]["hvg_mean"])
