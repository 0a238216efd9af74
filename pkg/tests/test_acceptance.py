"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

Criteria 6 and 7 share a single 5-seed benchmark run (marked slow); the rest
finish in seconds.
"""

import math
import time

import numpy as np
import pytest

from cmrcnet.benchmark import run_benchmark
from cmrcnet.cli import main
from cmrcnet.data import SyntheticSpec, generate_synthetic, preprocess_sample
from cmrcnet.errors import ContractError
from cmrcnet.evaluation import pearson
from cmrcnet.gradcheck import check_gradients
from cmrcnet.model import CmrcModel, CrossAttention, mask_features
from cmrcnet.objectives import compute_losses, contrastive_loss, reconstruction_loss
from cmrcnet.pipeline import (
    DEFAULT_K_LIST,
    EmbeddingCache,
    EvalConfig,
    TrainConfig,
    cross_validate,
    predict_from_embeddings,
    retrieve_topk,
)
from cmrcnet.rng import make_rng
from cmrcnet.tensor import Tensor

from conftest import micro_config

RESULTS: dict[int, str] = {}


def report(n: int, passed: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'} ({detail})"
    RESULTS[n] = line
    print(line)
    assert passed, line


# ---------------------------------------------------------------- 1 gradients


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    cfg = micro_config()
    model = CmrcModel(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(7)
    patches, expr = rng.random((2, 4, 4, 3)), rng.random((2, cfg.gene_dim)) * 3
    tokens = model.encode_image(patches).shape[1]
    first = compute_losses(model.forward(patches, expr, "train", make_rng(3)), cfg)

    def loss():
        out = model.forward(patches, expr, "train", make_rng(3))
        return compute_losses(out, cfg, frozen_target=first.target_matrix).loss_total

    params = model.parameters()
    results = check_gradients(loss, params, h=1e-6)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results)
    dims_ok = max(cfg.vit_dim, cfg.proj_dim, cfg.gene_dim, cfg.snn_hidden, cfg.recon_dim) <= 16
    passed = (tokens == 5 and dims_ok and len(results) == len(params)
              and all(r.passed for r in results) and elapsed < 120)
    report(1, passed, f"{len(results)} parameters, T={tokens}, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2 contrastive


def test_criterion_2_contrastive_oracle():
    # independent evaluation: the target rows are softmax([1, 0]) and the
    # logits match them, so each term is the entropy of that distribution
    p0 = math.e / (math.e + 1.0)
    oracle = -2.0 * (p0 * math.log(p0) + (1 - p0) * math.log(1 - p0))
    value = contrastive_loss(np.eye(2), np.eye(2))[0].item()
    oracle_ok = abs(value - oracle) < 1e-4 and abs(value - 1.1644) < 1e-4

    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        b, p = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        a, g = rng.standard_normal((b, p)), rng.standard_normal((b, p))
        worst = max(worst, abs(contrastive_loss(a, g)[0].item() - contrastive_loss(g, a)[0].item()))
    swap_ok = worst < 1e-9
    report(2, oracle_ok and swap_ok,
           f"Loss_c={value:.7f} vs oracle {oracle:.7f}; worst swap difference {worst:.3e} over 100 instances")


# ---------------------------------------------------------------- 3 reconstruction


def test_criterion_3_reconstruction_contracts():
    rng = np.random.default_rng(3)
    counts_ok = True
    for rate in (0.3, 0.5, 0.7):
        for _ in range(50):
            b, t, d = (int(v) for v in rng.integers(1, 24, size=3))
            x = rng.random((b, t, d)) + 0.5
            masked, mask = mask_features(x, rate, make_rng(int(rng.integers(1 << 30))))
            n = math.floor(rate * t * d + 0.5)
            counts_ok &= all(int(mask[i].sum()) == n for i in range(b))
            counts_ok &= bool(np.all(masked.data[mask] == 0))

    residual_ok = True
    for seed in range(20):
        dim, heads = 8, 2
        xa = CrossAttention(dim, heads, make_rng(seed), np.float64, residual_value=True)
        x = rng.standard_normal((2, int(rng.integers(1, 8)), dim))
        out = xa(Tensor(x), Tensor(np.zeros((2, int(rng.integers(1, 5)), dim)))).data
        residual_ok &= bool(np.array_equal(out, xa.wv_img(Tensor(x)).data))

    target = rng.standard_normal((4, 6))
    zero_ok = all(reconstruction_loss(target, target, kind).item() == pytest.approx(0.0, abs=1e-12)
                  for kind in ("mse", "cosine"))
    report(3, counts_ok and residual_ok and zero_ok,
           f"mask counts exact={counts_ok}, zero-gene residual map exact={residual_ok}, perfect recon zero={zero_ok}")


# ---------------------------------------------------------------- 4 retrieval


def full_sort_topk(q, r, k):
    """Reference: float64 cosine, full stable sort on (-score, index)."""
    qn = q.astype(np.float64) / np.linalg.norm(q.astype(np.float64), axis=1, keepdims=True)
    rn = r.astype(np.float64) / np.linalg.norm(r.astype(np.float64), axis=1, keepdims=True)
    s = np.clip(qn @ rn.T, -1.0, 1.0)
    idx = np.stack([np.lexsort((np.arange(len(r)), -row))[:k] for row in s])
    return idx, np.take_along_axis(s, idx, axis=1)


def test_criterion_4_retrieval_oracle():
    rng = np.random.default_rng(4)
    cases = [(2000, 64), (1, 1), (17, 3), (500, 32), (1999, 7)] + [
        (int(rng.integers(1, 2001)), int(rng.integers(1, 65))) for _ in range(15)
    ]
    exact, ties_checked = True, 0
    for m, p in cases:
        refs = rng.standard_normal((m, p)).astype(np.float32)
        if m >= 8:
            # constructed ties: exact copies and positive rescalings of one row
            refs[m // 2] = refs[1]
            refs[m - 1] = refs[1] * np.float32(4.0)
            ties_checked += 1
        queries = rng.standard_normal((5, p)).astype(np.float32)
        if m >= 8:
            queries[0] = refs[1]
        for k in sorted({1, min(m, 3), min(m, 50), m}):
            idx, scores = retrieve_topk(queries, refs, k)
            bi, bs = full_sort_topk(queries, refs, k)
            exact &= bool(np.array_equal(idx, bi) and np.array_equal(scores, bs))

    emb = rng.standard_normal((300, 16)).astype(np.float32)
    expr = rng.random((300, 40)).astype(np.float32)
    cache = EmbeddingCache(emb, expr, [("R", f"s{i}") for i in range(300)], b"\0" * 32)
    twins = [0, 17, 299]
    pred = predict_from_embeddings(emb[twins], cache, 1)
    twin_ok = pred.indices[:, 0].tolist() == twins and np.array_equal(pred.expression.astype(np.float32), expr[twins])
    report(4, exact and twin_ok,
           f"{len(cases)} caches up to M=2000, P=64, {ties_checked} with ties, exact={exact}; k=1 twin bitwise={twin_ok}")


# ---------------------------------------------------------------- 5 metric


def brute_pearson(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_criterion_5_metric_oracle():
    rng = np.random.default_rng(5)
    worst, props = 0.0, True
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        if rng.random() < 0.3:
            y = y + 2.0 * x
        r = pearson(x, y)
        worst = max(worst, abs(r - brute_pearson(x.tolist(), y.tolist())))
        a, c = float(rng.uniform(0.1, 50.0)), float(rng.uniform(-50.0, 50.0))
        props &= abs(pearson(a * x + c, y) - r) < 1e-9
        props &= abs(pearson(x, a * y + c) - r) < 1e-9
        props &= abs(pearson(-x, y) + r) < 1e-12
    undefined_ok = pearson([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) is None and pearson([1.0, 2.0], [5.0, 5.0]) is None
    for bad in (([1.0], [1.0]), ([1.0, 2.0], [1.0, 2.0, 3.0])):
        try:
            pearson(*bad)
            undefined_ok = False
        except ContractError:
            pass
    report(5, worst < 1e-9 and props and undefined_ok,
           f"worst |r - brute| {worst:.2e} over 1000 pairs; affine/sign properties={props}; undefined handling={undefined_ok}")


# ---------------------------------------------------------------- 6, 7 benchmark

SEEDS = range(5)


@pytest.fixture(scope="module")
def bench():
    return run_benchmark(SEEDS, modes=("untrained", "image", "off"), progress=print)


def _fmt_seed(runs, seed, a, b):
    return f"{seed}:{runs[(seed, a)].hvg_mean:+.3f}/{runs[(seed, b)].hvg_mean:+.3f}"


@pytest.mark.slow
def test_criterion_6_learning_signal(bench):
    wins = [s for s in SEEDS if bench[(s, "image")].hvg_mean - bench[(s, "untrained")].hvg_mean >= 0.10]
    detail = ", ".join(_fmt_seed(bench, s, "image", "untrained") for s in SEEDS)
    seconds = sum(run.seconds for run in bench.values())
    report(6, len(wins) >= 4, f"trained/untrained HVG per seed {detail}; {len(wins)}/5 gaps >= 0.10; benchmark {seconds:.0f}s")


@pytest.mark.slow
def test_criterion_7_ablation_direction(bench):
    wins = [s for s in SEEDS if bench[(s, "image")].hvg_mean >= bench[(s, "off")].hvg_mean]
    detail = ", ".join(_fmt_seed(bench, s, "image", "off") for s in SEEDS)
    report(7, len(wins) >= 4, f"full/contrastive-only HVG per seed {detail}; full >= contrastive-only in {len(wins)}/5")


# ---------------------------------------------------------------- 8 protocol


def _tiny_cfg(**kw):
    return micro_config(image_size=8, vit_patch=4, gene_dim=6, **kw)


def _protocol_run(n_samples, spots, tmp_path):
    spec = SyntheticSpec(n_samples=n_samples, spots_per_sample=spots, d=6, patch_size=8, marker_count=2, seed=8)
    data = [preprocess_sample(d) for d in generate_synthetic(spec)]
    cfg = TrainConfig(epochs=1, batch_size=32, seed=0, model=_tiny_cfg())
    return data, cross_validate(data, cfg, eval_cfg=EvalConfig(heg_k=3, hvg_k=3), out_dir=tmp_path)


def test_criterion_8_protocol(tmp_path):
    checks = []
    # M = 3 * 200 = 600 permits every k; M = 2 * 200 = 400 drops 500 with a note
    for n_samples, expected_k in ((4, [50, 250, 500]), (3, [50, 250])):
        out = tmp_path / f"n{n_samples}"
        data, cv = _protocol_run(n_samples, 200, out)
        ids = [d.sample_id for d in data]
        one_per_sample = sorted(f.test_sample for f in cv.folds) == sorted(ids) and len(cv.folds) == len(ids)
        no_leak = True
        for f in cv.folds:
            no_leak &= f.test_sample not in f.cache.sample_ids()
            no_leak &= f.cache.sample_ids() == set(ids) - {f.test_sample}
            for k, pred in f.predictions.items():
                no_leak &= all(f.cache.provenance[j][0] != f.test_sample for j in pred.indices.ravel())
                lines = (out / f"fold_{f.test_sample}" / f"pred_k{k}.provenance.csv").read_text().splitlines()[1:]
                no_leak &= len(lines) == pred.indices.size
                no_leak &= all(line.split(",")[2] != f.test_sample for line in lines)
        noted = (not cv.notes) if expected_k == list(DEFAULT_K_LIST) else any("500" in n for n in cv.notes)
        checks.append((n_samples, one_per_sample, no_leak, cv.k_list == expected_k and noted, cv.k_list))
    passed = all(a and b and c for _, a, b, c, _ in checks)
    detail = "; ".join(f"{n} samples: folds ok={a}, no leakage={b}, k sweep {ks} ok={c}" for n, a, b, c, ks in checks)
    report(8, passed, detail)


# ---------------------------------------------------------------- 9 reproducibility


def test_criterion_9_reproducibility(tmp_path):
    import json

    (tmp_path / "spec.json").write_text(json.dumps(
        {"n_samples": 3, "spots_per_sample": 24, "d": 10, "patch_size": 8, "marker_count": 3, "seed": 9}))
    cfg = {"model": {"image_size": 8, "vit_patch": 4, "vit_dim": 8, "vit_depth": 1, "vit_heads": 2, "proj_dim": 8,
                     "snn_hidden": 16, "recon_tokens": 2, "recon_dim": 8, "fusion_heads": 2, "init_xattn_heads": 2},
           "train": {"epochs": 2, "batch_size": 8}, "eval": {"k_list": [1, 5, 20], "heg_k": 4, "hvg_k": 4},
           "seed": 5}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "ds"), "--quiet"]) == 0
    trees = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["xval", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "ds"),
                     "--out", str(out), "--quiet"]) == 0
        trees.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    a, b = trees
    kinds = {"ckpt": 0, "emb": 0, "csv": 0, "json": 0}
    for name in a:
        ext = name.rsplit(".", 1)[-1]
        if ext in kinds:
            kinds[ext] += 1
    identical = a.keys() == b.keys() and all(a[n] == b[n] for n in a)
    complete = kinds["ckpt"] == 3 and kinds["emb"] == 3 and kinds["csv"] > 0 and kinds["json"] > 0
    report(9, identical and complete, f"{len(a)} files compared ({kinds}), byte-identical={identical}")
