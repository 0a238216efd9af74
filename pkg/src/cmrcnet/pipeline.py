"""Training, reference embeddings, retrieval inference and cross-validation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tc
from .checkpoint import checkpoint_bytes, checksum
from .data.dataset import SampleDataset, check_shared_genes, make_folds
from .data.preprocess import augment_batch, select_hegs, select_hvgs
from .errors import ConfigError, DataError, NumericFault
from .evaluation import MetricsReport, per_gene_pcc, summarize
from .model import CmrcModel, ModelConfig
from .objectives import compute_losses
from .optim import AdamWState, adamw_step
from .rng import derive_seed, substream

log = logging.getLogger(__name__)

DEFAULT_K_LIST = (50, 250, 500)
EMBED_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    tau: float = 1.0
    augment: bool = True
    seed: int = 0
    log_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (the contrastive loss degenerates at B=1)")
        if self.lr < 0 or self.tau <= 0:
            raise ConfigError("lr must be >= 0 and tau > 0")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, model: ModelConfig | None = None) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        elif model is not None:
            d["model"] = model
        return cls(**d)


@dataclass
class TrainResult:
    model: CmrcModel
    log: list[dict]

    @property
    def checkpoint(self) -> bytes:
        return checkpoint_bytes(self.model)


def init_model(config: TrainConfig, dtype=np.float32) -> CmrcModel:
    return CmrcModel(config.model, seed=derive_seed(config.seed, "init"), dtype=dtype)


def _pooled(datasets: list[SampleDataset]):
    expr = np.concatenate([ds.expr for ds in datasets]).astype(np.float32)
    where = [(i, j) for i, ds in enumerate(datasets) for j in range(ds.n_spots)]
    return expr, where


def _batch_patches(datasets, where, idx) -> np.ndarray:
    return np.stack([datasets[where[i][0]].spot_patches([where[i][1]])[0] for i in idx])


def train(
    datasets: list[SampleDataset],
    config: TrainConfig,
    log_sink: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimize the total loss over the pooled spots of ``datasets``.

    Expression must already be preprocessed.  Each epoch reshuffles the spots
    and drops the last partial batch; if there are fewer spots than
    ``batch_size`` one full-pool batch is used per epoch instead.
    """
    if not datasets:
        raise ConfigError("train needs at least one sample")
    check_shared_genes(datasets)
    if not all(ds.processed for ds in datasets):
        raise ConfigError("train expects preprocessed expression")
    cfg = config.model
    if datasets[0].n_genes != cfg.gene_dim:
        raise ConfigError(f"model gene_dim {cfg.gene_dim} != dataset gene count {datasets[0].n_genes}")
    if datasets[0].patches.shape[1] != cfg.image_size:
        raise ConfigError(f"model image_size {cfg.image_size} != patch size {datasets[0].patches.shape[1]}")

    model = init_model(config)
    params = model.parameters()
    opt = AdamWState(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    shuffle_rng = substream(config.seed, "shuffle")
    aug_rng = substream(config.seed, "augment")
    fwd_rng = substream(config.seed, "forward")

    expr, where = _pooled(datasets)
    n = len(where)
    if n < 2:
        raise ConfigError("need at least 2 training spots")
    bs = config.batch_size
    if n < bs:
        log.warning("only %d training spots for batch size %d; using one batch per epoch", n, bs)
        bs = n
    records = []
    step = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = perm[start : start + bs]
            patches = _batch_patches(datasets, where, idx)
            if config.augment:
                patches = augment_batch(patches, aug_rng)
            with tc.Tape() as tape:
                out = model.forward(patches, expr[idx], "train", fwd_rng)
                losses = compute_losses(out, cfg, config.tau)
            vals = losses.values()
            if not math.isfinite(vals["loss_total"]):
                raise NumericFault(f"non-finite loss at epoch {epoch} step {step}: {vals}")
            grads = tape.backward(losses.loss_total, set_grad=False)
            adamw_step(params, {name: grads[p] for name, p in params.items() if p in grads}, opt)
            if step % config.log_every == 0:
                rec = {"epoch": epoch, "step": step, **vals}
                records.append(rec)
                if log_sink is not None:
                    log_sink(rec)
            step += 1
    return TrainResult(model, records)


# ---------------------------------------------------------------- reference cache


@dataclass
class EmbeddingCache:
    gene_embeddings: np.ndarray  # M x P, float32
    expression_rows: np.ndarray  # M x d, float32
    provenance: list[tuple[str, str]]
    model_checksum: bytes

    def __post_init__(self):
        m = len(self.provenance)
        if self.gene_embeddings.shape[0] != m or self.expression_rows.shape[0] != m:
            raise DataError("embedding cache rows are not aligned")
        if len(self.model_checksum) != 32:
            raise DataError("model checksum must be 32 bytes")

    @property
    def size(self) -> int:
        return len(self.provenance)

    def sample_ids(self) -> set[str]:
        return {s for s, _ in self.provenance}


CACHE_MAGIC = b"CMRE"
CACHE_VERSION = 1


def cache_bytes(cache: EmbeddingCache) -> bytes:
    m, p = cache.gene_embeddings.shape
    d = cache.expression_rows.shape[1]
    parts = [CACHE_MAGIC, struct.pack("<4I", CACHE_VERSION, m, p, d), cache.model_checksum]
    parts.append(np.ascontiguousarray(cache.gene_embeddings, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(cache.expression_rows, dtype="<f4").tobytes())
    for sample_id, spot_id in cache.provenance:
        for s in (sample_id, spot_id):
            raw = s.encode()
            parts.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(parts)


def save_cache(cache: EmbeddingCache, path) -> None:
    Path(path).write_bytes(cache_bytes(cache))


def load_cache(path) -> EmbeddingCache:
    blob = Path(path).read_bytes()
    if len(blob) < 52 or blob[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: offset 0: not an embedding cache")
    version, m, p, d = struct.unpack("<4I", blob[4:20])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: offset 4: unsupported version {version}")
    digest = blob[20:52]
    off = 52
    need = off + 4 * m * (p + d)
    if len(blob) < need:
        raise DataError(f"{path}: offset {off}: truncated array payload")
    emb = np.frombuffer(blob, "<f4", m * p, off).reshape(m, p).astype(np.float32)
    off += 4 * m * p
    expr = np.frombuffer(blob, "<f4", m * d, off).reshape(m, d).astype(np.float32)
    off += 4 * m * d
    prov = []
    for _ in range(m):
        pair = []
        for _ in range(2):
            if off + 2 > len(blob):
                raise DataError(f"{path}: offset {off}: truncated provenance")
            (n,) = struct.unpack("<H", blob[off : off + 2])
            off += 2
            if off + n > len(blob):
                raise DataError(f"{path}: offset {off}: truncated provenance string")
            pair.append(blob[off : off + n].decode())
            off += n
        prov.append((pair[0], pair[1]))
    if off != len(blob):
        raise DataError(f"{path}: offset {off}: {len(blob) - off} trailing bytes")
    return EmbeddingCache(emb, expr, prov, digest)


def embed_genes_chunked(model: CmrcModel, expr: np.ndarray) -> np.ndarray:
    expr = np.asarray(expr, dtype=model.dtype)
    return np.concatenate(
        [model.embed_genes(expr[i : i + EMBED_CHUNK]) for i in range(0, len(expr), EMBED_CHUNK)]
    ).astype(np.float32)


def embed_images_chunked(model: CmrcModel, patches: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [model.embed_images(patches[i : i + EMBED_CHUNK]) for i in range(0, len(patches), EMBED_CHUNK)]
    ).astype(np.float32)


def build_reference_embeddings(
    model: CmrcModel,
    datasets: list[SampleDataset],
    model_checksum: bytes | None = None,
    expression_rows: list[np.ndarray] | None = None,
) -> EmbeddingCache:
    """Eval-mode gene embeddings for every spot of ``datasets``.

    ``expression_rows`` optionally replaces the stored per-spot expression
    (e.g. raw counts) while the embeddings still come from processed input.
    """
    check_shared_genes(datasets)
    if model_checksum is None:
        model_checksum = checksum(checkpoint_bytes(model))
    expr = np.concatenate([ds.expr for ds in datasets])
    emb = embed_genes_chunked(model, expr)
    rows = expr if expression_rows is None else np.concatenate(expression_rows)
    prov = [(ds.sample_id, s.spot_id) for ds in datasets for s in ds.spots]
    return EmbeddingCache(emb, rows.astype(np.float32), prov, model_checksum)


# ---------------------------------------------------------------- retrieval


def retrieve_topk(queries: np.ndarray, references: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-``k`` rows of ``references`` by cosine similarity, per query.

    Scores come back descending; equal scores are ordered by lower row index,
    including at the selection boundary.  Uses a partial partition per query
    rather than a full sort.
    """
    m = len(references)
    if not 1 <= k <= m:
        raise ConfigError(f"k must lie in [1, {m}], got {k}")
    sims = tc.cosine_sim_matrix(queries, references)
    b = len(sims)
    indices = np.empty((b, k), dtype=np.int64)
    scores = np.empty((b, k), dtype=np.float64)
    for i in range(b):
        row = sims[i]
        if k < m:
            kth = row[np.argpartition(-row, k - 1)[k - 1]]
            above = np.flatnonzero(row > kth)
            tied = np.flatnonzero(row == kth)[: k - above.size]
            chosen = np.concatenate([above, tied])
        else:
            chosen = np.arange(m)
        order = np.lexsort((chosen, -row[chosen]))
        indices[i] = chosen[order]
        scores[i] = row[indices[i]]
    return indices, scores


@dataclass
class Prediction:
    expression: np.ndarray  # B x d
    indices: np.ndarray  # B x k
    scores: np.ndarray  # B x k


def predict_from_embeddings(query_emb: np.ndarray, cache: EmbeddingCache, k: int) -> Prediction:
    idx, scores = retrieve_topk(query_emb, cache.gene_embeddings, k)
    rows = cache.expression_rows.astype(np.float64)
    pred = rows[idx].mean(axis=1)
    return Prediction(pred, idx, scores)


def predict_expression(model: CmrcModel, patches: np.ndarray, cache: EmbeddingCache, k: int) -> Prediction:
    """Embed test patches (eval mode, no augmentation or masking) and average
    the expression of the ``k`` most similar reference spots."""
    return predict_from_embeddings(embed_images_chunked(model, patches), cache, k)


def write_prediction_csv(path, spot_ids, gene_names, pred: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["spot_id"] + list(gene_names))
        for sid, row in zip(spot_ids, pred):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_prediction_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:1] != ["spot_id"]:
        raise DataError(f"{path}: line 1: header must start with spot_id")
    genes = rows[0][1:]
    ids, vals = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(genes) + 1:
            raise DataError(f"{path}: line {lineno}: expected {len(genes) + 1} fields")
        ids.append(row[0])
        vals.append([float(v) for v in row[1:]])
    return ids, genes, np.array(vals, dtype=np.float64).reshape(len(ids), len(genes))


def write_provenance_csv(path, spot_ids, prediction: Prediction, cache: EmbeddingCache) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["spot_id", "rank", "ref_sample", "ref_spot", "score"])
        for sid, idx_row, score_row in zip(spot_ids, prediction.indices, prediction.scores):
            for rank, (j, s) in enumerate(zip(idx_row, score_row), start=1):
                ref_sample, ref_spot = cache.provenance[j]
                w.writerow([sid, rank, ref_sample, ref_spot, repr(float(s))])


# ---------------------------------------------------------------- evaluation glue


@dataclass(frozen=True)
class EvalConfig:
    k: int = 50
    heg_k: int = 50
    hvg_k: int = 50
    heg_pool: int | None = None
    set_source: str = "test"
    k_list: tuple[int, ...] = DEFAULT_K_LIST

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        if self.k < 1 or self.heg_k < 1 or self.hvg_k < 1:
            raise ConfigError("k, heg_k and hvg_k must be >= 1")
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise ConfigError("k_list needs positive integers")
        if self.heg_pool is not None and self.heg_pool < 1:
            raise ConfigError("heg_pool must be >= 1")
        if self.set_source not in ("test", "train"):
            raise ConfigError(f"set_source must be 'test' or 'train', got {self.set_source!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["k_list"] = list(self.k_list)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(**d)


def gene_sets(truth: np.ndarray, marker_flags, eval_cfg: EvalConfig) -> tuple[list[int], list[int], list[int]]:
    """(HEG, HVG, marker) index lists ranked on ``truth``.

    HEGs are ranked by mean among the top ``heg_pool`` HVGs (all genes when
    ``heg_pool`` is None)."""
    d = truth.shape[1]
    hvg = select_hvgs(truth, eval_cfg.hvg_k)
    pool = select_hvgs(truth, eval_cfg.heg_pool or d)
    heg = select_hegs(truth, pool, eval_cfg.heg_k)
    markers = [int(i) for i in np.flatnonzero(np.asarray(marker_flags))]
    return heg, hvg, markers


def evaluate(
    pred: np.ndarray,
    truth: np.ndarray,
    gene_names: list[str],
    marker_flags,
    eval_cfg: EvalConfig,
    fold: str | None = None,
    k: int | None = None,
    set_truth: np.ndarray | None = None,
) -> MetricsReport:
    heg, hvg, markers = gene_sets(truth if set_truth is None else set_truth, marker_flags, eval_cfg)
    return summarize(per_gene_pcc(pred, truth), gene_names, heg, hvg, markers, fold=fold, k=k)


# ---------------------------------------------------------------- cross-validation


@dataclass
class FoldResult:
    test_sample: str
    train_samples: tuple[str, ...]
    model: CmrcModel
    checkpoint_checksum: bytes
    cache: EmbeddingCache
    predictions: dict[int, Prediction]
    reports: dict[int, MetricsReport]
    train_log: list[dict]


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    k_list: list[int]
    aggregate: dict[int, dict[str, float | None]]
    notes: list[str]

    def aggregate_json(self) -> dict:
        return {
            "folds": [f.test_sample for f in self.folds],
            "k_list": self.k_list,
            "notes": self.notes,
            "per_k": {str(k): v for k, v in self.aggregate.items()},
            "per_fold": {
                str(k): [
                    {"fold": f.test_sample, "heg_mean": f.reports[k].heg_mean, "hvg_mean": f.reports[k].hvg_mean,
                     "marker_mean": f.reports[k].marker_mean}
                    for f in self.folds
                ]
                for k in self.k_list
            },
        }


def feasible_k(k_list, m: int) -> tuple[list[int], list[str]]:
    ok = [k for k in k_list if 1 <= k <= m]
    notes = []
    dropped = [k for k in k_list if k not in ok]
    if dropped:
        notes.append(f"k values {dropped} exceed the reference size M={m} and were skipped")
    if not ok:
        ok = [m]
        notes.append(f"no requested k fits; using k=M={m}")
    return ok, notes


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def cross_validate(
    datasets: list[SampleDataset],
    config: TrainConfig,
    k_list=None,
    eval_cfg: EvalConfig | None = None,
    train_models: bool = True,
    out_dir=None,
    progress: Callable[[str], None] | None = None,
) -> CrossValResult:
    """Leave-one-sample-out training, retrieval and evaluation.

    With ``train_models=False`` each fold uses the untrained initialization,
    which serves as a no-learning baseline.  When ``out_dir`` is given each
    fold's artifacts are written to ``out_dir/fold_<sample>/``.
    """
    eval_cfg = eval_cfg or EvalConfig()
    if k_list is None:
        k_list = eval_cfg.k_list
    plan = make_folds(datasets)
    by_id = {ds.sample_id: ds for ds in datasets}
    folds, notes_all = [], []
    k_used: list[int] | None = None
    for train_ids, test_id in plan:
        train_sets = [by_id[i] for i in train_ids]
        test = by_id[test_id]
        if progress:
            progress(f"fold {test_id}: training on {', '.join(train_ids)}")
        if train_models:
            result = train(train_sets, config)
            model, train_log = result.model, result.log
        else:
            model, train_log = init_model(config), []
        blob = checkpoint_bytes(model)
        digest = checksum(blob)
        cache = build_reference_embeddings(model, train_sets, digest)
        if test_id in cache.sample_ids():
            raise DataError(f"fold {test_id}: test sample leaked into the reference cache")
        ks, notes = feasible_k(k_list, cache.size)
        for note in notes:
            log.info("fold %s: %s", test_id, note)
        notes_all.extend(f"fold {test_id}: {n}" for n in notes)
        k_used = ks if k_used is None else [k for k in k_used if k in ks]
        query = embed_images_chunked(model, test.spot_patches())
        set_truth = None
        if eval_cfg.set_source == "train":
            set_truth = np.concatenate([ds.expr for ds in train_sets])
        preds, reports = {}, {}
        for k in ks:
            preds[k] = predict_from_embeddings(query, cache, k)
            reports[k] = evaluate(preds[k].expression, test.expr, test.gene_names, test.marker_flags,
                                  eval_cfg, fold=test_id, k=k, set_truth=set_truth)
        fold = FoldResult(test_id, train_ids, model, digest, cache, preds, reports, train_log)
        folds.append(fold)
        if out_dir is not None:
            write_fold(Path(out_dir) / f"fold_{test_id}", fold, test, blob)
    aggregate = {
        k: {
            metric: _mean_or_none(getattr(f.reports[k], metric) for f in folds)
            for metric in ("heg_mean", "hvg_mean", "marker_mean")
        }
        for k in k_used
    }
    return CrossValResult(folds, k_used, aggregate, notes_all)


def write_fold(fold_dir: Path, fold: FoldResult, test: SampleDataset, blob: bytes) -> None:
    fold_dir.mkdir(parents=True, exist_ok=True)
    (fold_dir / "model.ckpt").write_bytes(blob)
    save_cache(fold.cache, fold_dir / "cache.emb")
    with open(fold_dir / "train_log.jsonl", "w") as f:
        for rec in fold.train_log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    for k, pred in fold.predictions.items():
        write_prediction_csv(fold_dir / f"pred_k{k}.csv", test.spot_ids, test.gene_names, pred.expression)
        write_provenance_csv(fold_dir / f"pred_k{k}.provenance.csv", test.spot_ids, pred, fold.cache)
        fold.reports[k].write_json(fold_dir / f"metrics_k{k}.json")
