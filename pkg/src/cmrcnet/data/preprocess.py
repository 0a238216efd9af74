"""Expression preprocessing, gene-set selection and patch augmentation."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import ContractError, DegenerateInputError
from .dataset import SampleDataset

log = logging.getLogger(__name__)

TARGET_SUM = 1e4


def normalize_total_counts(expr: np.ndarray, target_sum: float = TARGET_SUM, spot_ids=None) -> np.ndarray:
    expr = np.asarray(expr, dtype=np.float64)
    if np.any(expr < 0):
        raise ContractError("expression counts must be nonnegative")
    totals = expr.sum(axis=1)
    zero = np.flatnonzero(totals == 0)
    if zero.size:
        who = spot_ids[zero[0]] if spot_ids is not None else f"row {zero[0]}"
        raise DegenerateInputError(f"spot {who} has zero total counts")
    return expr * (target_sum / totals)[:, None]


def log_transform(expr: np.ndarray) -> np.ndarray:
    expr = np.asarray(expr, dtype=np.float64)
    if np.any(expr < 0):
        raise ContractError("log_transform needs nonnegative input")
    return np.log1p(expr)


def preprocess_sample(ds: SampleDataset, target_sum: float = TARGET_SUM) -> SampleDataset:
    """Total-count normalization followed by log1p."""
    if ds.processed:
        log.warning("sample %s is already processed; normalizing again", ds.sample_id)
    normed = normalize_total_counts(ds.expr, target_sum, ds.spot_ids)
    return ds.with_expr(log_transform(normed), processed=True)


def _ranked(score: np.ndarray, candidates: np.ndarray, k: int) -> list[int]:
    # descending score, ties by lower gene index
    order = np.lexsort((candidates, -score))
    return [int(candidates[i]) for i in order[:k]]


def select_hvgs(expr: np.ndarray, k: int) -> list[int]:
    """Top-``k`` genes by variance of processed expression."""
    if k < 1:
        raise ContractError("k must be >= 1")
    expr = np.asarray(expr, dtype=np.float64)
    idx = np.arange(expr.shape[1])
    return _ranked(expr.var(axis=0), idx, k)


def select_hegs(expr: np.ndarray, hvg_indices, k: int) -> list[int]:
    """Top-``k`` genes by mean processed expression, restricted to ``hvg_indices``."""
    cand = np.asarray(list(hvg_indices), dtype=int)
    if cand.size == 0:
        raise ContractError("hvg_indices must be nonempty")
    if k < 1:
        raise ContractError("k must be >= 1")
    expr = np.asarray(expr, dtype=np.float64)
    return _ranked(expr[:, cand].mean(axis=0), cand, k)


def hvg_union(datasets: list[SampleDataset], k: int) -> list[int]:
    """Union of per-sample top-``k`` HVGs, ordered by first appearance."""
    seen: dict[int, None] = {}
    for ds in datasets:
        for g in select_hvgs(ds.expr, k):
            seen.setdefault(g, None)
    return list(seen)


def augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, vertical flip (each p=0.5) and a rotation by a
    multiple of 90 degrees.  Works on any H x W x C array; pixel values are
    only permuted, never interpolated."""
    hflip, vflip = rng.random(2) < 0.5
    quarter = int(rng.integers(4))
    out = patch
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    if quarter:
        out = np.rot90(out, quarter, axes=(0, 1))
    return np.ascontiguousarray(out)


def augment_batch(patches: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(p, rng) for p in patches])
