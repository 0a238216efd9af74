"""Per-gene Pearson correlation and report assembly."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ShapeError


def pearson(x, y) -> float | None:
    """Pearson r, or None when either vector is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ContractError(f"pearson: need equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ContractError("pearson: need at least 2 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    xc = x - x.mean()
    yc = y - y.mean()
    r = float((xc @ yc) / (math.sqrt(xc @ xc) * math.sqrt(yc @ yc)))
    return min(1.0, max(-1.0, r))


def per_gene_pcc(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Column-wise Pearson r across spots; NaN marks undefined genes."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ShapeError(f"per_gene_pcc: {pred.shape} vs {truth.shape}")
    if pred.shape[0] < 2:
        raise ContractError("per_gene_pcc: need at least 2 spots")
    pc = pred - pred.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    num = (pc * tc).sum(axis=0)
    den = np.sqrt((pc * pc).sum(axis=0)) * np.sqrt((tc * tc).sum(axis=0))
    const = np.all(pred == pred[0], axis=0) | np.all(truth == truth[0], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.clip(num / den, -1.0, 1.0)
    r[const] = np.nan
    return r


def _set_mean(pcc: np.ndarray, idx) -> tuple[float | None, int]:
    vals = pcc[list(idx)] if len(idx) else np.array([])
    defined = vals[~np.isnan(vals)]
    missing = int(vals.size - defined.size)
    if defined.size == 0:
        return None, missing
    return float(defined.mean()), missing


@dataclass
class MetricsReport:
    per_gene: dict[str, float | None]
    heg_mean: float | None
    hvg_mean: float | None
    marker_mean: float | None
    heg_set: list[int]
    hvg_set: list[int]
    marker_set: list[int]
    undefined_gene_count: int
    set_undefined: dict[str, int] = field(default_factory=dict)
    fold: str | None = None
    k: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "fold": self.fold,
            "k": self.k,
            "heg_mean": self.heg_mean,
            "hvg_mean": self.hvg_mean,
            "marker_mean": self.marker_mean,
            "undefined_gene_count": self.undefined_gene_count,
            "set_undefined": self.set_undefined,
            "heg_set": self.heg_set,
            "hvg_set": self.hvg_set,
            "marker_set": self.marker_set,
            "per_gene": self.per_gene,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")


def summarize(
    pcc: np.ndarray,
    gene_names: list[str],
    heg_set,
    hvg_set,
    marker_set,
    fold: str | None = None,
    k: int | None = None,
) -> MetricsReport:
    pcc = np.asarray(pcc, dtype=np.float64)
    if len(gene_names) != pcc.size:
        raise ShapeError(f"summarize: {pcc.size} PCC values for {len(gene_names)} genes")
    sets = {"heg": list(map(int, heg_set)), "hvg": list(map(int, hvg_set)), "marker": list(map(int, marker_set))}
    for name, idx in sets.items():
        if any(not 0 <= i < pcc.size for i in idx):
            raise ContractError(f"{name} set has out-of-range gene indices")
    means, missing = {}, {}
    for name, idx in sets.items():
        means[name], missing[name] = _set_mean(pcc, idx)
    return MetricsReport(
        per_gene={g: (None if np.isnan(v) else float(v)) for g, v in zip(gene_names, pcc)},
        heg_mean=means["heg"],
        hvg_mean=means["hvg"],
        marker_mean=means["marker"],
        heg_set=sets["heg"],
        hvg_set=sets["hvg"],
        marker_set=sets["marker"],
        undefined_gene_count=int(np.isnan(pcc).sum()),
        set_undefined=missing,
        fold=fold,
        k=k,
    )


def gene_gene_correlation(expr: np.ndarray, gene_set) -> np.ndarray:
    """Pairwise Pearson r between the selected gene columns (NaN if undefined)."""
    idx = list(gene_set)
    if len(idx) < 2:
        raise ContractError("gene_gene_correlation needs at least 2 genes")
    x = np.asarray(expr, dtype=np.float64)[:, idx]
    xc = x - x.mean(axis=0)
    norms = np.sqrt((xc * xc).sum(axis=0))
    const = np.all(x == x[0], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (xc.T @ xc) / np.outer(norms, norms)
    c = np.clip((c + c.T) / 2.0, -1.0, 1.0)
    c[const, :] = np.nan
    c[:, const] = np.nan
    np.fill_diagonal(c, np.where(const, np.nan, 1.0))
    return c


def top_correlated_genes(pcc: np.ndarray, gene_names: list[str], k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise ContractError("k must be >= 1")
    pcc = np.asarray(pcc, dtype=np.float64)
    defined = np.flatnonzero(~np.isnan(pcc))
    order = defined[np.lexsort((defined, -pcc[defined]))]
    return [(gene_names[i], float(pcc[i])) for i in order[:k]]


def write_matrix_csv(path, matrix: np.ndarray, names: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([""] + list(names))
        for name, row in zip(names, matrix):
            w.writerow([name] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def spatial_grid_export(path, spots, pred: np.ndarray, truth: np.ndarray, gene_names: list[str], gene: str) -> int:
    """Write ``spot_id,x,y,predicted,truth`` for one gene, sorted by (y, x).

    Returns the number of rows written.
    """
    try:
        j = gene_names.index(gene)
    except ValueError:
        raise ConfigError(f"unknown gene {gene!r}") from None
    order = sorted(range(len(spots)), key=lambda i: (spots[i].y, spots[i].x, i))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["spot_id", "x", "y", "predicted", "truth"])
        for i in order:
            s = spots[i]
            w.writerow([s.spot_id, s.x, s.y, repr(float(pred[i, j])), repr(float(truth[i, j]))])
    return len(order)
