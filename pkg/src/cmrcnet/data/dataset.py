from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, DataError


@dataclass(frozen=True)
class SpotRecord:
    spot_id: str
    x: int
    y: int
    patch_index: int


@dataclass
class SampleDataset:
    """One tissue sample.

    ``patches`` holds u8 RGB tiles (N x H x W x 3); pixel ``v`` stands for the
    real value ``v / 255``.  ``expr`` is raw counts until
    :func:`cmrcnet.data.preprocess.preprocess_sample` sets ``processed``.
    """

    sample_id: str
    spots: list[SpotRecord]
    expr: np.ndarray
    gene_names: list[str]
    marker_flags: np.ndarray
    patches: np.ndarray
    processed: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def n_spots(self) -> int:
        return len(self.spots)

    @property
    def n_genes(self) -> int:
        return len(self.gene_names)

    @property
    def spot_ids(self) -> list[str]:
        return [s.spot_id for s in self.spots]

    def validate(self) -> None:
        n = len(self.spots)
        if self.expr.shape != (n, len(self.gene_names)):
            raise DataError(
                f"sample {self.sample_id}: expression is {self.expr.shape}, expected ({n}, {len(self.gene_names)})"
            )
        if len(self.patches) != n:
            raise DataError(f"sample {self.sample_id}: {len(self.patches)} patches for {n} spots")
        if len(set(self.gene_names)) != len(self.gene_names):
            raise DataError(f"sample {self.sample_id}: duplicate gene names")
        if len(self.marker_flags) != len(self.gene_names):
            raise DataError(f"sample {self.sample_id}: marker flags do not match gene count")
        for s in self.spots:
            if not 0 <= s.patch_index < n:
                raise DataError(f"sample {self.sample_id}: spot {s.spot_id} has patch_index {s.patch_index} out of range")

    def spot_patches(self, idx=None) -> np.ndarray:
        """Float patches in [0, 1] for the given spot rows (all by default)."""
        order = np.array([s.patch_index for s in self.spots])
        if idx is not None:
            order = order[idx]
        return self.patches[order].astype(np.float32) / np.float32(255.0)

    def with_expr(self, expr: np.ndarray, processed: bool) -> "SampleDataset":
        return replace(self, expr=expr, processed=processed)

    def subset_genes(self, idx) -> "SampleDataset":
        idx = list(idx)
        return replace(
            self,
            expr=self.expr[:, idx],
            gene_names=[self.gene_names[i] for i in idx],
            marker_flags=np.asarray(self.marker_flags)[idx],
        )


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[tuple[str, ...], str], ...]

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def make_folds(samples) -> FoldPlan:
    """Leave-one-sample-out: one fold per sample, in input order."""
    ids = [s.sample_id if isinstance(s, SampleDataset) else str(s) for s in samples]
    if len(ids) < 2:
        raise ConfigError(f"cross-validation needs at least 2 samples, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique")
    return FoldPlan(tuple((tuple(i for i in ids if i != test), test) for test in ids))


def check_shared_genes(datasets: list[SampleDataset]) -> list[str]:
    names = datasets[0].gene_names
    for ds in datasets[1:]:
        if ds.gene_names != names:
            raise ConfigError(f"sample {ds.sample_id} has a different gene list than {datasets[0].sample_id}")
    return names
