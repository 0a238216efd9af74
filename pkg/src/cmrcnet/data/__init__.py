from .dataset import FoldPlan, SampleDataset, SpotRecord, check_shared_genes, make_folds
from .io import load_dataset, load_sample, save_dataset, save_sample
from .preprocess import (
    augment,
    augment_batch,
    hvg_union,
    log_transform,
    normalize_total_counts,
    preprocess_sample,
    select_hegs,
    select_hvgs,
)
from .synthetic import SyntheticSpec, generate_synthetic

__all__ = [
    "FoldPlan",
    "SampleDataset",
    "SpotRecord",
    "SyntheticSpec",
    "augment",
    "augment_batch",
    "check_shared_genes",
    "generate_synthetic",
    "hvg_union",
    "load_dataset",
    "load_sample",
    "log_transform",
    "make_folds",
    "normalize_total_counts",
    "preprocess_sample",
    "save_dataset",
    "save_sample",
    "select_hegs",
    "select_hvgs",
]
