"""Synthetic benchmark: trained vs untrained vs contrastive-only.

Shared by ``scripts/run_benchmark.py``, ``scripts/run_ablation.py`` and the
acceptance suite so all three measure the same thing.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Callable

from .data import SyntheticSpec, generate_synthetic, preprocess_sample
from .model import ModelConfig
from .pipeline import CrossValResult, EvalConfig, TrainConfig, cross_validate

BENCH_EPOCHS = 10
BENCH_K = 50


def bench_model_config(**overrides) -> ModelConfig:
    """Reduced ViT sized for 4 x 256 spots of 32 px patches on a CPU."""
    base = dict(
        image_size=32, vit_patch=8, vit_dim=32, vit_depth=2, vit_heads=4,
        proj_dim=32, recon_dim=32, snn_hidden=256, gene_dim=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


def bench_spec(seed: int) -> SyntheticSpec:
    """4 samples x 256 spots, d=64, low noise, patches matching the bench model."""
    return SyntheticSpec(n_samples=4, spots_per_sample=256, d=64, patch_size=32, noise_sd=0.02, seed=seed)


def bench_eval_config() -> EvalConfig:
    return EvalConfig(k=BENCH_K, hvg_k=10, heg_k=10, k_list=(BENCH_K,))


@dataclasses.dataclass
class BenchRun:
    seed: int
    mode: str
    hvg_mean: float | None
    heg_mean: float | None
    seconds: float
    result: CrossValResult


def run_mode(seed: int, mode: str, epochs: int = BENCH_EPOCHS, datasets=None, **model_overrides) -> BenchRun:
    """One leave-one-sample-out run on the benchmark for ``seed``.

    ``mode`` is ``untrained`` (random initialization, full model), ``off``
    (contrastive only) or a reconstruction target (``image``/``gene``).
    """
    if datasets is None:
        datasets = [preprocess_sample(d) for d in generate_synthetic(bench_spec(seed))]
    recon = "image" if mode == "untrained" else mode
    model = bench_model_config(recon_target=recon, **model_overrides)
    tcfg = TrainConfig(epochs=epochs, seed=seed, model=model)
    t0 = time.perf_counter()
    cv = cross_validate(datasets, tcfg, eval_cfg=bench_eval_config(), train_models=mode != "untrained")
    agg = cv.aggregate[BENCH_K]
    return BenchRun(seed, mode, agg["hvg_mean"], agg["heg_mean"], time.perf_counter() - t0, cv)


def run_benchmark(seeds, modes=("untrained", "image", "off"), epochs: int = BENCH_EPOCHS,
                  progress: Callable[[str], None] | None = None) -> dict[tuple[int, str], BenchRun]:
    runs = {}
    for seed in seeds:
        datasets = [preprocess_sample(d) for d in generate_synthetic(bench_spec(seed))]
        for mode in modes:
            run = run_mode(seed, mode, epochs, datasets)
            runs[(seed, mode)] = run
            if progress:
                progress(f"seed {seed} {mode:9s} HVG {_fmt(run.hvg_mean)} HEG {_fmt(run.heg_mean)} ({run.seconds:.0f}s)")
    return runs


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.4f}"
