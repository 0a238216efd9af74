"""Command-line entry point: ``cmrcnet <command> ...``.

Commands: synth, train, embed, infer, eval, xval.  Every command that writes
an output directory also writes ``config.lock.json`` there; feeding that file
back through ``--config`` (or ``--spec`` for synth) reruns the stage.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SyntheticSpec,
    check_shared_genes,
    generate_synthetic,
    load_dataset,
    preprocess_sample,
    save_dataset,
)
from .errors import ConfigError, ContractError, DataError, DegenerateInputError, NumericFault, ShapeError
from .evaluation import gene_gene_correlation, spatial_grid_export, write_matrix_csv
from .model import ModelConfig
from .pipeline import (
    DEFAULT_K_LIST,
    EvalConfig,
    TrainConfig,
    build_reference_embeddings,
    cross_validate,
    evaluate,
    load_cache,
    predict_expression,
    read_prediction_csv,
    save_cache,
    train,
    write_prediction_csv,
    write_provenance_csv,
)

log = logging.getLogger("cmrcnet")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
LOCK_NAME = "config.lock.json"
RUN_KEYS = {"model", "train", "data", "eval", "seed"}
# TrainConfig fields owned by other RunConfig sections
TRAIN_RESERVED = {"model", "seed"}


# ---------------------------------------------------------------- run config


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict
    eval: EvalConfig
    seed: int

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        for key in TRAIN_RESERVED:
            train.pop(key)
        return {
            "model": self.model.to_dict(),
            "train": train,
            "data": self.data,
            "eval": self.eval.to_dict(),
            "seed": self.seed,
        }


def _profile(name: str) -> ModelConfig:
    if name == "desk":
        return ModelConfig.desk()
    if name == "paper":
        return ModelConfig.paper()
    raise ConfigError(f"unknown profile {name!r}")


def parse_run_config(doc: dict, profile: str = "desk") -> tuple[RunConfig, set[str]]:
    """Strictly parse a RunConfig document.

    Returns the config and the set of model keys given explicitly, so callers
    can fill the rest (gene count, image size) from the data.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model_doc = doc.get("model", {})
    base = _profile(profile).to_dict()
    bad = set(model_doc) - set(base)
    if bad:
        raise ConfigError(f"unknown model config keys: {sorted(bad)}")
    model = ModelConfig.from_dict({**base, **model_doc})
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    train_doc = dict(doc.get("train", {}))
    reserved = TRAIN_RESERVED & set(train_doc)
    if reserved:
        raise ConfigError(f"train section may not set {sorted(reserved)} (use the top-level sections)")
    train_cfg = TrainConfig.from_dict({**train_doc, "seed": seed}, model=model)
    data = doc.get("data", {})
    if not isinstance(data, dict) or set(data) - {"path", "synthetic", "samples"}:
        raise ConfigError("data section accepts only 'path', 'samples' and 'synthetic'")
    if "synthetic" in data:
        SyntheticSpec.from_dict(data["synthetic"])
    eval_cfg = EvalConfig.from_dict(doc.get("eval", {}))
    return RunConfig(model, train_cfg, dict(data), eval_cfg, seed), set(model_doc)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: config file not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{p}: invalid JSON: {err}") from None


def _write_lock(out_dir: Path, doc: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / LOCK_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_run_config(args) -> tuple[RunConfig, set[str]]:
    """Config file (if any) plus command-line data selection."""
    doc = _read_json(args.config) if args.config else {}
    rc, explicit = parse_run_config(doc, args.profile)
    if args.data is not None:
        rc.data = {**rc.data, "path": str(args.data)}
    if getattr(args, "samples", None):
        rc.data = {**rc.data, "samples": args.samples}
    if "path" not in rc.data:
        raise ConfigError("no data directory: pass --data or set data.path in the config")
    return rc, explicit


def _apply_overrides(rc: RunConfig, args, explicit: set[str], datasets) -> RunConfig:
    changes = {}
    if "gene_dim" not in explicit:
        changes["gene_dim"] = datasets[0].n_genes
    if "image_size" not in explicit:
        changes["image_size"] = int(datasets[0].patches.shape[1])
    if getattr(args, "recon", None) is not None:
        changes["recon_target"] = args.recon
    if getattr(args, "recon_loss", None) is not None:
        changes["recon_loss"] = args.recon_loss
    if getattr(args, "mask_rate", None) is not None:
        changes["mask_rate"] = args.mask_rate
    if getattr(args, "epochs", None) is not None:
        rc.train = rc.train.replace(epochs=args.epochs)
    model = rc.model.replace(**changes)
    rc.model = model
    rc.train = rc.train.replace(model=model)
    return rc


def _load_processed(data_dir, samples: str | None = None):
    root = Path(data_dir)
    if not root.is_dir():
        raise ConfigError(f"{root}: data directory not found")
    datasets = load_dataset(root)
    if samples:
        wanted = [s for s in samples.split(",") if s]
        by_id = {d.sample_id: d for d in datasets}
        missing = [s for s in wanted if s not in by_id]
        if missing:
            raise ConfigError(f"unknown samples {missing}; available: {sorted(by_id)}")
        datasets = [by_id[s] for s in wanted]
    check_shared_genes(datasets)
    return [preprocess_sample(d) for d in datasets]


class _Progress:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, msg: str) -> None:
        if not self.quiet:
            print(msg, flush=True)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    say = _Progress(args.quiet)
    if args.spec:
        doc = _read_json(args.spec)
        if isinstance(doc, dict) and "data" in doc:
            doc = doc["data"].get("synthetic", {})
        spec = SyntheticSpec.from_dict(doc)
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    datasets = generate_synthetic(spec)
    save_dataset(datasets, out)
    _write_lock(out, {"data": {"synthetic": spec.to_dict()}})
    say(f"wrote {len(datasets)} samples x {spec.spots_per_sample} spots to {out}")
    return 0


def cmd_train(args) -> int:
    say = _Progress(args.quiet)
    rc, explicit = _load_run_config(args)
    datasets = _load_processed(rc.data["path"], rc.data.get("samples"))
    rc = _apply_overrides(rc, args, explicit, datasets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    say(f"training on {', '.join(d.sample_id for d in datasets)} "
        f"({sum(d.n_spots for d in datasets)} spots, recon={rc.model.recon_target})")
    with open(out / "train_log.jsonl", "w") as f:

        def sink(rec):
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["step"] % 50 == 0:
                say(f"epoch {rec['epoch']} step {rec['step']} loss_total {rec['loss_total']:.4f}")

        result = train(datasets, rc.train, log_sink=sink)
    digest = save_checkpoint(result.model, out / "model.ckpt")
    _write_lock(out, rc.to_dict())
    say(f"checkpoint {out / 'model.ckpt'} sha256 {digest.hex()}")
    return 0


def cmd_embed(args) -> int:
    say = _Progress(args.quiet)
    model, digest = load_checkpoint(args.model)
    datasets = _load_processed(args.data, args.samples)
    if datasets[0].n_genes != model.cfg.gene_dim:
        raise ConfigError(f"checkpoint expects {model.cfg.gene_dim} genes, data has {datasets[0].n_genes}")
    cache = build_reference_embeddings(model, datasets, digest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cache(cache, out)
    say(f"cached {cache.size} reference spots from {', '.join(d.sample_id for d in datasets)} to {out}")
    return 0


def cmd_infer(args) -> int:
    say = _Progress(args.quiet)
    model, digest = load_checkpoint(args.model)
    cache = load_cache(args.cache)
    if cache.model_checksum != digest:
        raise ConfigError(
            f"cache {args.cache} was built with checkpoint {cache.model_checksum.hex()[:12]}, "
            f"not {digest.hex()[:12]} ({args.model})"
        )
    datasets = _load_processed(args.data, args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        leaked = ds.sample_id in cache.sample_ids()
        if leaked:
            log.warning("sample %s is part of the reference cache", ds.sample_id)
        pred = predict_expression(model, ds.spot_patches(), cache, args.k)
        write_prediction_csv(out / f"pred_{ds.sample_id}_k{args.k}.csv", ds.spot_ids, ds.gene_names, pred.expression)
        write_provenance_csv(out / f"pred_{ds.sample_id}_k{args.k}.provenance.csv", ds.spot_ids, pred, cache)
        say(f"predicted {ds.n_spots} spots of {ds.sample_id} (k={args.k})")
    _write_lock(out, {"model": str(args.model), "cache": str(args.cache), "data": str(args.data),
                      "samples": args.samples, "k": args.k})
    return 0


def cmd_eval(args) -> int:
    say = _Progress(args.quiet)
    ids, genes, pred = read_prediction_csv(args.pred)
    datasets = _load_processed(args.data)
    match = [d for d in datasets if d.spot_ids == ids]
    if not match:
        raise DataError(f"{args.pred}: spot ids do not match any sample in {args.data}")
    test = match[0]
    if genes != test.gene_names:
        raise DataError(f"{args.pred}: gene columns differ from sample {test.sample_id}")
    eval_cfg = EvalConfig(k=1, heg_k=args.heg_k, hvg_k=args.hvg_k, heg_pool=args.heg_pool)
    report = evaluate(pred, test.expr, genes, test.marker_flags, eval_cfg, fold=test.sample_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    corr_set = report.hvg_set if len(report.hvg_set) >= 2 else list(range(len(genes)))
    names = [genes[i] for i in corr_set]
    write_matrix_csv(out / "gene_corr_pred.csv", gene_gene_correlation(pred, corr_set), names)
    write_matrix_csv(out / "gene_corr_truth.csv", gene_gene_correlation(test.expr, corr_set), names)
    grid_genes = args.grid_gene or [genes[i] for i in report.marker_set[:3]]
    for g in grid_genes:
        spatial_grid_export(out / f"grid_{g}.csv", test.spots, pred, test.expr, genes, g)
    _write_lock(out, {"pred": str(args.pred), "data": str(args.data), "eval": eval_cfg.to_dict(),
                      "grid_gene": grid_genes})
    fmt = lambda v: "undefined" if v is None else f"{v:.4f}"
    say(f"{test.sample_id}: HEG {fmt(report.heg_mean)}  HVG {fmt(report.hvg_mean)}  "
        f"marker {fmt(report.marker_mean)}  undefined genes {report.undefined_gene_count}")
    return 0


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--k-list must be comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise ConfigError("--k-list needs positive integers")
    return ks


def cmd_xval(args) -> int:
    say = _Progress(args.quiet)
    rc, explicit = _load_run_config(args)
    datasets = _load_processed(rc.data["path"], rc.data.get("samples"))
    rc = _apply_overrides(rc, args, explicit, datasets)
    if args.k_list is not None:
        rc.eval = dataclasses.replace(rc.eval, k_list=tuple(_parse_k_list(args.k_list)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cv = cross_validate(datasets, rc.train, eval_cfg=rc.eval, out_dir=out, progress=say)
    for note in cv.notes:
        say(note)
    (out / "aggregate.json").write_text(json.dumps(cv.aggregate_json(), indent=2, sort_keys=True) + "\n")
    _write_lock(out, rc.to_dict())
    for k in cv.k_list:
        agg = cv.aggregate[k]
        fmt = lambda v: "undefined" if v is None else f"{v:.4f}"
        say(f"k={k}: HEG {fmt(agg['heg_mean'])}  HVG {fmt(agg['hvg_mean'])}  marker {fmt(agg['marker_mean'])}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk",
                        help="base model dimensions (default: desk)")

    p = argparse.ArgumentParser(prog="cmrcnet", description="Contrastive + masked cross-modal reconstruction "
                                "training and retrieval inference for spot expression prediction.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--spec", help="SyntheticSpec JSON (or a config.lock.json with data.synthetic)")
    s.add_argument("--seed", type=int, help="override the spec seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def recon_flags(q):
        q.add_argument("--recon", choices=("off", "image", "gene"), help="reconstruction target (off = contrastive only)")
        q.add_argument("--recon-loss", choices=("mse", "cosine"))
        q.add_argument("--mask-rate", type=float)
        q.add_argument("--epochs", type=int, help="override train.epochs")

    t = sub.add_parser("train", parents=[common], help="train a model on all (or selected) samples")
    t.add_argument("--config", help="RunConfig JSON")
    t.add_argument("--data", help="dataset directory (default: data.path from the config)")
    t.add_argument("--samples", help="comma-separated sample ids to train on (default: all)")
    t.add_argument("--out", required=True)
    recon_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", parents=[common], help="build the reference embedding cache")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--samples", help="comma-separated reference sample ids (default: all)")
    e.add_argument("--out", required=True, help="cache file to write")
    e.set_defaults(func=cmd_embed)

    i = sub.add_parser("infer", parents=[common], help="predict expression by top-k retrieval")
    i.add_argument("--model", required=True)
    i.add_argument("--cache", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--samples", help="comma-separated query sample ids (default: all)")
    i.add_argument("--k", type=int, default=50)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("eval", parents=[common], help="score a prediction CSV against ground truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--heg-k", type=int, default=50)
    v.add_argument("--hvg-k", type=int, default=50)
    v.add_argument("--heg-pool", type=int, help="rank HEGs among this many top HVGs (default: all genes)")
    v.add_argument("--grid-gene", action="append", help="gene to export as a spatial grid (repeatable)")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    x = sub.add_parser("xval", parents=[common], help="leave-one-sample-out cross-validation")
    x.add_argument("--config", help="RunConfig JSON")
    x.add_argument("--data", help="dataset directory (default: data.path from the config)")
    x.add_argument("--k-list", help="comma-separated k values (default: eval.k_list, i.e. "
                   + ",".join(map(str, DEFAULT_K_LIST)) + ")")
    x.add_argument("--out", required=True)
    recon_flags(x)
    x.set_defaults(func=cmd_xval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DegenerateInputError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFault, FloatingPointError) as err:
        print(f"numeric fault: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
