"""Command-line front end.

Subcommands: gen-data, train, eval, bench-memory, analyze-embeddings.
Exit codes: 0 success, 2 configuration error, 3 IO or file-format error,
4 numerical failure. Errors are printed to stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .data import SyntheticSpec, gen_synthetic, load_dataset, save_dataset
from .embeddings import load_embeddings
from .errors import ConfigError, FormatError, NumericalError
from .evaluation import (
    ConfusionMatrix,
    agglomerative_cluster,
    compute_metrics,
    memory_estimate,
    norm_frequency_correlation,
    predict_labels,
)
from .geometry import normalize_rows
from .trainer import (
    TrainSettings,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history_csv,
)

THREADS_ENV_VAR = "ESS_THREADS"
_SETTINGS_FIELDS = {f.name for f in dataclasses.fields(TrainSettings)}


def settings_from_dict(payload: dict) -> TrainSettings:
    """Build TrainSettings from a JSON dict, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError("config file must contain a JSON object")
    unknown = sorted(set(payload) - _SETTINGS_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return TrainSettings(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def settings_to_dict(settings: TrainSettings) -> dict:
    return dataclasses.asdict(settings)


def _resolve_threads(value) -> int:
    if value is None:
        value = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        threads = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"thread count must be an integer, got {value!r}")
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return threads


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _emit(payload) -> None:
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        feature_dim=args.feature_dim,
        pixels_per_image=args.pixels_per_image,
        num_images=args.num_images,
        class_distribution=args.distribution,
        zipf_exponent=args.zipf_exponent,
        noise_sigma=args.noise_sigma,
        ignore_fraction=args.ignore_fraction,
        seed=args.seed,
    )
    dataset = gen_synthetic(spec)
    if args.no_prototypes:
        dataset.prototypes = None
    save_dataset(dataset, args.out)
    snapshot = dataclasses.asdict(spec)
    _write_json(args.out + ".spec.json", snapshot)
    _emit({"out": args.out, "num_pixels": dataset.num_pixels,
           "num_classes": dataset.num_classes, "spec": snapshot})
    return 0


def _cmd_train(args) -> int:
    overrides = {
        name: getattr(args, name)
        for name in _SETTINGS_FIELDS
        if getattr(args, name, None) is not None
    }
    merged = settings_to_dict(TrainSettings())
    file_payload = {}
    if args.config is not None:
        with open(args.config) as fh:
            try:
                file_payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        probe = settings_from_dict(file_payload)   # validates keys and values
        merged.update(settings_to_dict(probe))
    merged.update(overrides)
    # Thread precedence: --threads flag, then the config file, then the
    # environment variable, then 1.
    if args.threads is not None:
        merged["n_threads"] = _resolve_threads(args.threads)
    elif "n_threads" not in file_payload:
        merged["n_threads"] = _resolve_threads(None)
    settings = settings_from_dict(merged)

    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), settings_to_dict(settings))

    result = train(dataset.features, dataset.labels, dataset.num_classes, settings)
    write_history_csv(os.path.join(args.out, "loss.csv"), result.history)
    save_checkpoint(os.path.join(args.out, "checkpoint"), result)

    embedded = _embed_dataset(result.extractor, dataset.features, settings.normalize)
    predictions = predict_labels(embedded, result.table)
    cm = ConfusionMatrix(dataset.num_classes).update(dataset.labels, predictions)
    metrics = compute_metrics(cm)
    _write_json(os.path.join(args.out, "metrics.json"), metrics)

    final = result.history[-1]
    _emit({
        "out": args.out,
        "iterations": len(result.history),
        "final_cls_loss": final[3],
        "final_reg_loss": final[4],
        "train_metrics": {k: metrics[k] for k in ("miou", "pacc", "fwiou")},
    })
    return 0


def _embed_dataset(extractor, features, normalize: bool, chunk: int = 8192) -> np.ndarray:
    parts = []
    for start in range(0, features.shape[0], chunk):
        out, _ = extractor.forward(features[start:start + chunk].astype(np.float64))
        parts.append(normalize_rows(out) if normalize else out)
    return np.concatenate(parts, axis=0)


def _cmd_eval(args) -> int:
    table, extractor, meta = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if dataset.num_classes != table.num_classes:
        raise ConfigError(
            f"dataset declares {dataset.num_classes} classes but the checkpoint "
            f"table has {table.num_classes}"
        )
    settings = meta.get("settings") or {}
    normalize = bool(settings.get("normalize", table.normalized))
    embedded = _embed_dataset(extractor, dataset.features, normalize)
    predictions = predict_labels(embedded, table)
    cm = ConfusionMatrix(dataset.num_classes).update(dataset.labels, predictions)
    metrics = compute_metrics(cm)
    if args.out:
        _write_json(args.out, metrics)
    _emit(metrics)
    return 0


def _cmd_bench_memory(args) -> int:
    def one(classes: int) -> dict:
        est = memory_estimate(args.batch, args.height, args.width, classes,
                              args.dim, args.bytes_per_scalar)
        return est.to_dict()

    if args.sweep_classes:
        try:
            sweep = [int(tok) for tok in args.sweep_classes.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"--sweep-classes must be comma-separated integers, "
                              f"got {args.sweep_classes!r}")
        if not sweep:
            raise ConfigError("--sweep-classes is empty")
        payload = {"sweep": [one(c) for c in sweep]}
    else:
        payload = one(args.classes)
    if args.out:
        _write_json(args.out, payload)
    _emit(payload)
    return 0


def _cmd_analyze_embeddings(args) -> int:
    table = load_embeddings(args.embeddings)
    payload = {
        "num_classes": table.num_classes,
        "dim": table.dim,
        "normalized": table.normalized,
        "dendrogram": agglomerative_cluster(table, linkage=args.linkage),
    }
    if args.frequencies:
        with open(args.frequencies) as fh:
            try:
                freqs = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.frequencies}: invalid JSON ({exc})") from exc
        payload["norm_frequency_correlation"] = norm_frequency_correlation(table, freqs)
    if args.out:
        _write_json(args.out, payload)
    _emit(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esseg",
        description="Train and inspect embedding-table classifiers on dense label data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a synthetic dataset to a binary file")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--feature-dim", type=int, required=True)
    p.add_argument("--pixels-per-image", type=int, default=1024)
    p.add_argument("--num-images", type=int, default=16)
    p.add_argument("--distribution", choices=("uniform", "zipf"), default="uniform")
    p.add_argument("--zipf-exponent", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--ignore-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-prototypes", action="store_true",
                   help="omit the generating prototypes from the file")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file of training settings; flags override it")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for the class search "
                        f"(default: ${THREADS_ENV_VAR} or 1)")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--num-neighbors", type=int, dest="num_neighbors")
    p.add_argument("--temperature", type=float, dest="temperature")
    p.add_argument("--margin", type=float, dest="margin")
    p.add_argument("--use-margin", action=argparse.BooleanOptionalAction,
                   dest="use_margin", default=None)
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction,
                   dest="normalize", default=None)
    p.add_argument("--dedup-targets", action=argparse.BooleanOptionalAction,
                   dest="dedup_targets", default=None)
    p.add_argument("--neg-sampling", choices=("knn", "random", "exact"),
                   dest="neg_sampling")
    p.add_argument("--extractor", choices=("identity", "linear", "mlp"))
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--base-lr", type=float, dest="base_lr")
    p.add_argument("--lr-power", type=float, dest="lr_power")
    p.add_argument("--momentum", type=float)
    p.add_argument("--embed-lr", type=float, dest="embed_lr")
    p.add_argument("--embed-lr-power", type=float, dest="embed_lr_power")
    p.add_argument("--embed-momentum", type=float, dest="embed_momentum")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--reduction", choices=("mean", "sum"))
    p.add_argument("--table-update", choices=("project", "jacobian"),
                   dest="table_update")
    p.add_argument("--margin-one-sided", action=argparse.BooleanOptionalAction,
                   dest="margin_one_sided", default=None)
    p.add_argument("--eval-every-epoch", action=argparse.BooleanOptionalAction,
                   dest="eval_every_epoch", default=None)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench-memory",
                       help="compare classifier-head activation memory against "
                            "a per-class score map")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--bytes-per-scalar", type=int, default=4, dest="bytes_per_scalar")
    p.add_argument("--sweep-classes", dest="sweep_classes",
                   help="comma-separated class counts; emits one estimate each")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bench_memory)

    p = sub.add_parser("analyze-embeddings",
                       help="cluster a saved table and correlate row norms "
                            "with class frequencies")
    p.add_argument("--embeddings", required=True, help="table file")
    p.add_argument("--frequencies", help="JSON array with one count per class")
    p.add_argument("--linkage", choices=("average",), default="average")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_analyze_embeddings)

    return parser


def _fail(exc: Exception, code: int) -> int:
    json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}},
              sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except FormatError as exc:
        return _fail(exc, 3)
    except NumericalError as exc:
        return _fail(exc, 4)
    except ValueError as exc:
        return _fail(exc, 2)
    except OSError as exc:
        return _fail(exc, 3)


if __name__ == "__main__":
    sys.exit(main())
