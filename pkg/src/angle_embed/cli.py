"""``angle-embed`` command line: train, eval, ablate, probe, annotate, stats, retrieve.

Exit codes: 0 success, 2 configuration or file-format error, 3 data or I/O
error, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .annotator import API_KEY_ENV, AnnotationRequest, HttpTransport, MockTransport, annotate, to_pairs
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, LabeledPair, dataset_stats, load_pairs, save_pairs
from .encoder import POOLINGS, EncoderConfig, embed_texts, split_tokens
from .evaluation import (
    encoder_scorer,
    evaluate_sts,
    retrieve_topk,
    saturation_report,
    spearman,
    strict_accuracy,
    write_rows,
)
from .objectives import LossConfig
from .trainer import NumericError, TrainConfig, fit

log = logging.getLogger("angle_embed")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ABLATION_VARIANTS = {
    "all": (1.0, 1.0, 1.0),
    "w/o ibn": (1.0, 0.0, 1.0),
    "w/o angle": (1.0, 1.0, 0.0),
    "only cosine": (1.0, 0.0, 0.0),
    "only ibn": (0.0, 1.0, 0.0),
    "only angle": (0.0, 0.0, 1.0),
}


class ConfigError(ValueError):
    pass


class DataPathError(DataError):
    pass


def _section_defaults() -> dict:
    train = TrainConfig().to_dict()
    train.pop("loss")
    return {
        "encoder": EncoderConfig().to_dict(),
        "train": train,
        "loss": asdict(LossConfig()),
        "data": {"train": None, "validation": None, "format": None},
        "output_dir": "run",
    }


def _merge_checked(base: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge_checked(base[key], value, path + ".")
        else:
            base[key] = value


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(path: str | None, overrides: list[str], seed: int | None, out: str | None) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides, then ``--seed``/``--out``.

    Data paths in the file are resolved against the file's directory.
    """
    cfg = _section_defaults()
    base_dir = Path(".")
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a JSON object")
        _merge_checked(cfg, loaded)
        base_dir = Path(path).parent
        for key in ("train", "validation"):
            if cfg["data"][key]:
                cfg["data"][key] = str(base_dir / cfg["data"][key])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        nested = {parts[-1]: _parse_value(raw)}
        for part in reversed(parts[:-1]):
            nested = {part: nested}
        _merge_checked(cfg, nested)
    if seed is not None:
        cfg["train"]["seed"] = seed
        cfg["encoder"]["seed"] = seed
    if out is not None:
        cfg["output_dir"] = out
    build_configs(cfg)
    return cfg


def build_configs(cfg: dict) -> tuple[EncoderConfig, TrainConfig]:
    try:
        enc = EncoderConfig(**cfg["encoder"])
        loss = LossConfig(**cfg["loss"])
        train = TrainConfig(**cfg["train"], loss=loss)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    return enc, train


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataPathError(f"data file not found: {path}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise DataError(f"output directory {path} is not writable: {e}") from e
    return p


def _write_manifest(out: Path, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "seed": config.get("train", {}).get("seed"),
        "config": config,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _validation_hook(val_pairs):
    gold = np.array([p.label for p in val_pairs])

    def hook(params, enc):
        return spearman(gold, encoder_scorer(params, enc)(val_pairs))

    return hook


def _train_from_config(cfg: dict, enc: EncoderConfig, train: TrainConfig):
    data = cfg["data"]
    if not data["train"]:
        raise ConfigError("data.train is required")
    paths = [data["train"]] + ([data["validation"]] if data["validation"] else [])
    for p in paths:
        _require_file(p)
    train_pairs = load_pairs(data["train"], data["format"])
    val_pairs = load_pairs(data["validation"], data["format"]) if data["validation"] else None
    hook = _validation_hook(val_pairs) if val_pairs else None
    return fit(train_pairs, enc, train, hook), val_pairs


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set, args.seed, args.out)
    enc, train = build_configs(cfg)
    print(json.dumps({"resolved_config": cfg}, sort_keys=True))
    out = _out_dir(cfg["output_dir"])
    result, _ = _train_from_config(cfg, enc, train)
    save_checkpoint(result.checkpoint, out / "model.ckpt")
    rows = [
        {
            "epoch": e.epoch,
            "train_loss": repr(e.train_loss),
            "val_spearman_x100": "" if e.val_metric is None else repr(100.0 * e.val_metric),
        }
        for e in result.log
    ]
    with (out / "train_log.csv").open("w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_spearman_x100\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['train_loss']},{r['val_spearman_x100']}\n")
    _write_manifest(out, "train", cfg)
    print(f"wrote {out / 'model.ckpt'} (best epoch {result.best_epoch})")
    return EXIT_OK


def _named_datasets(specs: list[str], fmt: str | None) -> dict[str, list[LabeledPair]]:
    datasets: dict[str, list[LabeledPair]] = {}
    for spec in specs:
        name, _, path = spec.rpartition("=") if "=" in spec else ("", "", spec)
        pairs = load_pairs(_require_file(path), fmt)
        default = name or Path(path).stem
        for p in pairs:
            datasets.setdefault(p.subset or default, []).append(p)
    return datasets


def cmd_eval(args) -> int:
    for spec in args.datasets:
        _require_file(spec.rpartition("=")[2] if "=" in spec else spec)
    ckpt = load_checkpoint(args.checkpoint)
    datasets = _named_datasets(args.datasets, args.format)
    out = _out_dir(args.out or "eval")
    report = evaluate_sts(encoder_scorer(ckpt.params, ckpt.encoder), datasets, bins=args.bins)
    report.write_csv(out / "eval.csv")
    report.histogram.write_csv(out / "density.csv")
    _write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "datasets": args.datasets})
    for row in report.rows():
        print(f"{row['subset']}\t{row['n_pairs']}\t{row['spearman_x100']:.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, args.set, args.seed, args.out)
    if not cfg["data"]["validation"]:
        raise ConfigError("ablation needs data.validation")
    poolings = args.pooling or [cfg["encoder"]["pooling"]]
    for p in poolings:
        if p not in POOLINGS:
            raise ConfigError(f"unknown pooling {p!r}")
    variants = args.variant or list(ABLATION_VARIANTS)
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {list(ABLATION_VARIANTS)}")
    out = _out_dir(cfg["output_dir"])
    rows = []
    for variant in variants:
        for pooling in poolings:
            run = copy.deepcopy(cfg)
            run["loss"].update(zip(("w1", "w2", "w3"), ABLATION_VARIANTS[variant]))
            run["encoder"]["pooling"] = pooling
            enc, train = build_configs(run)
            result, _ = _train_from_config(run, enc, train)
            metrics = [e.val_metric for e in result.log] or [result.initial_metric]
            rows.append({"variant": variant, "pooling": pooling, "val_spearman_x100": 100.0 * max(metrics)})
            print(f"{variant}\t{pooling}\t{rows[-1]['val_spearman_x100']:.2f}", flush=True)
    write_rows(out / "ablation.csv", rows)
    _write_manifest(out, "ablate", cfg)
    return EXIT_OK


def cmd_probe(args) -> int:
    out = _out_dir(args.out or "probe")
    lo, hi = 0.005, math.pi - 0.005
    rows = saturation_report(np.linspace(lo, hi, args.points))
    write_rows(out / "saturation.csv", rows)
    _write_manifest(out, "probe", {"points": args.points, "range": [lo, hi]})
    print(f"wrote {len(rows)} rows to {out / 'saturation.csv'}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    if not args.mock and not os.environ.get(API_KEY_ENV):
        raise ConfigError(f"{API_KEY_ENV} is not set (use --mock for an offline run)")
    path = _require_file(args.texts)
    texts = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not texts:
        raise DataError(f"no input texts in {path}")
    try:
        template = AnnotationRequest(
            size=args.size,
            model=args.model,
            endpoint=args.endpoint,
            timeout=args.timeout,
            max_in_flight=args.max_in_flight,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    transport = MockTransport() if args.mock else HttpTransport(args.endpoint)
    out = _out_dir(args.out or "annotate")
    report = annotate(texts, template, transport)
    pairs = to_pairs(report.sets)
    save_pairs(pairs, out / "pairs.jsonl", "jsonl")
    report.write_failures(out / "failures.jsonl")
    _write_manifest(out, "annotate", {"texts": str(path), "mock": args.mock, **asdict(template)})
    print(f"{len(pairs)} pairs, {len(report.failures)} failed requests")
    return EXIT_OK


def cmd_stats(args) -> int:
    for p in args.paths:
        _require_file(p)
    pairs = [pair for p in args.paths for pair in load_pairs(p, args.format)]
    stats = dataset_stats(pairs, split_tokens, args.long_threshold)
    out = _out_dir(args.out or "stats")
    write_rows(out / "stats.csv", [stats.as_row()])
    _write_manifest(out, "stats", {"paths": args.paths, "long_threshold": args.long_threshold})
    print(json.dumps(stats.as_row()))
    return EXIT_OK


def _load_groups(path: Path, k: int) -> list[tuple[str, list[str]]]:
    groups = []
    bad = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            texts = [str(t) for t in obj["texts"]]
            gid = str(obj.get("group", lineno))
        except (ValueError, KeyError, TypeError):
            bad.append(lineno)
            continue
        if len(texts) != k:
            bad.append(lineno)
            continue
        groups.append((gid, texts))
    if bad:
        raise DataError(f"caption groups must hold exactly {k} texts", bad)
    if not groups:
        raise DataError(f"no caption groups in {path}")
    return groups


def cmd_retrieve(args) -> int:
    path = _require_file(args.groups)
    ckpt = load_checkpoint(args.checkpoint)
    groups = _load_groups(path, args.k)
    texts = [t for _, members in groups for t in members]
    emb = embed_texts(texts, ckpt.params, ckpt.encoder)
    references, retrieved, rows = [], [], []
    for g, (gid, _) in enumerate(groups):
        ref = list(range(g * args.k, (g + 1) * args.k))
        got = retrieve_topk(emb[ref[0]], emb, args.k).tolist()
        references.append(ref)
        retrieved.append(got)
        rows.append({"group": gid, "hit": int(set(ref) == set(got))})
    acc = strict_accuracy(references, retrieved)
    out = _out_dir(args.out or "retrieve")
    write_rows(out / "retrieval.csv", rows)
    _write_manifest(out, "retrieve", {"checkpoint": str(args.checkpoint), "groups": str(path), "k": args.k})
    print(f"strict_accuracy\t{acc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="angle-embed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if config:
            p.add_argument("--config", help="JSON run configuration")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="dotted-path override, e.g. loss.w3=0 (repeatable)")

    p = sub.add_parser("train", help="train an encoder")
    common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Spearman and density report for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("datasets", nargs="+", help="pair files, optionally NAME=PATH")
    p.add_argument("--format", choices=("tsv", "jsonl"))
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="objective and pooling ablation grid")
    common(p, config=True)
    p.add_argument("--pooling", action="append", choices=POOLINGS)
    p.add_argument("--variant", action="append")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="gradient magnitudes in the cosine saturation zones")
    common(p)
    p.add_argument("--points", type=int, default=256)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("annotate", help="generate labelled pairs with an LLM")
    common(p)
    p.add_argument("--texts", required=True, help="one input sentence per line")
    p.add_argument("--mock", action="store_true", help="use the offline deterministic transport")
    p.add_argument("--endpoint", default="https://api.openai.com/v1")
    p.add_argument("--model", default="gpt-3.5-turbo")
    p.add_argument("--size", type=int, default=3)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--max-in-flight", type=int, default=4)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("stats", help="pair counts and token-length profile")
    common(p)
    p.add_argument("paths", nargs="+")
    p.add_argument("--format", choices=("tsv", "jsonl"))
    p.add_argument("--long-threshold", type=int, default=512)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("retrieve", help="strict top-k retrieval accuracy over caption groups")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--groups", required=True, help="JSON-Lines of {group, texts}")
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=cmd_retrieve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
