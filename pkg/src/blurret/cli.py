"""Command-line entry point: gen-data, train, embed, eval, blur-stats.

Every command reads an optional flat JSON config; explicit flags win over
config keys. Errors are reported as one JSON object on stderr, with exit
code 2 for bad input (config, paths, files) and 1 for failures during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from blurret import dataset_gen, trainer
from blurret.dataset_gen import SPLITS, DataConfig, DatasetManifest
from blurret.errors import BlurRetError, ConfigError
from blurret.retrieval_eval import LEVELS, read_descriptors, report, write_descriptors

log = logging.getLogger("blurret")


class UsageError(Exception):
    """Bad input: maps to exit code 2."""


def _settings(args, defaults=None):
    """Desk defaults, then the config file, then explicit flags."""
    flat = dict(defaults or {})
    if args.config is not None:
        flat.update(trainer.load_config(args.config))
    for key, value in vars(args).items():
        if key not in ("config", "command", "func") and value is not None:
            flat[key] = value
    return flat


def _manifest(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        manifest = DatasetManifest.read(path)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed manifest {path}: {exc}") from exc
    return manifest


def _existing(path, what):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def cmd_gen_data(args):
    flat = _settings(args)
    try:
        cfg = DataConfig.from_dict(flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = dataset_gen.build_dataset(cfg, int(flat["seed"]), Path(args.out))
    hist = manifest.bl_histogram()
    print(json.dumps({"records": len(manifest.records), "by_bl": {str(k): v for k, v in sorted(hist.items())}}))


def cmd_train(args):
    flat = _settings(args, trainer.DESK_OVERRIDES)
    manifest = _manifest(flat["manifest"])
    cfg = trainer.train_config_from_flat(flat)
    result = trainer.train(manifest, cfg, int(flat["seed"]), out_dir=Path(args.out))
    last = result.log_rows[-1]
    print(json.dumps({"checkpoint": str(result.checkpoint), "steps": result.steps, "L_joint": last["L_joint"]}))


def cmd_embed(args):
    from blurret.model import load_model

    flat = _settings(args, {"split": "test-query", "batch_size": 256})
    manifest = _manifest(flat["manifest"])
    if flat["split"] not in SPLITS:
        raise UsageError(f"unknown split {flat['split']!r}; expected one of {list(SPLITS)}")
    records = manifest.split(flat["split"])
    if not records:
        raise UsageError(f"split {flat['split']!r} is empty")
    model, _, _ = load_model(_existing(flat["checkpoint"], "checkpoint"))
    store = trainer.embed_records(model, manifest.root, records, int(flat["batch_size"]))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_descriptors(args.out, store)
    print(json.dumps({"descriptors": len(store), "dim": int(store.matrix.shape[1]), "out": str(args.out)}))


def _cutoff(value):
    if value in (None, "all"):
        return "all"
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"cutoff must be 'all' or a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"cutoff must be positive, got {n}")
    return n


def cmd_eval(args):
    flat = _settings(args, {"cutoff": "all", "per_bl_matrix": False, "denominator": "min"})
    queries = read_descriptors(_existing(flat["queries"], "query descriptors"))
    database = read_descriptors(_existing(flat["database"], "database descriptors"))
    cutoff = _cutoff(flat["cutoff"])
    out = report(queries, database, None if cutoff == "all" else cutoff,
                 bool(flat["per_bl_matrix"]), flat["denominator"])
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    print(text)


def blur_stats(manifest):
    """Per-split image counts by blur level, with totals."""
    splits = {}
    for name in SPLITS:
        recs = manifest.split(name)
        if not recs:
            continue
        hist = manifest.bl_histogram(name)
        levels = sorted(set(LEVELS) | set(hist))
        splits[name] = {"total": len(recs), "by_bl": {str(bl): hist.get(bl, 0) for bl in levels}}
    return {"total": len(manifest.records), "splits": splits}


def format_stats(stats):
    levels = sorted({int(k) for s in stats["splits"].values() for k in s["by_bl"]})
    header = f"{'split':<15}{'total':>7}  " + "".join(f"{bl:>6}" for bl in levels)
    lines = [header, "-" * len(header)]
    for name, s in stats["splits"].items():
        counts = "".join(f"{s['by_bl'].get(str(bl), 0):>6}" for bl in levels)
        lines.append(f"{name:<15}{s['total']:>7}  {counts}")
    return "\n".join(lines)


def cmd_blur_stats(args):
    stats = blur_stats(_manifest(args.manifest))
    print(format_stats(stats) if args.format == "table" else json.dumps(stats, indent=2))


def build_parser():
    parser = argparse.ArgumentParser(prog="blurret", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", dest="_verbose")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset and its manifest")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a descriptor model on the train split")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write descriptors for one manifest split")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="mAP report for query and database descriptor files")
    p.add_argument("--config")
    p.add_argument("--queries")
    p.add_argument("--database")
    p.add_argument("--cutoff")
    p.add_argument("--per-bl-matrix", action="store_const", const=True, dest="per_bl_matrix")
    p.add_argument("--denominator", choices=("min", "positives"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("blur-stats", help="image counts per split and blur level")
    p.add_argument("--manifest", required=True)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(func=cmd_blur_stats)
    return parser


_REQUIRED = {
    "train": ("manifest",),
    "embed": ("checkpoint", "manifest"),
    "eval": ("queries", "database"),
}


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    verbose = args.__dict__.pop("_verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    try:
        missing = [k for k in _REQUIRED.get(args.command, ()) if _settings(args).get(k) is None]
        if missing:
            raise UsageError(f"{args.command}: missing {', '.join('--' + m.replace('_', '-') for m in missing)}")
        args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
        return _fail(2, type(exc).__name__, str(exc))
    except BlurRetError as exc:
        return _fail(1, type(exc).__name__, str(exc))
    except ValueError as exc:
        # unreadable descriptor or checkpoint files
        return _fail(2, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
