"""Command-line entry point.

Subcommands: datagen, train, eval, ablate, gradcheck, sweep-k. Exit codes are
0 on success, 1 on a failed check or incompatible input, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import arrayio, gradcheck
from .config import RESOLVED_NAME, ConfigError, RunConfig, resolve
from .datagen import generate_dataset, load_dataset, write_dataset
from .errors import ManetError
from .plots import line_plot
from .retrieval import VARIANTS, ablation_run, embed_images, embed_texts, fuse_similarity, rank_metrics
from .training import CheckpointRecord, build_model, train

log = logging.getLogger("manetlab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ABLATION_FIELDS = ("variant", "seed", "r1", "r5", "r10", "params")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="file of 'key = value' lines")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manetlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="write a synthetic dataset directory")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-ids", type=int)
    p.add_argument("--images-per-id", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory (generated from config when omitted)")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="train each variant over several seeds")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--variants", default="baseline,ga+ila,full",
                   help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common(p)
    p.add_argument("--select", default="all", help="operation name or group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("sweep-k", help="train one model per number of topic centers")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--values", type=_int_list, default=[1, 2, 4, 6, 8, 10])
    p.add_argument("--out", type=Path, required=True)
    return parser


def _resolve(args, extra: dict[str, str] | None = None) -> RunConfig:
    overrides = [f"{k}={v}" for k, v in (extra or {}).items() if v is not None]
    return resolve(args.config, overrides + list(args.overrides))


DATA_META_KEYS = {"seed": "data_seed", "num_ids": "num_ids", "images_per_id": "images_per_id",
                  "holdout_per_id": "holdout_per_id", "clutter_block": "clutter_block"}


def _dataset(args, cfg: RunConfig):
    """Load ``--data`` or generate from the config; returns ``(dataset, cfg)``.

    A loaded dataset's own generation parameters replace the data keys so the
    echoed config describes the data actually used.
    """
    if getattr(args, "data", None) is not None:
        ds = load_dataset(args.data)
        if ds.caption_len != cfg.model.caption_len:
            raise ConfigError(f"dataset caption length {ds.caption_len} != caption_len {cfg.model.caption_len}")
        cfg = cfg.updated({key: ds.meta[k] for k, key in DATA_META_KEYS.items() if k in ds.meta})
        return ds, cfg
    d = cfg.data
    ds = generate_dataset(d.data_seed, d.num_ids, d.images_per_id, cfg.model.caption_len,
                          d.holdout_per_id, cfg.model.image_height, cfg.model.image_width,
                          clutter_block=d.clutter_block)
    return ds, cfg


def _out_dir(path: Path, cfg: RunConfig) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    cfg.write(path)
    return path


def cmd_datagen(args) -> int:
    cfg = _resolve(args, {"data_seed": args.seed, "num_ids": args.num_ids,
                          "images_per_id": args.images_per_id})
    ds, cfg = _dataset(argparse.Namespace(data=None), cfg)
    out = _out_dir(args.out, cfg)
    write_dataset(ds, out)
    print(f"wrote {len(ds)} samples ({ds.num_ids} identities) to {out}")
    return EXIT_OK


def _variant_flags(name: str | None) -> dict[str, str]:
    if name is None:
        return {}
    flags = VARIANTS[name]
    return {f: str(f in flags).lower() for f in ("ga", "ila", "rgl", "caf")}


def cmd_train(args) -> int:
    cfg = _resolve(args, {"seed": args.seed, **_variant_flags(args.variant)})
    ds, cfg = _dataset(args, cfg)
    out = _out_dir(args.out, cfg)
    result = train(cfg.train, ds, model_cfg=cfg.model, loss_cfg=cfg.loss, out_dir=out)
    summary = f"epochs={len(result.metrics)} best_epoch={result.best.epoch}"
    if result.metrics:
        last = result.metrics[-1]
        summary += f" r1={last['r1']:.4f} r5={last['r5']:.4f} r10={last['r10']:.4f}"
    print(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    config_file = args.config
    sibling = args.checkpoint.parent / RESOLVED_NAME
    if config_file is None and sibling.exists():
        config_file = sibling
    cfg = resolve(config_file, args.overrides)
    ds, cfg = _dataset(args, cfg)
    model = build_model(cfg.model, ds, cfg.train.seed)
    record = CheckpointRecord.load(args.checkpoint)
    record.restore(model)

    idx = ds.indices(args.split)
    gallery = embed_images(model, ds.images[idx])
    queries = embed_texts(model, ds.tokens[idx], ds.lengths[idx])
    metrics = rank_metrics(fuse_similarity(queries, gallery).S, ds.labels[idx], ds.labels[idx])

    out = _out_dir(args.out, cfg)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("split", "r1", "r5", "r10"))
        writer.writeheader()
        writer.writerow({"split": args.split, **metrics})
    dump = {"image/global": gallery.global_.numpy(), "text/global": queries.global_.numpy(),
            "labels": ds.labels[idx].astype(float)}
    if gallery.locals is not None:
        dump["image/locals"] = gallery.locals.numpy()
        dump["text/locals"] = queries.locals.numpy()
    arrayio.save_archive(out / "embeddings.arc", dump)
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return EXIT_OK


def _write_rows(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def cmd_ablate(args) -> int:
    variants = [v for v in args.variants.split(",") if v]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    cfg = _resolve(args)
    ds, cfg = _dataset(args, cfg)
    out = _out_dir(args.out, cfg)
    rows = ablation_run(variants, cfg.train, ds, args.seeds, cfg.model, cfg.loss)
    _write_rows(out / "results.csv", ABLATION_FIELDS, rows)
    for row in rows:
        print(f"{row['variant']:<12} seed={row['seed']} r1={row['r1']:.4f} params={row['params']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        gradcheck.resolve(args.select)
    except KeyError:
        raise UsageError(f"unknown selector {args.select!r}; choose an operation "
                         f"({', '.join(gradcheck.CASES)}) or group ({', '.join(gradcheck.GROUPS)})") from None
    reports = gradcheck.run(args.select, args.seed)
    lines = [r.line() for r in reports]
    print("\n".join(lines))
    if args.out is not None:
        out = _out_dir(args.out, _resolve(args))
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_sweep_k(args) -> int:
    if any(k < 1 for k in args.values):
        raise UsageError("every K must be at least 1")
    cfg = _resolve(args)
    if not cfg.model.ila:
        raise UsageError("sweep-k needs ila enabled")
    ds, cfg = _dataset(args, cfg)
    out = _out_dir(args.out, cfg)
    rows = []
    for k in sorted(args.values):
        model_cfg = dataclasses.replace(cfg.model, num_centers=k)
        result = train(cfg.train, ds, model_cfg=model_cfg, loss_cfg=cfg.loss)
        rows.append({"k": k, "r1": result.metrics[-1]["r1"]})
        print(f"k={k} r1={rows[-1]['r1']:.4f}")
        _write_rows(out / "sweep_k.csv", ("k", "r1"), rows)
    svg = line_plot([r["k"] for r in rows], [100 * r["r1"] for r in rows],
                    "Number of topic centers K", "R@1 (%)", "Held-out R@1 versus K")
    (out / "sweep_k.svg").write_text(svg)
    return EXIT_OK


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "sweep-k": cmd_sweep_k}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"manetlab {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManetError, FileNotFoundError, ValueError) as exc:
        print(f"manetlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
