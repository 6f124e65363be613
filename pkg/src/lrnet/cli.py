"""Command-line entry point: ``lrnet <subcommand> ...``.

Training-related subcommands read a flat ``key = value`` config file; any
field can also be set through ``LRNET_<FIELD>`` environment variables.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ENV_PREFIX, load_config, parse_config_text
from .data import DatasetManifest, SynthConfig, split_dataset, synth_generate, tile_dataset

log = logging.getLogger("lrnet")


def _triple(kind):
    def parse(text):
        parts = [kind(p) for p in text.replace(":", ",").split(",")]
        if len(parts) != 3:
            raise argparse.ArgumentTypeError("expected three comma-separated values")
        return parts
    return parse


def _manifest_for(args, cfg):
    path = args.manifest or cfg.manifest
    if not path:
        raise SystemExit("error: no manifest (use --manifest or set manifest in the config)")
    return DatasetManifest.load(path), path


def cmd_tile(args):
    m = tile_dataset(args.src, args.out, args.tile_size, args.pad)
    m.root = "."
    m.save(Path(args.out) / "manifest.json")
    print(f"{len(m)} tiles written to {args.out}; {len(m.errors)} source errors")
    for e in m.errors:
        print(f"  {e}", file=sys.stderr)
    return 0 if len(m) else 1


def cmd_split(args):
    m = DatasetManifest.load(args.manifest)
    m = split_dataset(m, counts=args.counts, ratios=args.ratios, seed=args.seed)
    m.root = str(Path(m.root).resolve())
    out = args.out or args.manifest
    m.save(out)
    sizes = {s: len(m.split(s)) for s in ("train", "val", "test")}
    print(json.dumps({"manifest": str(out), "seed": args.seed, **sizes}))
    return 0


def cmd_synth(args):
    values = parse_config_text(Path(args.config).read_text(), SynthConfig) if args.config else {}
    cfg = SynthConfig(**values)
    m = synth_generate(cfg, args.out)
    m.root = "."
    m.save(Path(args.out) / "manifest.json")
    print(f"{len(m)} synthetic pairs written to {args.out}")
    return 0


def cmd_train(args):
    from .train import train

    manifest_path = str(Path(args.manifest).resolve()) if args.manifest else None
    cfg = load_config(args.config, manifest=manifest_path, checkpoint_dir=args.out)
    manifest, _ = _manifest_for(args, cfg)
    res = train(cfg, manifest, resume=args.resume)
    summary = {
        "params": res.params,
        "last": str(res.last),
        "best": str(res.best) if res.best else None,
        "final": res.history[-1] if res.history else None,
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args):
    from .train import evaluate

    manifest = DatasetManifest.load(args.manifest) if args.manifest else None
    report = evaluate(args.ckpt, args.split, manifest, out_dir=args.out)
    print(json.dumps({k: v for k, v in report.flat().items()}, indent=2))
    return 0


def cmd_predict(args):
    from .train import predict

    paths = predict(args.ckpt, args.t1, args.t2, args.out, label_path=args.label,
                    threshold=args.threshold, debug=args.debug)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_ablate(args):
    from .train import ablate

    cfg = load_config(args.config, manifest=args.manifest)
    manifest, _ = _manifest_for(args, cfg)
    rows = ablate(cfg, args.grid, manifest, out_dir=args.out, eval_split=args.split)
    for r in rows:
        if "error" in r:
            print(f"{r['name']}: rejected ({r['error']})")
        else:
            print(f"{r['name']}: params={r['params']} F1={r['F1']:.2f} F1_Edge={r['F1_Edge']:.2f}")
    print(f"csv: {Path(args.out) / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lrnet",
        description="Bi-temporal change detection: data preparation, training, evaluation.",
        epilog=f"Config fields can be overridden with {ENV_PREFIX}<FIELD> environment variables.",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tile", help="cut source images into non-overlapping tiles")
    s.add_argument("--src", required=True, help="directory with A/, B/, label/ PNGs")
    s.add_argument("--out", required=True)
    s.add_argument("--tile-size", type=int, default=256)
    s.add_argument("--pad", choices=("ceil", "floor"), default="ceil")
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("split", help="assign train/val/test splits to a manifest")
    s.add_argument("--manifest", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--counts", type=_triple(int), help="e.g. 7120,1024,2048")
    g.add_argument("--ratios", type=_triple(float), help="e.g. 8,1,1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output manifest (default: overwrite input)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("synth", help="generate a synthetic bi-temporal dataset")
    s.add_argument("--config", help="key = value file with SynthConfig fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--out", help="checkpoint directory (overrides config)")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="pooled-count area and edge metrics of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--manifest")
    s.add_argument("--out", help="directory for metrics JSON/CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict a change mask for one image pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--t1", required=True)
    s.add_argument("--t2", required=True)
    s.add_argument("--out", default="predictions")
    s.add_argument("--label", help="ground truth for a TP/FP/FN overlay")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--debug", action="store_true", help="also dump attention maps and feature norms")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ablate", help="train and evaluate a grid of module/loss variants")
    s.add_argument("--config")
    s.add_argument("--grid", default="modules", help="modules, losses or a JSON file of rows")
    s.add_argument("--manifest")
    s.add_argument("--out", default="ablation")
    s.add_argument("--split", help="evaluation split (default: the config's val split)")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
