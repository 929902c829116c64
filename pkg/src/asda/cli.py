"""Command line entry point: ``asda {train,eval,ablate,describe,gen-data}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from asda.config import ConfigError, ExperimentConfig, parse_value
from asda.experiments import ABLATION_AXES, EVAL_MODES, build_model, load_data, load_model_checkpoint, run_ablation, run_eval, run_train

log = logging.getLogger("asda")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    g = p.add_argument_group("experiment config (override the file)")
    for f in fields(ExperimentConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.type.upper(),
                       help=f"default: {f.default}")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    for name, typ in types.items():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            over[name] = parse_value(name, raw, typ)
    return cfg.with_overrides(**over) if over else cfg.validate()


def cmd_train(args):
    cfg = _config(args)
    res = run_train(cfg, args.out, resume=args.resume)
    last = res.history[-1] if res.history else None
    print(f"checkpoint: {res.checkpoint}")
    if last:
        print(f"epoch {last.epoch}: train_loss={last.train_loss:.6f} val_loss={last.val_loss:.6f}")


def cmd_eval(args):
    if args.query_descriptors or args.db_descriptors or args.groundtruth:
        return _eval_precomputed(args)
    cfg = _config(args)
    modes = tuple(m.strip().lower() for m in args.modes.split(","))
    setups = tuple(s.strip().upper() for s in args.setups.split(","))
    report = run_eval(cfg, args.checkpoint, args.out, modes=modes, setups=setups)
    for key, value in report["map"].items():
        print(f"{key:>10}  mAP = {'n/a' if value is None else f'{value:.4f}'}")


def _read_descriptor_csv(path):
    ids, rows = [], []
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("id"):
            raise ValueError(f"{path}: expected a header line starting with 'id'")
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric descriptor value") from None
            ids.append(parts[0])
    return ids, np.asarray(rows)


def _eval_precomputed(args):
    from asda.evaluation import evaluate_retrieval, load_groundtruth

    if not (args.query_descriptors and args.db_descriptors and args.groundtruth):
        raise ValueError("precomputed evaluation needs --query-descriptors, --db-descriptors and --groundtruth")
    qids, Q = _read_descriptor_csv(args.query_descriptors)
    dids, X = _read_descriptor_csv(args.db_descriptors)
    gts = {g.query: g for g in load_groundtruth(Path(args.groundtruth), args.gt_setup)}
    missing = [q for q in qids if q not in gts]
    if missing:
        raise ValueError(f"no groundtruth for queries {missing[:5]}")
    m, aps = evaluate_retrieval(Q, X, qids, dids, [gts[q] for q in qids])
    print(f"mAP = {m:.4f} over {len(qids)} queries ({args.gt_setup})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps({"setup": args.gt_setup, "map": m,
                                                   "per_query_ap": dict(zip(qids, aps))}, indent=2))


def cmd_ablate(args):
    cfg = _config(args)
    values = None
    if args.values:
        values = [v.strip() for v in args.values.split(",")]
    rows = run_ablation(cfg, args.axis, args.out, values)
    print("setting,map_m,map_h")
    for r in rows:
        print(f"{r['setting']},{r['map_m']},{r['map_h']}")


def cmd_describe(args):
    from asda.aggregation import save_descriptor, save_descriptors_csv
    from asda.features import load_feature_map
    from asda.plotting import plot_semantic_maps
    from asda.synth import read_ppm

    cfg = _config(args)
    model = build_model(cfg)
    if args.checkpoint:
        load_model_checkpoint(cfg, model, args.checkpoint)
    model.eval()
    image = None
    with torch.no_grad():
        if args.features:
            f = torch.as_tensor(load_feature_map(args.features))
        else:
            if args.image:
                image = read_ppm(args.image)
            else:
                ds, _ = load_data(cfg)
                image = ds.images[args.index]
            f = model.features(image)[0]
        desc = model.describe_features(f)
        maps = model.detector(f)
    save_descriptor(args.out, desc)
    if args.csv:
        save_descriptors_csv(args.csv, ["0"], desc[None])
    if args.plot and image is not None:
        plot_semantic_maps(image, maps.numpy(), args.plot, cfg.theta)
    print(f"wrote {desc.numel()}-d descriptor to {args.out}")


def cmd_gen_data(args):
    from asda.synth import write_manifest

    cfg = _config(args)
    ds, sp = load_data(cfg)
    path = write_manifest(ds, sp, args.out, images=not args.no_images)
    print(f"{len(ds)} views of {len(ds.instances)} instances -> {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asda", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mAP of a checkpoint (or random init), or of precomputed descriptors")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--modes", default="ss,ms+lw", help=f"comma list from {EVAL_MODES}")
    p.add_argument("--setups", default="M,H", help="comma list of E, M, H")
    p.add_argument("--query-descriptors", type=Path, help="CSV with id,d0,d1,...")
    p.add_argument("--db-descriptors", type=Path)
    p.add_argument("--groundtruth", type=Path)
    p.add_argument("--gt-setup", default="custom", choices=["custom", "E", "M", "H"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis, write CSV + plot")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=list(ABLATION_AXES))
    p.add_argument("--values", help="comma list overriding the default grid")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("describe", help="single image -> descriptor file")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", type=Path, help="binary PPM image")
    src.add_argument("--features", type=Path, help="precomputed feature-map file")
    src.add_argument("--index", type=int, default=0, help="view index in the synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path)
    p.add_argument("--plot", type=Path, help="render the semantic maps to this image file")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("gen-data", help="write the synthetic dataset and manifest")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-images", action="store_true")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"asda: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"asda: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
