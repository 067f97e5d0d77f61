"""Command line entry point: ``psfseg <subcommand>`` or ``python -m psfseg``.

Exit codes: 0 ok, 2 configuration error, 3 data or checkpoint error,
4 numeric-check failure, 1 any other package error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import tensor as T
from .config import MODELS, load_config
from .data import FAMILIES, DatasetSplit, generate_synthetic, load_dataset, save_dataset
from .errors import CheckpointError, ConfigError, DataError, NumericCheckError, PsfError
from .harness import BASELINES, evaluate_model, run_training, worker_count
from .hgrid import compose_full, load_grid, load_hier, save_grid, voxel_iou

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1
MODEL_ALIASES = {"sparse_segnet": "sparse"}


def _model(name: str) -> str:
    return MODEL_ALIASES.get(name, name)


def cmd_gen_data(a) -> int:
    families = a.family.split(",")
    shapes, parts = [], {}
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown family {fam!r}; choose from {sorted(FAMILIES)}")
        split = generate_synthetic(fam, a.count, a.points, T.make_rng(a.seed, f"data:{a.split}:{fam}"), a.split)
        shapes += split.shapes
        parts.update(split.part_count)
    save_dataset(DatasetSplit(shapes, parts, a.split), a.out)
    print(f"wrote {len(shapes)} shapes to {a.out}")
    return EXIT_OK


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(a) -> int:
    model = _model(a.model)
    cfg = load_config(a.config, _parse_set(a.set))
    cfg.validate(model)
    split = load_dataset(a.data, "train")
    res = run_training(model, split, cfg, a.out)
    for rec in res.records:
        print(f"{rec['category']:<10} epoch {rec['epoch']:>3} loss {rec['loss']:.4f} train mIoU {rec['train_miou']:.4f}")
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(a) -> int:
    model = _model(a.model)
    overrides = _parse_set(a.set)
    if a.empty_union:
        overrides["eval.empty_union"] = a.empty_union
    cfg = load_config(a.config, overrides)
    split = load_dataset(a.data, "test")
    train = load_dataset(a.train_data, "train") if a.train_data else None
    if model in MODELS and a.checkpoint is None:
        raise CheckpointError(f"--checkpoint is required for model {model}")
    report = evaluate_model(model, split, cfg, a.checkpoint, train_split=train)
    Path(a.report).parent.mkdir(parents=True, exist_ok=True)
    report.write(a.report)
    print(report.summary_table())
    return EXIT_OK


def cmd_compose(a) -> int:
    occ = compose_full(load_hier(a.inp))
    save_grid(a.out, occ)
    print(f"composed {occ.shape[0]}^3 grid, {int(occ.sum())} occupied voxels -> {a.out}")
    return EXIT_OK


def cmd_voxel_iou(a) -> int:
    ga, gb = load_grid(a.a), load_grid(a.b)
    if ga.shape != gb.shape:
        raise DataError(f"grid shapes differ: {a.a} is {ga.shape}, {a.b} is {gb.shape}")
    print(f"{voxel_iou(ga, gb):.6f}")
    return EXIT_OK


def cmd_selfcheck(a) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck(a.seeds)
    for name, err, tol, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<28} err={err:.3g}  tol={tol:g}")
    if not all(r[3] for r in results):
        raise NumericCheckError("selfcheck failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psfseg", description="Point-cloud part segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic labelled dataset")
    g.add_argument("--family", required=True, help="barbell, lamp, table, or a comma list")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--points", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train", help="split name; also selects the random stream")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    models = list(MODELS) + list(MODEL_ALIASES)
    t = sub.add_parser("train", help="train one network per category")
    t.add_argument("--model", required=True, choices=models)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or baseline on a dataset")
    e.add_argument("--model", required=True, choices=models + list(BASELINES))
    e.add_argument("--checkpoint")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--train-data", help="dataset for the constant baseline's majority labels")
    e.add_argument("--report", required=True)
    e.add_argument("--empty-union", choices=("one", "skip"))
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compose-hsp", help="compose a hierarchical grid into a dense grid file")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compose)

    v = sub.add_parser("voxel-iou", help="IoU of two dense grid files")
    v.add_argument("a")
    v.add_argument("b")
    v.set_defaults(fn=cmd_voxel_iou)

    s = sub.add_parser("selfcheck", help="run oracle and gradient checks")
    s.add_argument("--seeds", type=int, default=3)
    s.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        worker_count()
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericCheckError as e:
        print(f"numeric check failed: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except PsfError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
