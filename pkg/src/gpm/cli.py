"""Command-line entry point: ``gpm {generate,train,eval,ablate,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from gpm import dataset as dsmod
from gpm.evaluation import recall_at_k, write_csv
from gpm.experiments import SUMMARY_COLUMNS, m_sweep_cells, median_by, run_cells, ablation_cells
from gpm.losses import LOSS_KINDS
from gpm.model import Model
from gpm.numerics import DimensionError
from gpm.training import RunConfig, load_dataset, preset, train

log = logging.getLogger("gpm")


def build_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = RunConfig.from_text(Path(args.config).read_text(), base=cfg)
    cfg.apply(args.set or [])
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def cmd_generate(args) -> int:
    cfg = build_config(args)
    if args.seed is not None:
        cfg.generator.seed = args.seed
    ds = dsmod.generate(cfg.generator)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dsmod.save(ds, out)
    if args.csv:
        dsmod.export_csv(ds, out.with_suffix(".csv"))
    print(f"wrote {ds.n_places} places, {int(ds.counts.sum())} images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    if args.out:
        cfg.out_dir = args.out
    res = train(cfg)
    print(json.dumps({"final_recall": res.final_recall, "out_dir": cfg.out_dir}))
    return 0


def cmd_eval(args) -> int:
    model = Model.load(args.checkpoint)
    ds = dsmod.load(args.dataset)
    if ds.feature_dim != model.cfg.input_dim:
        raise DimensionError(f"checkpoint expects {model.cfg.input_dim}-d features, dataset has {ds.feature_dim}")
    split = dsmod.make_eval_split(ds, args.holdout, args.split_seed)
    rep = recall_at_k(model, split, ks=tuple(args.ks))
    row = {"checkpoint": str(args.checkpoint), "n_queries": rep.n_queries, "n_references": rep.n_references,
           **rep.row()}
    if args.out:
        write_csv(args.out, [row])
    print(json.dumps(row))
    return 0


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    seeds = _ints(args.seeds)
    if args.grid == "ablation":
        cells = ablation_cells(cfg, losses=args.losses.split(","), seeds=seeds)
    else:
        cells = m_sweep_cells(cfg, Ms=_ints(args.ms), seeds=seeds, loss=args.losses.split(",")[0])
    rows = run_cells(cells, cfg, load_dataset(cfg), workers=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    write_csv(out / "summary.csv", rows, SUMMARY_COLUMNS)
    for key, med in sorted(median_by(rows).items()):
        print(f"loss={key[0]} ohm={key[1]} gpm={key[2]} M={key[3]}  median recall@1={med:.4f}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.suffix == ".npz":
        m = Model.load(path)
        info = {"kind": "checkpoint", "config": m.cfg.__dict__,
                "params": {p.name: list(p.shape) for p in m.params()}}
    else:
        ds = dsmod.load(path)
        info = {"kind": "dataset", "n_places": ds.n_places, "n_images": int(ds.counts.sum()),
                "feature_dim": ds.feature_dim, "n_archetypes": int(len(np.unique(ds.archetypes))),
                "images_per_place": [int(ds.counts.min()), int(ds.counts.max())], "meta": ds.meta}
    print(json.dumps(info, indent=2))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--preset", choices=("desk", "published"), default="desk")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("generate", help="generate a synthetic place dataset")
    config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true", help="also export a CSV copy")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    config_flags(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall@K of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--ks", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    config_flags(p)
    p.add_argument("--grid", choices=("ablation", "msweep"), default="ablation")
    p.add_argument("--losses", default=",".join(LOSS_KINDS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--ms", default="8,16,32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarize a dataset or checkpoint file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=getattr(args, "threads", 1) if args.command != "ablate" else 1):
            return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"gpm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
