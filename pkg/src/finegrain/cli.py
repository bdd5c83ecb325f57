"""Command-line entry point: ``finegrain <subcommand> ...``.

Subcommands
-----------
gradcheck   finite-difference checks of every backward pass (exit 1 on failure)
train       classifier training plus the weighted-average finetune
train-loc   heatmap-predictor distillation against a trained checkpoint
eval        box -> crop -> classify metrics for a checkpoint
run         all four stages in one process
ablate      pooling x embedding-loss x localizer x weighting grid, or a K sweep
gen-data    write the synthetic benchmark to disk
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from .ablation import AblationGrid, k_sweep_cells, run_ablation
from .config import EMBEDDING_LOSSES, ExperimentConfig
from .data import DatasetSpec, generate_dataset, load_dataset, save_dataset, split_seeds, stack
from .gradcheck import run_gradcheck
from .numerics import ConfigurationError
from .training import (
    Benchmark,
    evaluate_pipeline,
    finetune_weighted_average,
    load_checkpoint,
    run_recipe,
    save_checkpoint,
    train_classifier,
    train_localizer_stage,
)

log = logging.getLogger("finegrain")

_SKIP = {"dataset", "seed"}
BOX_SOURCES = ("localizer", "classifier", "truth", "full")


def _flag(name: str, prefix: str = "") -> str:
    return "--" + prefix + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, prefix: str, dest_prefix: str):
    defaults = cls()
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in _SKIP and cls is ExperimentConfig:
            continue
        default = getattr(defaults, f.name)
        dest = dest_prefix + f.name
        kw = {"dest": dest, "default": None, "help": f"default: {default}"}
        if isinstance(default, bool):
            parser.add_argument(_flag(f.name, prefix), action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(default, tuple):
            parser.add_argument(_flag(f.name, prefix), type=int, nargs="+", **kw)
        elif default is None:
            parser.add_argument(_flag(f.name, prefix), type=float, **kw)
        else:
            typ = hints.get(f.name, type(default))
            parser.add_argument(_flag(f.name, prefix), type=typ if typ in (int, float, str)
                                else type(default), **kw)


def add_config_flags(parser, seed_required: bool):
    group = parser.add_argument_group("experiment config")
    group.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    group.add_argument("--seed", type=int, required=seed_required, default=None)
    _add_dataclass_flags(group, ExperimentConfig, "", "cfg_")
    _add_dataclass_flags(group, DatasetSpec, "data-", "ds_")


def config_from_args(args) -> ExperimentConfig:
    base = json.loads(args.config.read_text()) if args.config else {}
    data = dict(base.pop("dataset", {}))
    for key, value in vars(args).items():
        if value is None:
            continue
        if key.startswith("cfg_"):
            base[key[4:]] = value
        elif key.startswith("ds_"):
            data[key[3:]] = value
    if args.seed is not None:
        base["seed"] = args.seed
    base["dataset"] = data
    return ExperimentConfig.from_dict(base)


def _emit(obj):
    print(json.dumps(obj, indent=1, default=str))


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(range(args.seeds))
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<20} checks={r.checks:<3} max_rel_err={r.max_error:.2e} "
              f"({r.seconds:.2f}s)")
        ok &= r.passed
    return 0 if ok else 1


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    bench = Benchmark.from_config(cfg)
    tm = train_classifier(cfg, bench, out / "metrics.jsonl")
    if cfg.weighted_finetune:
        finetune_weighted_average(tm, bench, out / "metrics.jsonl")
    path = save_checkpoint(out / "checkpoint.npz", tm)
    _emit({"checkpoint": str(path), "final": tm.trace[-1]})
    return 0


def cmd_train_loc(args) -> int:
    tm, _ = load_checkpoint(args.checkpoint)
    res = train_localizer_stage(tm)
    path = save_checkpoint(args.out or args.checkpoint, tm, res.predictor)
    _emit({"checkpoint": str(path), "final_loss": res.losses[-1] if res.losses else None})
    return 0


def _eval_data(args, cfg):
    if args.data is None:
        bench = Benchmark.from_config(cfg)
        return bench.test_images, bench.test_labels, bench.test_boxes
    return stack(load_dataset(args.data))


def cmd_eval(args) -> int:
    tm, predictor = load_checkpoint(args.checkpoint)
    images, labels, boxes = _eval_data(args, tm.config)
    sources = {"localizer": predictor, "classifier": tm.model, "truth": "truth", "full": None}
    if args.boxes == "localizer" and predictor is None:
        raise ConfigurationError("checkpoint has no localizer; run train-loc first")
    metrics = evaluate_pipeline(tm.model, sources[args.boxes], images, labels, boxes, tm.config)
    if not args.keep_boxes:
        metrics.pop("boxes")
    _emit({"boxes": args.boxes, **metrics})
    return 0


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    summary = run_recipe(cfg, args.out)["summary"]
    _emit({k: summary[k] for k in ("classifier_accuracy", "eval", "seconds")})
    return 0


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    seeds = tuple(args.seeds) if args.seeds else (cfg.seed,)
    if args.k_sweep:
        spatial = (cfg.dataset.image_size // 2 ** len(cfg.channels)) ** 2
        cells = k_sweep_cells(spatial, seeds, args.embedding_losses[0])
    else:
        cells = AblationGrid(tuple(args.poolings), tuple(args.embedding_losses),
                             tuple(args.localizer_modes), tuple(args.weighted_modes),
                             seeds).cells()
    rows = run_ablation(cfg, cells, args.out)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows, {failed} failed -> {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = config_from_args(args)
    train_seed, test_seed = split_seeds(cfg.data_seed)
    test_spec = dataclasses.replace(cfg.dataset, samples_per_class=cfg.test_per_class)
    out = Path(args.out)
    save_dataset(generate_dataset(cfg.dataset, train_seed), out / "train")
    save_dataset(generate_dataset(test_spec, test_seed), out / "test")
    (out / "config.json").write_text(cfg.to_json())
    print(f"wrote {out / 'train'} and {out / 'test'}")
    return 0


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finegrain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seeds", type=int, default=10, help="seeds per suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train the classifier (stages 1 and 2)")
    p.add_argument("--out", required=True, help="output directory")
    add_config_flags(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-loc", help="train the localizer from a checkpoint (stage 3)")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", type=Path, help="new checkpoint path (default: overwrite)")
    p.set_defaults(func=cmd_train_loc)

    p = sub.add_parser("eval", help="pipeline metrics for a checkpoint (stage 4)")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--boxes", choices=BOX_SOURCES, default="localizer")
    p.add_argument("--data", type=Path, help="dataset directory written by gen-data")
    p.add_argument("--keep-boxes", action="store_true", help="include per-sample boxes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="all four stages")
    p.add_argument("--out", required=True)
    add_config_flags(p, seed_required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="ablation grid or K sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", help="grid seeds (default: --seed)")
    p.add_argument("--poolings", nargs="+", default=["gap", "gmp", "gkmp"],
                   choices=["gap", "gmp", "gkmp"])
    p.add_argument("--embedding-losses", nargs="+", default=list(EMBEDDING_LOSSES),
                   choices=EMBEDDING_LOSSES)
    p.add_argument("--localizer-modes", nargs="+", type=_on_off, default=[False, True],
                   metavar="{on,off}")
    p.add_argument("--weighted-modes", nargs="+", type=_on_off, default=[False, True],
                   metavar="{on,off}")
    p.add_argument("--k-sweep", action="store_true",
                   help="sweep K over 1, 2, 4, ..., I*J instead of the grid")
    add_config_flags(p, seed_required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="write train/test datasets to disk")
    p.add_argument("--out", required=True)
    add_config_flags(p, seed_required=False)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
