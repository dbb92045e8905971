"""Command-line entry point: ``ticketlab <command> [options]``.

Every command accepts ``--config FILE`` (JSON with ``model``, ``train``,
``data``, ``imp`` and ``pretrain`` sections) and flag overrides applied on top of it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .experiment import ExperimentConfig, Lab, compare_subnetworks, load_splits, rewind_point, sweep
from .pruning import PruneMask, PruneMode
from .report import emit_report, sweep_csv
from .trainer import evaluate, format_loss_history, train

log = logging.getLogger("ticketlab")

SECTIONS = ("model", "train", "data", "imp", "pretrain")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _coerce(section, key: str, raw: str):
    """Parse ``raw`` as the type of the existing field value."""
    current = getattr(section, key)
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, PruneMode):
        return PruneMode(raw)
    return type(current)(raw)


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    sections: dict[str, dict] = {s: {} for s in SECTIONS}
    top = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects section.field=value, got {item!r}")
        section, _, name = key.partition(".")
        if section in SECTIONS:
            obj = getattr(cfg, section)
            if name not in {f.name for f in fields(obj)}:
                raise ValueError(f"unknown field {key!r}")
            sections[section][name] = _coerce(obj, name, raw)
        elif not name and section in ("init_seed", "random_mask_seed", "workers"):
            top[section] = int(raw)
        else:
            raise ValueError(f"unknown config key {key!r}")
    shortcuts = [("steps", "train", "total_steps"), ("lr", "train", "learning_rate"),
                 ("batch_size", "train", "batch_size"), ("n_examples", "data", "n_examples"),
                 ("retrain_steps", "imp", "retrain_steps_per_round")]
    for flag, section, name in shortcuts:
        value = getattr(args, flag, None)
        if value is not None:
            sections[section][name] = value
    if getattr(args, "workers", None) is not None:
        top["workers"] = args.workers
    cfg = cfg.with_overrides(**sections)
    return replace(cfg, **top) if top else cfg


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _print_result(label: str, result) -> None:
    row = result.as_row()
    print(f"{label}: " + " ".join(f"{k}={v:.4f}" for k, v in row.items()))


# ---------------------------------------------------------------------------
# commands


def cmd_init(args, cfg: ExperimentConfig) -> None:
    params = rewind_point(cfg)
    save_checkpoint(args.out, Checkpoint(cfg.model, params, None,
                                         {"phase": "init", "seed": cfg.init_seed,
                                          "global_sparsity": 0.0,
                                          "pretrain_steps": cfg.pretrain.steps}))
    print(f"wrote {args.out} ({params.prunable_count()} prunable weights, digest {params.digest()[:16]})")


def _start(args, cfg: ExperimentConfig) -> Checkpoint:
    if args.init:
        return load_checkpoint(args.init, expected_config=cfg.model)
    return Checkpoint(cfg.model, rewind_point(cfg))


def cmd_train(args, cfg: ExperimentConfig) -> None:
    start = _start(args, cfg)
    mask = start.mask or PruneMask.ones(start.params)
    splits = load_splits(cfg)
    params, losses = train(start.params, mask, splits.train, cfg.train, cfg.model)
    if args.loss_history:
        _write(args.loss_history, format_loss_history(losses))
    save_checkpoint(args.out, Checkpoint(cfg.model, params, start.mask,
                                         {"phase": "finetuned", "seed": cfg.train.seed,
                                          "global_sparsity": mask.sparsity}))
    _print_result("test", evaluate(params, mask, splits.test, cfg.model))


def cmd_imp(args, cfg: ExperimentConfig) -> None:
    start = _start(args, cfg)
    schedule = replace(cfg.imp, target_sparsity=args.target,
                       mode=PruneMode(args.mode) if args.mode else cfg.imp.mode)
    lab = Lab(cfg, init=start.params)
    mask = lab.low_magnitude(schedule)
    for r in lab.imp_history:
        print(f"round {r.round}: sparsity {r.sparsity:.5f} pruned {r.pruned}")
    save_checkpoint(args.out, Checkpoint(cfg.model, start.params, mask,
                                         {"phase": "rewound", "seed": cfg.init_seed,
                                          "global_sparsity": mask.sparsity,
                                          "schedule": schedule.describe()}))
    print(f"wrote {args.out}")


def cmd_compare(args, cfg: ExperimentConfig) -> None:
    report = compare_subnetworks(args.sparsity, args.seeds, cfg, checkpoint_dir=args.checkpoint_dir)
    emit_report(report, args.out, args.format)
    for v in report.variants():
        agg = report.aggregate(v)
        if agg is None:
            print(f"{v.value}: failed")
        else:
            m, s = agg["overall"]
            print(f"{v.value}: overall {m:.4f} +/- {s:.4f}")
    print(f"wrote {args.out}")


def cmd_sweep(args, cfg: ExperimentConfig) -> None:
    report = sweep(args.targets, args.seeds, cfg, mode=args.mode, nested=not args.independent)
    _write(args.out, sweep_csv(report))
    print(sweep_csv(report), end="")


def cmd_eval(args, cfg: ExperimentConfig) -> None:
    ckpt = load_checkpoint(args.checkpoint, expected_config=cfg.model)
    splits = load_splits(cfg)
    result = evaluate(ckpt.params, ckpt.mask, getattr(splits, args.split), cfg.model)
    _print_result(args.split, result)
    if args.out:
        _write(args.out, json.dumps({**result.as_row(), "counts": list(result.counts)}) + "\n")


def cmd_export_data(args, cfg: ExperimentConfig) -> None:
    splits = load_splits(cfg)
    parts = splits._fields if args.split == "all" else (args.split,)
    out = Path(args.out)
    for name in parts:
        target = out / f"{name}.jsonl" if args.split == "all" else out
        _write(target, getattr(splits, name).to_jsonl())
        print(f"wrote {target} ({len(getattr(splits, name))} examples)")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override any config field (repeatable)")
    common.add_argument("--steps", type=int, help="fine-tune steps (train.total_steps)")
    common.add_argument("--lr", type=float, help="learning rate")
    common.add_argument("--batch-size", type=int)
    common.add_argument("--n-examples", type=int, help="synthetic dataset size")
    common.add_argument("--retrain-steps", type=int, help="IMP retraining steps per round")
    common.add_argument("--workers", type=int, help="parallel fine-tune processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ticketlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="create and save the rewind point")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("train", parents=[common], help="fine-tune (dense unless the checkpoint has a mask)")
    s.add_argument("--init", help="start checkpoint (default: the configured rewind point)")
    s.add_argument("--out", required=True)
    s.add_argument("--loss-history", help="write step,loss lines here")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("imp", parents=[common], help="iterative magnitude pruning to a target")
    s.add_argument("--init", help="rewind checkpoint (default: the configured rewind point)")
    s.add_argument("--target", type=float, required=True)
    s.add_argument("--mode", choices=[m.value for m in PruneMode])
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_imp)

    s = sub.add_parser("compare", parents=[common], help="dense / low / high / random subnetworks")
    s.add_argument("--sparsity", type=float, default=0.5)
    s.add_argument("--seeds", type=_ints, default=[1, 2, 3])
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "json", "structured-text"], default="csv")
    s.add_argument("--checkpoint-dir")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("sweep", parents=[common], help="accuracy across sparsity targets")
    s.add_argument("--targets", type=_floats,
                   default=[round(0.1 * i, 1) for i in range(1, 10)])
    s.add_argument("--seeds", type=_ints, default=[1, 2, 3])
    s.add_argument("--mode", choices=[m.value for m in PruneMode],
                   default=PruneMode.FRACTION_OF_ORIGINAL.value)
    s.add_argument("--independent", action="store_true",
                   help="separate IMP run per target instead of one nested trajectory")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=["train", "val", "test"], default="test")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export-data", parents=[common], help="write the synthetic dataset as JSONL")
    s.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    s.add_argument("--out", required=True, help="file, or directory when --split all")
    s.set_defaults(fn=cmd_export_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        args.fn(args, cfg)
    except Exception as e:  # every failure becomes one diagnostic line
        print(f"ticketlab {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
