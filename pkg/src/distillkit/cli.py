"""Command-line entry point: ``distillkit <command> [--config PATH] [--set KEY=VALUE] ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as cfgtree
from .data import export_dataset, generate_synthetic, make_batches
from .errors import DistillError
from .experiment import (
    AXES,
    ExperimentConfig,
    format_table,
    load_datasets,
    load_experiment,
    load_teacher,
    prepare_run_dir,
    run_ablation,
    run_student,
    run_teacher,
)
from .engine import load_model
from .gradcheck import COMPONENTS, gradcheck
from .metrics import ConfusionMatrix, export_maps, miou, upsample_prediction, write_per_class_csv, write_summary_json

log = logging.getLogger("distillkit")


def config_key_listing() -> str:
    flat = cfgtree.flatten(cfgtree.to_dict(ExperimentConfig()))
    width = max(len(k) for k in flat)
    lines = ["config keys (override with --set KEY=VALUE, values parsed as JSON):"]
    lines += [f"  {k.ljust(width)}  {json.dumps(v)}" for k, v in flat.items()]
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config leaf; repeatable")
    p.add_argument("--seed", type=int, help="shorthand for --set distill.seed=N")
    p.add_argument("--out", help="shorthand for --set out_dir=DIR")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="distillkit", description=__doc__, epilog=config_key_listing(),
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=config_key_listing(),
                           formatter_class=fmt)
        _common(p)
        return p

    add("train-teacher", "train the teacher into OUT/teacher")
    add("train-student", "train the student without distillation into OUT/student-plain/seedN")
    add("distill", "distill the student from the teacher into OUT/distill/seedN")
    p = add("eval", "score a checkpoint on the validation set")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--name", help="report directory name under OUT/eval (default: checkpoint's parent)")
    p.add_argument("--untrained", action="store_true",
                   help="ignore weights and predict from all-zero logits (random baseline)")
    p = add("gradcheck", "finite-difference gradient check")
    p.add_argument("component", choices=COMPONENTS + ("all",))
    p = add("synth-data", "write the synthetic train/val sets as PNG pairs")
    p = add("ablate", "run an ablation sweep and print a comparison table")
    p.add_argument("--axis", choices=AXES, required=True)
    return parser


def _load(args) -> ExperimentConfig:
    return load_experiment(args.config, args.overrides, args.seed, args.out)


def cmd_train_teacher(args) -> int:
    cfg = _load(args)
    res = run_teacher(cfg)
    print(f"teacher mIoU {res.final_eval['miou']:.2f} -> {res.checkpoint}")
    return 0


def cmd_train_student(args) -> int:
    cfg = _load(args)
    res = run_student(cfg, "student-plain", Path(cfg.out_dir) / "student-plain" / f"seed{cfg.distill.seed}")
    print(f"plain student mIoU {res.final_eval['miou']:.2f} -> {res.checkpoint}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load(args)
    res = run_student(cfg, "distill", Path(cfg.out_dir) / "distill" / f"seed{cfg.distill.seed}")
    print(f"distilled student mIoU {res.final_eval['miou']:.2f} -> {res.checkpoint}")
    return 0


class _ZeroLogits(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, images):
        taps = self.model(images)
        taps.logits = torch.zeros_like(taps.logits)
        return taps


def cmd_eval(args) -> int:
    cfg = _load(args)
    model = load_model(args.checkpoint)
    if args.untrained:
        model = _ZeroLogits(model)
    _, val_ds = load_datasets(cfg)
    if val_ds is None:
        raise DistillError("no validation data configured (data.val_image_dir / data.val_label_dir)")
    name = args.name or args.checkpoint.resolve().parent.name
    out = prepare_run_dir(Path(cfg.out_dir) / "eval" / name,
                          {"checkpoint": str(args.checkpoint.resolve()), "data": cfgtree.to_dict(cfg.data),
                           "untrained": args.untrained})
    resize = {}
    if cfg.data.resize_to:
        resize = {"resize_to": tuple(cfg.data.resize_to), "stride_multiple": cfg.model.student.total_stride}
    cm = ConfusionMatrix(val_ds.num_classes)
    maps, n_maps = [], cfg.eval.max_maps if cfg.eval.export_maps else 0
    with torch.no_grad():
        for images, labels in make_batches(val_ds, cfg.eval.batch_size, shuffle=False, **resize):
            pred = upsample_prediction(model(images).logits, labels.shape[-2:])
            cm.update(pred, labels)
            maps.extend(pred[: max(0, n_maps - len(maps))])
    rep = miou(cm)
    write_per_class_csv(rep, out / "per_class.csv", name=name)
    write_summary_json(rep, out / "summary.json")
    if maps:
        export_maps(maps, out / "maps", num_classes=val_ds.num_classes)
    shown = "undefined" if rep.miou is None else f"{rep.miou:.2f}"
    print(f"mIoU {shown} over {cm.total} pixels -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    comps = COMPONENTS if args.component == "all" else (args.component,)
    ok = True
    for c in comps:
        rep = gradcheck(c, seed=args.seed or 0)
        print(rep)
        ok &= rep.passed
    return 0 if ok else 1


def cmd_synth_data(args) -> int:
    cfg = _load(args)
    root = Path(cfg.out_dir) / "synth"
    prepare_run_dir(root, {"train": cfgtree.to_dict(cfg.data.train), "val": cfgtree.to_dict(cfg.data.val)})
    for split, spec in (("train", cfg.data.train), ("val", cfg.data.val)):
        export_dataset(generate_synthetic(spec), root / split)
        print(f"{split}: {spec.num_samples} pairs -> {root / split}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    rows = run_ablation(cfg, args.axis, progress=lambda msg: log.info("%s", msg))
    text, table = format_table(rows, cfg.train.seeds)
    out = Path(cfg.out_dir) / f"ablate-{args.axis}"
    with (out / "table.csv").open("w", newline="") as fh:
        csv.writer(fh).writerows(table)
    print(text)
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "synth-data": cmd_synth_data,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
