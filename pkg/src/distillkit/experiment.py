"""Experiment-level config tree and the multi-run protocols built on it.

Run directory layout under ``out_dir``::

    teacher/                    supervised teacher
    student-plain/seed<N>/      student without distillation
    distill/seed<N>/            distilled student (SKR+PEA)
    skr/seed<N>/                distilled student without PEA
    ablate-<axis>/<row>/seed<N>/
    eval/<name>/                per-class CSV, summary JSON, PNG maps

Every run directory holds ``config.json`` with the resolved config and its
hash. Re-running with the same hash resumes; a different hash is refused.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import config as cfgtree
from .data import SynthSpec, cached_synthetic, load_paired_dataset
from .engine import DistillConfig, TrainResult, load_model, train
from .errors import ConfigError
from .losses import LossWeights
from .models import DESK_STUDENT, DESK_TEACHER, EncoderConfig, HierarchicalSegmenter, freeze

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelPair:
    teacher: EncoderConfig = DESK_TEACHER
    student: EncoderConfig = DESK_STUDENT


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | paired
    train: SynthSpec = SynthSpec(seed=0, num_samples=256)
    val: SynthSpec = SynthSpec(seed=1, num_samples=64)
    image_dir: str | None = None
    label_dir: str | None = None
    val_image_dir: str | None = None
    val_label_dir: str | None = None
    resize_to: tuple[int, int] | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "paired"):
            raise ConfigError(f"data.source must be 'synthetic' or 'paired', got {self.source!r}")


@dataclass(frozen=True)
class TrainConfig:
    # the teacher trains from scratch, so it gets its own learning rate
    teacher_lr: float = 1e-3
    teacher_iters: int = 2000
    teacher_seed: int = 0
    teacher_checkpoint: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_interval: int = 500
    checkpoint_interval: int = 500
    cache_teacher: bool = True


@dataclass(frozen=True)
class EvalConfig:
    batch_size: int = 16
    export_maps: bool = False
    max_maps: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelPair = field(default_factory=ModelPair)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        for role, m in (("teacher", self.model.teacher), ("student", self.model.student)):
            if m.n_stages != self.distill.n_stages:
                raise ConfigError(f"model.{role} has {m.n_stages} stages, distill weights cover "
                                  f"{self.distill.n_stages}")
        if self.model.teacher.num_classes != self.model.student.num_classes:
            raise ConfigError("teacher and student disagree on num_classes")


def load_experiment(path=None, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path``, then ``--set`` overrides."""
    tree = cfgtree.to_dict(ExperimentConfig())
    text = None
    if path is not None:
        user, text = cfgtree.load_json_tree(path)
        try:
            cfgtree.from_dict(ExperimentConfig, user)
        except ConfigError as e:
            raise cfgtree.located(e, path, text) from None
        tree = _merge(tree, user)
    for ov in overrides:
        cfgtree.apply_override(tree, ov)
    if seed is not None:
        tree["distill"]["seed"] = seed
    if out is not None:
        tree["out_dir"] = str(out)
    try:
        return cfgtree.from_dict(ExperimentConfig, tree)
    except ConfigError as e:
        raise (cfgtree.located(e, path, text) if text else e) from None


def _merge(base: dict, user: dict) -> dict:
    out = dict(base)
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def prepare_run_dir(path, tree: dict) -> Path:
    """Create ``path`` and record ``tree``; refuse if it already holds another config."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h = cfgtree.config_hash(tree)
    rec = path / "config.json"
    if rec.exists():
        old = json.loads(rec.read_text())
        if old.get("hash") != h:
            lines = cfgtree.diff(old.get("config", {}), tree)
            raise ConfigError(f"{path} holds a run with a different config; refusing:\n  "
                              + "\n  ".join(lines or ["(hash mismatch)"]))
    else:
        rec.write_text(json.dumps({"hash": h, "config": tree}, indent=2, sort_keys=True))
    return path


def load_datasets(cfg: ExperimentConfig):
    d = cfg.data
    if d.source == "synthetic":
        k = cfg.model.student.num_classes
        if d.train.num_classes != k or d.val.num_classes != k:
            raise ConfigError(f"data.train/val.num_classes must equal the model's {k}")
        return cached_synthetic(d.train), cached_synthetic(d.val)
    missing = [n for n in ("image_dir", "label_dir") if getattr(d, n) is None]
    if missing:
        raise ConfigError(f"data.source=paired needs data.{' and data.'.join(missing)}")
    k = cfg.model.student.num_classes
    train_ds = load_paired_dataset(d.image_dir, d.label_dir, k)
    val_ds = None
    if d.val_image_dir and d.val_label_dir:
        val_ds = load_paired_dataset(d.val_image_dir, d.val_label_dir, k)
    return train_ds, val_ds


def teacher_distill_config(cfg: ExperimentConfig) -> DistillConfig:
    """Supervised recipe for the teacher; independent of the distillation settings."""
    m, t = cfg.distill.n_stages, cfg.train
    return DistillConfig(
        weights=LossWeights((0.0,) * m, (0.0,) * m),
        pea_stages=(False,) * m,
        optimizer=dataclasses.replace(cfg.distill.optimizer, base_lr=t.teacher_lr),
        schedule=dataclasses.replace(cfg.distill.schedule, total_iters=t.teacher_iters),
        batch_size=cfg.distill.batch_size,
        seed=t.teacher_seed,
    )


def run_teacher(cfg: ExperimentConfig, datasets=None) -> TrainResult:
    train_ds, val_ds = datasets or load_datasets(cfg)
    tcfg = teacher_distill_config(cfg)
    tree = {"model": cfgtree.to_dict(cfg.model.teacher), "data": cfgtree.to_dict(cfg.data),
            "recipe": cfgtree.to_dict(tcfg)}
    out = prepare_run_dir(Path(cfg.out_dir) / "teacher", tree)
    return train(tcfg, train_ds, "teacher", cfg.model.teacher,
                 val_dataset=val_ds, out_dir=out, eval_interval=cfg.train.eval_interval,
                 eval_batch_size=cfg.eval.batch_size, checkpoint_interval=cfg.train.checkpoint_interval,
                 resize_to=cfg.data.resize_to)


def teacher_path(cfg: ExperimentConfig) -> Path:
    if cfg.train.teacher_checkpoint:
        return Path(cfg.train.teacher_checkpoint)
    return Path(cfg.out_dir) / "teacher" / "model.pt"


def load_teacher(cfg: ExperimentConfig) -> HierarchicalSegmenter:
    path = teacher_path(cfg)
    if not path.exists():
        raise ConfigError(f"no teacher checkpoint at {path}; run train-teacher first "
                          "or set train.teacher_checkpoint")
    teacher = load_model(path)
    if teacher.cfg != cfg.model.teacher:
        lines = cfgtree.diff(cfgtree.to_dict(teacher.cfg), cfgtree.to_dict(cfg.model.teacher))
        raise ConfigError(f"{path} holds a different teacher architecture:\n  " + "\n  ".join(lines))
    return freeze(teacher)


def run_student(cfg: ExperimentConfig, mode: str, run_dir, dcfg: DistillConfig | None = None,
                teacher: HierarchicalSegmenter | None = None, datasets=None) -> TrainResult:
    """Train one student (``student-plain`` or ``distill``) into ``run_dir``."""
    dcfg = dcfg or cfg.distill
    train_ds, val_ds = datasets or load_datasets(cfg)
    tree = {"model": cfgtree.to_dict(cfg.model), "data": cfgtree.to_dict(cfg.data),
            "distill": cfgtree.to_dict(dcfg), "mode": mode}
    if mode == "distill":
        teacher = teacher or load_teacher(cfg)
        tree["teacher_checkpoint"] = str(teacher_path(cfg))
    out = prepare_run_dir(run_dir, tree)
    return train(dcfg, train_ds, mode, cfg.model.student, teacher=teacher, val_dataset=val_ds,
                 out_dir=out, eval_interval=cfg.train.eval_interval, eval_batch_size=cfg.eval.batch_size,
                 checkpoint_interval=cfg.train.checkpoint_interval,
                 cache_teacher=cfg.train.cache_teacher and mode == "distill",
                 resize_to=cfg.data.resize_to)


# --------------------------------------------------------------------------
# ablation rows
# --------------------------------------------------------------------------

AXES = ("fusion", "loss", "pea_stage")


def ablation_rows(axis: str, base: DistillConfig) -> list[tuple[str, DistillConfig]]:
    """Row name and config for each row of the requested sweep.

    ``fusion``: ABF and SKF, each with no PEA, 4th-stage PEA and all stages.
    ``loss``: pyramid MSE, channel KL and spatial KL with all-stage PEA.
    ``pea_stage``: none, 1st..4th (alpha 1 on that stage) and all.
    """
    all_on = dataclasses.replace(base, pea_stages=(True,) * base.n_stages)
    if axis == "fusion":
        rows = []
        for kind in ("abf", "skf"):
            b = dataclasses.replace(all_on, baseline_mode=kind)
            rows += [(f"{kind}/none", b.with_pea_only([])), (f"{kind}/4th", b.with_pea_only([b.n_stages])),
                     (f"{kind}/all", b)]
        return rows
    if axis == "loss":
        return [(f"{base.baseline_mode}/{mode}", dataclasses.replace(all_on, loss_mode=mode))
                for mode in ("hcl", "channel_kl", "spatial_kl")]
    if axis == "pea_stage":
        names = ["1st", "2nd", "3rd"] + [f"{m}th" for m in range(4, base.n_stages + 1)]
        rows = [("none", all_on.with_pea_only([]))]
        rows += [(names[m - 1], all_on.with_pea_only([m])) for m in range(1, base.n_stages + 1)]
        rows.append(("all", all_on))
        return rows
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


@dataclass
class AblationRow:
    name: str
    mious: list[float]

    @property
    def median(self) -> float:
        return statistics.median(self.mious)


def run_ablation(cfg: ExperimentConfig, axis: str, teacher=None, datasets=None,
                 progress: Callable[[str], None] | None = None) -> list[AblationRow]:
    teacher = teacher or load_teacher(cfg)
    datasets = datasets or load_datasets(cfg)
    out = []
    for name, dcfg in ablation_rows(axis, cfg.distill):
        mious = []
        for seed in cfg.train.seeds:
            run_dir = Path(cfg.out_dir) / f"ablate-{axis}" / name.replace("/", "-") / f"seed{seed}"
            res = run_student(cfg, "distill", run_dir, dataclasses.replace(dcfg, seed=seed), teacher, datasets)
            mious.append(res.final_eval["miou"])
            if progress:
                progress(f"{name} seed {seed}: {res.final_eval['miou']:.2f}")
        out.append(AblationRow(name, mious))
    return out


def format_table(rows: list[AblationRow], seeds) -> tuple[str, list[list[str]]]:
    header = ["row"] + [f"seed{s}" for s in seeds] + ["median"]
    body = [[r.name] + [f"{m:.2f}" for m in r.mious] + [f"{r.median:.2f}"] for r in rows]
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in [header] + body]
    return "\n".join(lines), [header] + body


# --------------------------------------------------------------------------
# efficacy protocol: teacher, then plain / SKR-only / SKR+PEA students per seed
# --------------------------------------------------------------------------


@dataclass
class EfficacyResult:
    teacher_miou: float
    plain: list[float]
    skr: list[float]
    skr_pea: list[float]
    seconds: float

    @property
    def gain(self) -> float:
        return statistics.median(self.skr_pea) - statistics.median(self.plain)

    @property
    def pea_wins(self) -> int:
        return sum(a >= b for a, b in zip(self.skr_pea, self.skr))

    def to_dict(self) -> dict:
        return {"teacher_miou": self.teacher_miou, "plain": self.plain, "skr": self.skr,
                "skr_pea": self.skr_pea, "median_gain": self.gain, "pea_wins": self.pea_wins,
                "seconds": self.seconds}


def run_efficacy(cfg: ExperimentConfig, progress: Callable[[str], None] | None = None) -> EfficacyResult:
    say = progress or (lambda msg: None)
    t0 = time.perf_counter()
    datasets = load_datasets(cfg)
    t_res = run_teacher(cfg, datasets)
    t_miou = t_res.final_eval["miou"]
    say(f"teacher: {t_miou:.2f}")
    teacher = load_teacher(cfg)
    root = Path(cfg.out_dir)
    plain, skr, full = [], [], []
    for seed in cfg.train.seeds:
        d = dataclasses.replace(cfg.distill, seed=seed)
        runs = [("student-plain", root / "student-plain" / f"seed{seed}", d, plain),
                ("distill", root / "skr" / f"seed{seed}", d.with_pea_only([]), skr),
                ("distill", root / "distill" / f"seed{seed}", d, full)]
        for mode, run_dir, dcfg, bucket in runs:
            res = run_student(cfg, mode, run_dir, dcfg, teacher if mode == "distill" else None, datasets)
            bucket.append(res.final_eval["miou"])
            say(f"{run_dir.relative_to(root)}: {bucket[-1]:.2f}")
    return EfficacyResult(t_miou, plain, skr, full, time.perf_counter() - t0)


__all__ = [
    "AXES",
    "AblationRow",
    "DataConfig",
    "EfficacyResult",
    "EvalConfig",
    "ExperimentConfig",
    "ModelPair",
    "TrainConfig",
    "ablation_rows",
    "format_table",
    "load_datasets",
    "load_experiment",
    "load_teacher",
    "prepare_run_dir",
    "run_ablation",
    "run_efficacy",
    "run_student",
    "run_teacher",
]
