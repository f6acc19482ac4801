"""Training: supervised teachers/students and joint student + fusion + alignment
distillation with AdamW and a polynomial learning-rate decay."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn

from . import config as cfgtree
from .data import cycle_batches, make_batches
from .errors import ConfigError, NumericError
from .fusion import FusionStack, review_pipeline
from .losses import (
    LossWeights,
    PeaParams,
    PyramidSpec,
    channel_kl_loss,
    cross_entropy_seg,
    downsample_labels,
    hcl_loss,
    logits_kd_loss,
    pea_loss,
    spatial_kl_loss,
    total_loss,
)
from .metrics import evaluate
from .models import EncoderConfig, HierarchicalSegmenter, StageTaps, build_encoder, freeze

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("teacher", "student-plain", "distill")


@dataclass(frozen=True)
class FusionConfig:
    width: int = 64
    reduction: int = 16
    min_dim: int = 32


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 6e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)


@dataclass(frozen=True)
class ScheduleConfig:
    total_iters: int = 2000
    poly_power: float = 1.0


@dataclass(frozen=True)
class DistillConfig:
    weights: LossWeights = LossWeights()
    pea_stages: tuple[bool, ...] = (True, True, True, True)
    fusion: FusionConfig = FusionConfig()
    pyramid: PyramidSpec = PyramidSpec()
    optimizer: OptimizerConfig = OptimizerConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    batch_size: int = 2
    seed: int = 0
    baseline_mode: str = "skf"  # skf | abf
    loss_mode: str = "hcl"  # hcl | channel_kl | spatial_kl
    hcl_include_full_level: bool = False
    kl_temperature: float = 1.0
    # logit KD baseline, off by default
    kd_weight: float = 0.0
    kd_temperature: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "pea_stages", tuple(bool(b) for b in self.pea_stages))
        if len(self.pea_stages) != self.weights.n_stages:
            raise ConfigError(
                f"pea_stages has {len(self.pea_stages)} entries, weights cover {self.weights.n_stages} stages"
            )
        if self.baseline_mode not in ("skf", "abf"):
            raise ConfigError(f"baseline_mode must be 'skf' or 'abf', got {self.baseline_mode!r}")
        if self.loss_mode not in ("hcl", "channel_kl", "spatial_kl"):
            raise ConfigError(f"loss_mode must be hcl, channel_kl or spatial_kl, got {self.loss_mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.kd_weight < 0 or self.kd_temperature <= 0 or self.kl_temperature <= 0:
            raise ConfigError("kd_weight must be >= 0 and temperatures > 0")

    @property
    def n_stages(self) -> int:
        return self.weights.n_stages

    def enabled_pea_stages(self) -> list[int]:
        return [m for m, on in enumerate(self.pea_stages, start=1) if on]

    def with_pea_only(self, stages: Sequence[int], alpha: float = 1.0) -> "DistillConfig":
        """Alignment on ``stages`` only, each with weight ``alpha``."""
        on = tuple(m in stages for m in range(1, self.n_stages + 1))
        a = tuple(alpha if o else 0.0 for o in on)
        return dataclasses.replace(self, pea_stages=on,
                                   weights=LossWeights(a, self.weights.beta))


class CachedTeacher(nn.Module):
    """Frozen teacher that memoizes its outputs per input image.

    A frozen teacher is a fixed function of its input, so on a finite
    training set each image only needs one forward pass. Images are keyed
    by their bytes; misses run at batch size 1. Past ``max_entries`` new
    images are computed but not stored.
    """

    def __init__(self, teacher: HierarchicalSegmenter, max_entries: int = 4096):
        super().__init__()
        self.teacher = freeze(teacher)
        self.max_entries = max_entries
        self._store: dict[bytes, StageTaps] = {}
        self.hits = self.misses = 0

    @property
    def cfg(self) -> EncoderConfig:
        return self.teacher.cfg

    def train(self, mode: bool = True):
        return super().train(False)

    @staticmethod
    def _key(image: torch.Tensor) -> bytes:
        return hashlib.blake2b(image.contiguous().numpy().tobytes(), digest_size=16).digest()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> StageTaps:
        parts = []
        for img in images:
            key = self._key(img)
            taps = self._store.get(key)
            if taps is None:
                self.misses += 1
                taps = self.teacher(img[None])
                if len(self._store) < self.max_entries:
                    self._store[key] = taps
            else:
                self.hits += 1
            parts.append(taps)
        if len(parts) == 1:
            return parts[0]
        return StageTaps(
            [torch.cat(e) for e in zip(*(p.embeddings for p in parts))],
            [torch.cat(f) for f in zip(*(p.feature_maps for p in parts))],
            torch.cat([p.logits for p in parts]),
            parts[0].sizes,
        )


def poly_lr(iteration: int, base_lr: float, total_iters: int, power: float = 1.0) -> float:
    """``base_lr * (1 - iter / total) ** power``; iterations past the end give 0."""
    if total_iters <= 0:
        return 0.0
    frac = min(max(iteration, 0), total_iters) / total_iters
    return base_lr * (1.0 - frac) ** power


def _no_decay(name: str, p: nn.Parameter) -> bool:
    return p.ndim <= 1 or name.endswith("gate_a") or name.endswith("gate_b")


def build_optimizer(modules: dict[str, nn.Module], opt: OptimizerConfig) -> torch.optim.AdamW:
    """One AdamW over every trainable parameter; biases, norms and gate
    matrices skip weight decay."""
    decay, no_decay = [], []
    for prefix, mod in modules.items():
        if mod is None:
            continue
        for name, p in mod.named_parameters():
            if p.requires_grad:
                (no_decay if _no_decay(name, p) else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": opt.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=opt.base_lr, betas=tuple(opt.betas))


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr


def _grad_norm(module: nn.Module | None) -> float:
    if module is None:
        return 0.0
    sq = 0.0
    for p in module.parameters():
        if p.grad is not None:
            sq += float(p.grad.detach().pow(2).sum())
    return math.sqrt(sq)


def _value(t) -> float | None:
    return None if t is None else float(t.detach())


@dataclass
class StepReport:
    iter: int
    lr: float
    ce: float
    embd: list[float | None]
    fm: list[float | None]
    kd: float | None
    total: float
    grad_norm: dict[str, float] = field(default_factory=dict)
    ce_empty: bool = False

    def record(self) -> dict:
        r = {"iter": self.iter, "lr": self.lr, "ce": self.ce, "embd": self.embd,
             "fm": self.fm, "total": self.total}
        if self.kd is not None:
            r["kd"] = self.kd
        if self.ce_empty:
            r["ce_empty"] = True
        return r


def fm_loss_fn(cfg: DistillConfig):
    if cfg.loss_mode == "hcl":
        return lambda u, t: hcl_loss(u, t, cfg.pyramid, cfg.hcl_include_full_level)
    if cfg.loss_mode == "channel_kl":
        return lambda u, t: channel_kl_loss(u, t, cfg.kl_temperature)
    return lambda u, t: spatial_kl_loss(u, t, cfg.kl_temperature)


def compute_losses(
    images: torch.Tensor,
    labels: torch.Tensor,
    teacher: nn.Module | None,
    student: nn.Module,
    stack: FusionStack | None,
    pea: PeaParams | None,
    cfg: DistillConfig,
):
    """Forward both networks and return ``(total, components)``.

    Components: ``ce``, ``embd`` and ``fm`` (per-stage lists, ``None`` for
    stages that are not distilled), ``kd`` and ``ce_empty``.
    """
    m_stages = cfg.n_stages
    s_taps = student(images)
    lab = downsample_labels(labels, s_taps.logits.shape[-2:])
    ce = cross_entropy_seg(s_taps.logits, lab)
    ce_empty = not bool((lab != 255).any())
    embd: list = [None] * m_stages
    fm: list = [None] * m_stages
    kd = None
    w = cfg.weights
    need_teacher = teacher is not None and (
        any(a > 0 for a in w.alpha) or any(b > 0 for b in w.beta) or cfg.kd_weight > 0
    )
    if need_teacher:
        with torch.no_grad():
            t_taps = teacher(images)
        if pea is not None:
            for m in range(1, m_stages + 1):
                if w.alpha[m - 1] > 0 and cfg.pea_stages[m - 1] and m in pea:
                    embd[m - 1] = pea_loss(s_taps.embeddings[m - 1], pea.matrix(m),
                                           t_taps.embeddings[m - 1], stage=m)
        if stack is not None and any(b > 0 for b in w.beta):
            fm = review_pipeline(s_taps.feature_maps, t_taps.feature_maps, stack,
                                 cfg.pyramid, fm_loss_fn(cfg))
        if cfg.kd_weight > 0:
            kd = logits_kd_loss(s_taps.logits, t_taps.logits, cfg.kd_temperature)
    total = total_loss(ce, embd, fm, w)
    if kd is not None:
        total = total + cfg.kd_weight * kd
    comps = {"ce": ce, "embd": embd, "fm": fm, "kd": kd, "ce_empty": ce_empty}
    return total, comps


def _check_components(total, comps) -> None:
    named = [("ce", comps["ce"]), ("kd", comps["kd"])]
    named += [(f"embd[stage {m}]", v) for m, v in enumerate(comps["embd"], start=1)]
    named += [(f"fm[stage {m}]", v) for m, v in enumerate(comps["fm"], start=1)]
    for name, v in named:
        if v is not None and not torch.isfinite(v).all():
            raise NumericError(f"non-finite loss component {name}: {float(v)}")
    if not torch.isfinite(total):
        raise NumericError(f"non-finite total loss: {float(total)}")


def distill_step(
    batch,
    teacher: nn.Module | None,
    student: nn.Module,
    stack: FusionStack | None,
    pea: PeaParams | None,
    optimizer: torch.optim.Optimizer,
    cfg: DistillConfig,
    iteration: int = 0,
) -> StepReport:
    """One joint update of student, fusion stack and alignment matrices.

    With ``teacher=None`` (or all distillation weights zero) this is plain
    supervised training.
    """
    images, labels = batch
    if teacher is not None:
        teacher.eval()
    student.train()
    if stack is not None:
        stack.train()
    total, comps = compute_losses(images, labels, teacher, student, stack, pea, cfg)
    _check_components(total, comps)
    lr = poly_lr(iteration, cfg.optimizer.base_lr, cfg.schedule.total_iters, cfg.schedule.poly_power)
    set_lr(optimizer, lr)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    norms = {"student": _grad_norm(student), "fusion": _grad_norm(stack), "pea": _grad_norm(pea)}
    optimizer.step()
    return StepReport(
        iter=iteration, lr=lr, ce=float(comps["ce"].detach()),
        embd=[_value(v) for v in comps["embd"]], fm=[_value(v) for v in comps["fm"]],
        kd=_value(comps["kd"]), total=float(total.detach()), grad_norm=norms,
        ce_empty=comps["ce_empty"],
    )


def plain_step(batch, model, optimizer, cfg: DistillConfig, iteration: int = 0) -> StepReport:
    return distill_step(batch, None, model, None, None, optimizer, cfg, iteration)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, model: nn.Module, optimizer, meta: dict, iteration: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        **meta,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if "version" not in blob:
        raise ConfigError(f"{path}: not a checkpoint (missing version field)")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: checkpoint version {blob['version']}, expected {CHECKPOINT_VERSION}")
    return blob


def load_model(path) -> HierarchicalSegmenter:
    """Rebuild a segmenter from a checkpoint (weights only, no training state)."""
    blob = load_checkpoint(path)
    model_cfg = cfgtree.from_dict(EncoderConfig, blob["model_config"])
    model = HierarchicalSegmenter(model_cfg)
    model.load_state_dict(blob["model"])
    model.eval()
    return model


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: HierarchicalSegmenter
    stack: FusionStack | None
    pea: PeaParams | None
    history: list[dict]
    final_eval: dict | None
    checkpoint: Path | None
    log_path: Path | None


def run_config_tree(cfg: DistillConfig, mode: str, model_cfg: EncoderConfig,
                    teacher_cfg: EncoderConfig | None) -> dict:
    tree = {"mode": mode, "distill": cfgtree.to_dict(cfg), "model": cfgtree.to_dict(model_cfg)}
    if mode == "distill" and teacher_cfg is not None:
        tree["teacher"] = cfgtree.to_dict(teacher_cfg)
    return tree


def build_distill_aux(cfg: DistillConfig, student_cfg: EncoderConfig, teacher_cfg: EncoderConfig):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 7919)
        stack = FusionStack(student_cfg.stage_channels, teacher_cfg.stage_channels,
                            cfg.fusion.width, cfg.baseline_mode, cfg.fusion.reduction,
                            cfg.fusion.min_dim)
        pea = PeaParams(student_cfg.stage_channels, teacher_cfg.stage_channels,
                        cfg.enabled_pea_stages())
    return stack, pea


def train(
    cfg: DistillConfig,
    dataset,
    mode: str,
    model_cfg: EncoderConfig,
    *,
    teacher: HierarchicalSegmenter | None = None,
    val_dataset=None,
    out_dir=None,
    eval_interval: int = 0,
    eval_batch_size: int = 16,
    resume: bool = True,
    checkpoint_interval: int = 0,
    model_seed: int | None = None,
    cache_teacher: bool = False,
    resize_to: tuple[int, int] | None = None,
) -> TrainResult:
    """Train a teacher, a plain student or a distilled student.

    Deterministic given ``cfg.seed`` (model init, fusion init and batch order
    all derive from it). With ``out_dir`` the run writes ``metrics.jsonl``,
    ``model.pt`` and, in distill mode, ``distill_aux.pt``; an existing
    checkpoint with the same config is resumed, a different config refused.
    ``cache_teacher`` memoizes teacher outputs per training image (see
    :class:`CachedTeacher`).
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "distill":
        if teacher is None:
            raise ConfigError("distill mode needs a trained teacher")
        freeze(teacher)
    teacher_cfg = teacher.cfg if (mode == "distill") else None
    if model_cfg.n_stages != cfg.n_stages:
        raise ConfigError(f"model has {model_cfg.n_stages} stages, loss weights cover {cfg.n_stages}")

    seed = cfg.seed if model_seed is None else model_seed
    model = build_encoder(model_cfg, seed)
    stack = pea = None
    if mode == "distill":
        stack, pea = build_distill_aux(cfg, model_cfg, teacher_cfg)
    optimizer = build_optimizer({"student": model, "fusion": stack, "pea": pea}, cfg.optimizer)

    tree = run_config_tree(cfg, mode, model_cfg, teacher_cfg)
    tree["model_seed"] = seed
    if mode == "distill":
        tree["cache_teacher"] = bool(cache_teacher)
    if resize_to is not None:
        tree["resize_to"] = list(resize_to)
    chash = cfgtree.config_hash(tree)
    meta = {"config": tree, "config_hash": chash, "seed": seed, "mode": mode,
            "model_config": cfgtree.to_dict(model_cfg)}

    resize = {"resize_to": tuple(resize_to), "stride_multiple": model_cfg.total_stride} if resize_to else {}
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = aux_path = log_path = None
    start = 0
    history: list[dict] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path, aux_path, log_path = out / "model.pt", out / "distill_aux.pt", out / "metrics.jsonl"
        if ckpt_path.exists():
            if not resume:
                raise ConfigError(f"{ckpt_path} exists; refusing to overwrite (resume disabled)")
            blob = load_checkpoint(ckpt_path)
            if blob.get("config_hash") != chash:
                lines = cfgtree.diff(blob.get("config", {}), tree)
                raise ConfigError(
                    f"{ckpt_path} was written with a different config; refusing to resume:\n  "
                    + "\n  ".join(lines or ["(hash mismatch)"])
                )
            model.load_state_dict(blob["model"])
            optimizer.load_state_dict(blob["optimizer"])
            start = int(blob["iteration"])
            if mode == "distill":
                aux = torch.load(aux_path, map_location="cpu", weights_only=False)
                stack.load_state_dict(aux["fusion"])
                pea.load_state_dict(aux["pea"])
            if log_path.exists():
                for line in log_path.read_text().splitlines():
                    rec = json.loads(line)
                    if rec.get("iter", 0) < start or (rec.get("kind") == "eval" and rec["iter"] <= start):
                        history.append(rec)
            log.info("resumed %s from iteration %d", out, start)
        _rewrite_log(log_path, history)

    def save(iteration):
        if out is None:
            return
        save_checkpoint(ckpt_path, model, optimizer, meta, iteration)
        if mode == "distill":
            torch.save({"version": CHECKPOINT_VERSION, "config_hash": chash, "iteration": iteration,
                        "fusion": stack.state_dict(), "pea": pea.state_dict()}, aux_path)

    def emit(rec):
        history.append(rec)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def run_eval(iteration):
        if val_dataset is None:
            return None
        rep = evaluate(model, make_batches(val_dataset, eval_batch_size, shuffle=False, **resize),
                       val_dataset.num_classes)
        rec = {"kind": "eval", "iter": iteration, "miou": rep.miou, "per_class": rep.per_class}
        emit(rec)
        return rec

    total_iters = cfg.schedule.total_iters
    batches = cycle_batches(dataset, cfg.batch_size, seed=cfg.seed, **resize)
    batches = itertools.islice(batches, start, None)
    t_model = None
    if mode == "distill":
        t_model = CachedTeacher(teacher) if cache_teacher else teacher
    for it in range(start, total_iters):
        batch = next(batches)
        rep = distill_step(batch, t_model, model, stack, pea, optimizer, cfg, it)
        emit({"kind": "step", **rep.record()})
        done = it + 1
        if eval_interval and done % eval_interval == 0 and done < total_iters:
            run_eval(done)
        if checkpoint_interval and done % checkpoint_interval == 0 and done < total_iters:
            save(done)

    final = None
    if history and history[-1].get("kind") == "eval" and history[-1]["iter"] == total_iters:
        final = history[-1]
    else:
        final = run_eval(total_iters)
    save(max(total_iters, start))
    model.eval()
    return TrainResult(model, stack, pea, history, final, ckpt_path, log_path)


def _rewrite_log(path: Path, records: Iterable[dict]) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def train_teacher(cfg: DistillConfig, dataset, model_cfg: EncoderConfig, **kwargs) -> TrainResult:
    return train(cfg, dataset, "teacher", model_cfg, **kwargs)
