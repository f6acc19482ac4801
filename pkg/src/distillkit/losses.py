"""Scalar distillation losses and the segmentation cross-entropy.

All losses use mean reduction over elements so that per-stage weights stay
comparable across stages of very different sizes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, DimensionError, NumericError

log = logging.getLogger(__name__)

IGNORE_INDEX = 255


@dataclass(frozen=True)
class PyramidSpec:
    """Pool sizes for the hierarchical context loss, one per level.

    Level ``n`` (1-based) uses ``pool_sizes[n - 1]`` as both kernel and
    stride; a pool size of 1 is the full-resolution level.
    """

    pool_sizes: tuple[int, ...] = (4, 2, 1)

    def __post_init__(self):
        object.__setattr__(self, "pool_sizes", tuple(int(p) for p in self.pool_sizes))
        if len(self.pool_sizes) == 0:
            raise ConfigError("pyramid needs at least one level")
        if any(p < 1 for p in self.pool_sizes):
            raise ConfigError(f"pool sizes must be >= 1, got {list(self.pool_sizes)}")

    @property
    def n_levels(self) -> int:
        return len(self.pool_sizes)


@dataclass(frozen=True)
class LossWeights:
    alpha: tuple[float, ...] = (0.1, 0.1, 0.5, 1.0)
    beta: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.alpha) != len(self.beta):
            raise ConfigError(
                f"alpha has {len(self.alpha)} entries but beta has {len(self.beta)}"
            )
        if any(w < 0 for w in self.alpha + self.beta):
            raise ConfigError("loss weights must be non-negative")

    @property
    def n_stages(self) -> int:
        return len(self.alpha)


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"{name}: non-finite input")


def _stage_tag(stage) -> str:
    return "" if stage is None else f" at stage {stage}"


# --------------------------------------------------------------------------
# patch embedding alignment
# --------------------------------------------------------------------------


def pea_loss(
    e_student: torch.Tensor,
    w_e: torch.Tensor,
    e_teacher: torch.Tensor,
    stage: int | None = None,
) -> torch.Tensor:
    """MSE between channel-aligned student embeddings and teacher embeddings.

    ``e_student`` is (B, N, C_s), ``w_e`` is (C_s, C_t) and ``e_teacher`` is
    (B, N, C_t). The teacher is detached.
    """
    if e_student.dim() != 3 or e_teacher.dim() != 3:
        raise DimensionError(
            f"patch embeddings must be (B, N, C){_stage_tag(stage)}, got "
            f"{tuple(e_student.shape)} and {tuple(e_teacher.shape)}"
        )
    if e_student.shape[:2] != e_teacher.shape[:2]:
        raise DimensionError(
            f"student/teacher (batch, tokens) differ{_stage_tag(stage)}: "
            f"{tuple(e_student.shape[:2])} vs {tuple(e_teacher.shape[:2])}"
        )
    expected = (e_student.shape[2], e_teacher.shape[2])
    if tuple(w_e.shape) != expected:
        raise DimensionError(
            f"alignment matrix{_stage_tag(stage)} has shape {tuple(w_e.shape)}, "
            f"expected {expected}"
        )
    _check_finite(f"pea_loss{_stage_tag(stage)}", e_student, e_teacher, w_e)
    aligned = e_student @ w_e
    return F.mse_loss(aligned, e_teacher.detach())


class PeaParams(nn.Module):
    """Learnable alignment matrices, one per distilled stage.

    Stages are 1-based. Only stages listed in ``stages`` get a matrix.
    """

    def __init__(
        self,
        student_channels: Sequence[int],
        teacher_channels: Sequence[int],
        stages: Sequence[int] | None = None,
    ):
        super().__init__()
        if len(student_channels) != len(teacher_channels):
            raise ConfigError("student and teacher must have the same number of stages")
        if stages is None:
            stages = range(1, len(student_channels) + 1)
        self.stages = tuple(sorted(int(s) for s in stages))
        for s in self.stages:
            if not 1 <= s <= len(student_channels):
                raise ConfigError(f"PEA stage {s} out of range 1..{len(student_channels)}")
        self.w_e = nn.ParameterDict()
        for s in self.stages:
            c_s, c_t = student_channels[s - 1], teacher_channels[s - 1]
            w = torch.empty(c_s, c_t)
            # same fan-in scaling as nn.Linear
            bound = 1.0 / math.sqrt(c_s)
            nn.init.uniform_(w, -bound, bound)
            self.w_e[str(s)] = nn.Parameter(w)

    def __contains__(self, stage: int) -> bool:
        return str(stage) in self.w_e

    def matrix(self, stage: int) -> nn.Parameter:
        return self.w_e[str(stage)]

    def forward(self, student_embs, teacher_embs) -> list[torch.Tensor | None]:
        """Per-stage losses; ``None`` for stages without a matrix."""
        out = []
        for m, (es, et) in enumerate(zip(student_embs, teacher_embs), start=1):
            out.append(pea_loss(es, self.matrix(m), et, stage=m) if m in self else None)
        return out


# --------------------------------------------------------------------------
# hierarchical context loss
# --------------------------------------------------------------------------


def pyramid_pool(x: torch.Tensor, pool_size: int) -> torch.Tensor:
    if pool_size == 1:
        return x
    # ceil mode keeps partial border windows; their divisor is the clipped window size
    return F.avg_pool2d(x, pool_size, pool_size, ceil_mode=True)


def hcl_loss(
    u_out: torch.Tensor,
    u_teacher: torch.Tensor,
    spec: PyramidSpec = PyramidSpec(),
    include_full_level: bool = False,
    level_weights: Sequence[float] | None = None,
    full_level_weight: float = 1.0,
) -> torch.Tensor:
    """Hierarchical context loss between a fused student map and a teacher map.

    Level ``n`` gets weight ``2**-n`` and the weighted sum is divided by
    ``1 + sum(2**-n)``. With ``include_full_level`` an extra full-resolution
    MSE term with weight ``full_level_weight`` fills the ``1`` of that
    normalizer. ``level_weights`` overrides the ``2**-n`` weights.
    """
    if not isinstance(spec, PyramidSpec):
        spec = PyramidSpec(tuple(spec))
    if u_out.shape != u_teacher.shape:
        raise DimensionError(
            f"hcl_loss shape mismatch: {tuple(u_out.shape)} vs {tuple(u_teacher.shape)}"
        )
    if level_weights is None:
        level_weights = [2.0 ** -n for n in range(1, spec.n_levels + 1)]
    elif len(level_weights) != spec.n_levels:
        raise ConfigError("level_weights must have one entry per pyramid level")
    u_teacher = u_teacher.detach()

    total = u_out.new_zeros(())
    for p, w in zip(spec.pool_sizes, level_weights):
        total = total + w * F.mse_loss(pyramid_pool(u_out, p), pyramid_pool(u_teacher, p))
    if include_full_level:
        total = total + full_level_weight * F.mse_loss(u_out, u_teacher)
    return total / (full_level_weight + sum(level_weights))


# --------------------------------------------------------------------------
# supervised and baseline losses
# --------------------------------------------------------------------------


def downsample_labels(labels: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resize of an integer label map (B, H, W)."""
    if tuple(labels.shape[-2:]) == tuple(size):
        return labels
    out = F.interpolate(labels[:, None].float(), size=size, mode="nearest")
    return out[:, 0].to(labels.dtype)


def cross_entropy_seg(
    logits: torch.Tensor,
    labels: torch.Tensor,
    ignore_index: int = IGNORE_INDEX,
) -> torch.Tensor:
    """Mean softmax cross-entropy over non-ignored pixels.

    Returns an exact zero (still attached to the graph) if every pixel is
    ignored.
    """
    if logits.dim() != 4 or labels.dim() != 3:
        raise DimensionError(
            f"expected logits (B, K, h, w) and labels (B, h, w), got "
            f"{tuple(logits.shape)} and {tuple(labels.shape)}"
        )
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise DimensionError(
            f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree"
        )
    k = logits.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        b, i, j = (int(v) for v in bad.nonzero()[0])
        raise DataError(
            f"label {int(labels[b, i, j])} at (batch={b}, row={i}, col={j}) "
            f"outside 0..{k - 1} and not ignore_index {ignore_index}"
        )
    if not valid.any():
        log.warning("cross_entropy_seg: every pixel is ignore_index, loss set to 0")
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels.long(), ignore_index=ignore_index)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")


def _kl_along(student: torch.Tensor, teacher: torch.Tensor, dim: int) -> torch.Tensor:
    # KL(teacher || student) along dim, elementwise sum over that axis
    log_p_t = F.log_softmax(teacher, dim=dim)
    log_p_s = F.log_softmax(student, dim=dim)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=dim)


def logits_kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    temperature: float = 4.0,
) -> torch.Tensor:
    """Hinton-style pixel-wise KD: T^2 * mean over pixels of KL(p_T || p_S).

    Class axis is dim 1; every other axis is treated as a pixel axis.
    """
    _check_temperature(temperature)
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    t = temperature
    kl = _kl_along(student_logits / t, teacher_logits.detach() / t, dim=1)
    return kl.mean() * t * t


def channel_kl_loss(
    student_map: torch.Tensor, teacher_map: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Channel-wise distillation: spatial softmax per channel, KL averaged over channels."""
    _check_temperature(temperature)
    if student_map.shape != teacher_map.shape:
        raise DimensionError(
            f"map shapes differ: {tuple(student_map.shape)} vs {tuple(teacher_map.shape)}"
        )
    b, c = student_map.shape[:2]
    t = temperature
    s = student_map.reshape(b, c, -1) / t
    tm = teacher_map.detach().reshape(b, c, -1) / t
    return _kl_along(s, tm, dim=2).mean() * t * t


def spatial_kl_loss(
    student_map: torch.Tensor, teacher_map: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Softmax over channels at each pixel, KL averaged over pixels."""
    _check_temperature(temperature)
    if student_map.shape != teacher_map.shape:
        raise DimensionError(
            f"map shapes differ: {tuple(student_map.shape)} vs {tuple(teacher_map.shape)}"
        )
    t = temperature
    return _kl_along(student_map / t, teacher_map.detach() / t, dim=1).mean() * t * t


def total_loss(
    ce: torch.Tensor,
    embd_losses: Sequence,
    fm_losses: Sequence,
    weights: LossWeights,
) -> torch.Tensor:
    """CE plus alpha-weighted embedding losses plus beta-weighted feature-map losses.

    ``None`` entries (stage not distilled) count as zero.
    """
    m = weights.n_stages
    if len(embd_losses) != m or len(fm_losses) != m:
        raise ConfigError(
            f"expected {m} per-stage losses, got {len(embd_losses)} embedding and "
            f"{len(fm_losses)} feature-map losses"
        )
    total = ce
    for a, l_e in zip(weights.alpha, embd_losses):
        if l_e is not None and a != 0:
            total = total + a * l_e
    for b, l_f in zip(weights.beta, fm_losses):
        if l_f is not None and b != 0:
            total = total + b * l_f
    return total
