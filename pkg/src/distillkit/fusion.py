"""Cross-stage feature fusion for review-style distillation.

Student maps are fused deepest to shallowest. Each fusion module projects
the current stage to a common width, mixes it with the upsampled fused map
from the next deeper stage, and projects the result to the teacher's width.

Two mixers are provided: selective-kernel fusion (channel-wise soft gates
from pooled context) and attention-based fusion (two spatial maps).
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .losses import PyramidSpec, hcl_loss


def reduced_dim(width: int, reduction: int = 16, min_dim: int = 32) -> int:
    """Length of the compact feature: ``max(width // reduction, min_dim)``."""
    return max(width // reduction, min_dim)


def global_avg_pool(u: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C) channel means."""
    return u.mean(dim=(2, 3))


class CompactFeature(nn.Module):
    """Linear C -> d, batch norm, ReLU.

    With a batch of one in training mode the running statistics are used
    instead of batch statistics.
    """

    def __init__(self, width: int, dim: int):
        super().__init__()
        self.fc = nn.Linear(width, dim, bias=False)
        self.bn = nn.BatchNorm1d(dim)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        x = self.fc(s)
        if self.training and x.shape[0] == 1:
            x = F.batch_norm(
                x, self.bn.running_mean, self.bn.running_var,
                self.bn.weight, self.bn.bias, training=False, eps=self.bn.eps,
            )
        else:
            x = self.bn(x)
        return F.relu(x)


def compact_feature(s: torch.Tensor, params: "SelectiveKernelFusion") -> torch.Tensor:
    if s.dim() != 2 or s.shape[1] != params.width:
        raise DimensionError(f"expected channel vector (B, {params.width}), got {tuple(s.shape)}")
    return params.fc_reduce(s)


def sk_gate(
    z: torch.Tensor, gate_a: torch.Tensor, gate_b: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two-way softmax over branch logits ``A z`` and ``B z`` for every channel.

    Computed as a logistic of the logit gap, which cannot overflow.
    """
    gap = z @ (gate_a - gate_b).t()
    return torch.sigmoid(gap), torch.sigmoid(-gap)


def _stage_name(stage) -> str:
    return "" if stage is None else f" (stage {stage})"


class _FusionBase(nn.Module):
    def __init__(self, in_channels: int, width: int, out_channels: int, stage: int | None = None,
                 fuse: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        self.out_channels = out_channels
        self.stage = stage
        self.fuse = fuse
        self.proj_in = nn.Conv2d(in_channels, width, 1, bias=False)
        self.proj_out = nn.Conv2d(width, out_channels, 3, padding=1, bias=False)
        for conv in (self.proj_in, self.proj_out):
            nn.init.kaiming_uniform_(conv.weight, a=1)

    def _prepare(self, u_in: torch.Tensor, u_mid_next: torch.Tensor | None):
        if u_in.dim() != 4 or u_in.shape[1] != self.in_channels:
            raise DimensionError(
                f"fusion module{_stage_name(self.stage)} expects {self.in_channels} input "
                f"channels, got map of shape {tuple(u_in.shape)}"
            )
        x = self.proj_in(u_in)
        if u_mid_next is None:
            return x, None
        if not self.fuse:
            raise ConfigError(f"fusion module{_stage_name(self.stage)} is the deepest and takes no deeper map")
        if u_mid_next.shape[1] != self.width:
            raise DimensionError(
                f"fused map from deeper stage has {u_mid_next.shape[1]} channels, "
                f"fusion width{_stage_name(self.stage)} is {self.width}"
            )
        h, w = u_in.shape[-2:]
        if u_mid_next.shape[-2] > h or u_mid_next.shape[-1] > w:
            raise DimensionError(
                f"review runs deep to shallow: deeper map {tuple(u_mid_next.shape[-2:])} is "
                f"larger than current stage {(h, w)}{_stage_name(self.stage)}"
            )
        y = F.interpolate(u_mid_next, size=(h, w), mode="bilinear", align_corners=False)
        return x, y

    def mix(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, u_in, u_mid_next=None):
        x, y = self._prepare(u_in, u_mid_next)
        u_mid = x if y is None else self.mix(x, y)
        return u_mid, self.proj_out(u_mid)


class SelectiveKernelFusion(_FusionBase):
    """Channel-gated fusion of the current stage and the deeper fused map.

    Gate matrices start at zero so both branches get weight 0.5 at step 0.
    With ``fuse=False`` (deepest stage) the projected input passes through
    and no gating parameters exist.
    """

    def __init__(
        self,
        in_channels: int,
        width: int,
        out_channels: int,
        reduction: int = 16,
        min_dim: int = 32,
        stage: int | None = None,
        fuse: bool = True,
    ):
        super().__init__(in_channels, width, out_channels, stage, fuse)
        self.dim = reduced_dim(width, reduction, min_dim)
        if fuse:
            self.fc_reduce = CompactFeature(width, self.dim)
            self.gate_a = nn.Parameter(torch.zeros(width, self.dim))
            self.gate_b = nn.Parameter(torch.zeros(width, self.dim))

    def gates(self, x: torch.Tensor, y: torch.Tensor):
        s = global_avg_pool(x + y)
        z = compact_feature(s, self)
        return sk_gate(z, self.gate_a, self.gate_b)

    def mix(self, x, y):
        a, b = self.gates(x, y)
        return a[:, :, None, None] * x + b[:, :, None, None] * y


def skf_forward(u_in, u_mid_next, params: SelectiveKernelFusion):
    """Returns ``(u_mid, u_out)``; see :class:`SelectiveKernelFusion`."""
    return params(u_in, u_mid_next)


class AttentionFusion(_FusionBase):
    """Knowledge-review style fusion with two spatial attention maps.

    A 1x1 convolution on the concatenated branches yields two logits per
    pixel, normalized jointly with a softmax.
    """

    def __init__(self, in_channels: int, width: int, out_channels: int, stage: int | None = None,
                 fuse: bool = True):
        super().__init__(in_channels, width, out_channels, stage, fuse)
        if fuse:
            self.att_conv = nn.Conv2d(2 * width, 2, 1)

    def mix(self, x, y):
        att = torch.softmax(self.att_conv(torch.cat([x, y], dim=1)), dim=1)
        return att[:, :1] * x + att[:, 1:] * y


def abf_forward(u_in, u_mid_next, params: AttentionFusion):
    return params(u_in, u_mid_next)


class FusionStack(nn.Module):
    """One fusion module per stage, ordered shallow to deep."""

    def __init__(
        self,
        student_channels: Sequence[int],
        teacher_channels: Sequence[int],
        width: int = 64,
        kind: str = "skf",
        reduction: int = 16,
        min_dim: int = 32,
    ):
        super().__init__()
        if len(student_channels) != len(teacher_channels):
            raise ConfigError("student and teacher must have the same number of stages")
        if kind not in ("skf", "abf"):
            raise ConfigError(f"unknown fusion kind {kind!r}, expected 'skf' or 'abf'")
        self.kind = kind
        self.width = width
        mods = []
        n = len(student_channels)
        for m, (cs, ct) in enumerate(zip(student_channels, teacher_channels), start=1):
            # the deepest module has nothing to fuse with
            fuse = m < n
            if kind == "skf":
                mods.append(SelectiveKernelFusion(cs, width, ct, reduction, min_dim, stage=m, fuse=fuse))
            else:
                mods.append(AttentionFusion(cs, width, ct, stage=m, fuse=fuse))
        self.fusers = nn.ModuleList(mods)

    def __len__(self):
        return len(self.fusers)

    def __getitem__(self, i):
        return self.fusers[i]

    def forward(self, student_fms: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Fused outputs ``u_out`` for every stage, shallow to deep."""
        if len(student_fms) != len(self):
            raise ConfigError(f"expected {len(self)} student maps, got {len(student_fms)}")
        outs: list[torch.Tensor | None] = [None] * len(self)
        u_mid = None
        for m in reversed(range(len(self))):
            u_mid, outs[m] = self.fusers[m](student_fms[m], u_mid)
        return outs


FmLoss = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def review_pipeline(
    student_fms: Sequence[torch.Tensor],
    teacher_fms: Sequence[torch.Tensor],
    stack: FusionStack,
    spec: PyramidSpec = PyramidSpec(),
    loss_fn: FmLoss | None = None,
) -> list[torch.Tensor]:
    """Per-stage feature-map losses, index 0 being the shallowest stage.

    ``loss_fn`` defaults to the hierarchical context loss with ``spec``.
    """
    if not (len(student_fms) == len(teacher_fms) == len(stack)):
        raise ConfigError(
            f"stage count mismatch: {len(student_fms)} student maps, "
            f"{len(teacher_fms)} teacher maps, {len(stack)} fusion modules"
        )
    if loss_fn is None:
        loss_fn = lambda u, t: hcl_loss(u, t, spec)  # noqa: E731
    outs = stack(student_fms)
    losses = []
    for m, (u_out, t) in enumerate(zip(outs, teacher_fms), start=1):
        if u_out.shape != t.shape:
            raise DimensionError(
                f"fused output at stage {m} is {tuple(u_out.shape)}, teacher map is {tuple(t.shape)}"
            )
        losses.append(loss_fn(u_out, t.detach()))
    return losses

