"""Small hierarchical vision transformers with per-stage taps.

Each stage is an overlapping convolutional patch embedding, a stack of
efficient-attention blocks (keys/values spatially reduced) with a
depthwise-conv MLP, and a final norm. The forward pass returns the patch
embeddings and feature maps of every stage together with the logits of an
all-MLP decode head at 1/4 of the input resolution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    stage_strides: tuple[int, ...] = (4, 2, 2, 2)
    patch_kernel: tuple[int, ...] = (7, 3, 3, 3)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    attn_reduction: tuple[int, ...] = (8, 4, 2, 1)
    num_classes: int = 8
    mlp_ratio: int = 4
    decoder_dim: int = 64
    in_channels: int = 3
    # "pre_blocks": embedding right after patch projection + norm
    tap_point: str = "pre_blocks"

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "stage_strides", "patch_kernel",
                     "heads", "attn_reduction"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def total_stride(self) -> int:
        return math.prod(self.stage_strides)

    def validate(self) -> None:
        m = self.n_stages
        problems = []
        if m == 0:
            problems.append("at least one stage is required")
        for name in ("stage_depths", "stage_strides", "patch_kernel", "heads", "attn_reduction"):
            if len(getattr(self, name)) != m:
                problems.append(f"{name} has length {len(getattr(self, name))}, expected {m}")
        if not problems:
            for i, (c, h) in enumerate(zip(self.stage_channels, self.heads), start=1):
                if c <= 0 or h <= 0 or c % h:
                    problems.append(f"stage {i}: channels {c} not divisible by heads {h}")
            if any(s < 1 for s in self.stage_strides):
                problems.append("strides must be >= 1")
            if any(r < 1 for r in self.attn_reduction):
                problems.append("attn_reduction entries must be >= 1")
            if any(d < 0 for d in self.stage_depths):
                problems.append("stage depths must be >= 0")
            if any(k < 1 for k in self.patch_kernel):
                problems.append("patch kernels must be >= 1")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.tap_point not in ("pre_blocks", "post_blocks"):
            problems.append(f"tap_point must be 'pre_blocks' or 'post_blocks', got {self.tap_point!r}")
        if problems:
            raise ConfigError("invalid encoder config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


DESK_STUDENT = EncoderConfig()
DESK_TEACHER = EncoderConfig(stage_channels=(32, 64, 128, 256), stage_depths=(2, 2, 2, 2))
# channel pairing of the reference SegFormer student/teacher
SEGFORMER_STUDENT = EncoderConfig(stage_channels=(32, 64, 160, 256), heads=(1, 2, 5, 8),
                                  stage_depths=(2, 2, 2, 2), decoder_dim=256, num_classes=19)
SEGFORMER_TEACHER = EncoderConfig(stage_channels=(64, 128, 320, 512), heads=(1, 2, 5, 8),
                                  stage_depths=(3, 4, 6, 3), decoder_dim=768, num_classes=19)


@dataclass
class StageTaps:
    embeddings: list[torch.Tensor]  # (B, H_m * W_m, C_m)
    feature_maps: list[torch.Tensor]  # (B, C_m, H_m, W_m)
    logits: torch.Tensor  # (B, K, H / 4, W / 4)
    sizes: list[tuple[int, int]] = field(default_factory=list)


def tokens_to_map(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, n, c = x.shape
    if n != h * w:
        raise DimensionError(f"{n} tokens cannot be reshaped to {h}x{w}")
    return x.transpose(1, 2).reshape(b, c, h, w)


def map_to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x):
        x = self.proj(x)
        h, w = x.shape[-2:]
        return self.norm(map_to_tokens(x)), h, w


class EfficientSelfAttention(nn.Module):
    """Multi-head attention whose keys/values come from a strided conv of the map."""

    def __init__(self, dim: int, heads: int, reduction: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.reduction = reduction
        if reduction > 1:
            self.sr = nn.Conv2d(dim, dim, reduction, reduction)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.reduction > 1:
            kv_in = self.sr(tokens_to_map(x, h, w))
            kv_in = self.sr_norm(map_to_tokens(kv_in))
        else:
            kv_in = x
        kv = self.kv(kv_in).reshape(b, -1, 2, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class MixFFN(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        x = map_to_tokens(self.dw(tokens_to_map(x, h, w)))
        return self.fc2(F.gelu(x))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, reduction: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, reduction)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, mlp_ratio)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.ffn(self.norm2(x), h, w)


class Stage(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, depth, heads, reduction, mlp_ratio):
        super().__init__()
        self.embed = OverlapPatchEmbed(in_ch, out_ch, kernel, stride)
        self.blocks = nn.ModuleList(Block(out_ch, heads, reduction, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x, tap_point="pre_blocks"):
        tokens, h, w = self.embed(x)
        emb = tokens
        for blk in self.blocks:
            tokens = blk(tokens, h, w)
        tokens = self.norm(tokens)
        if tap_point == "post_blocks":
            emb = tokens
        return emb, tokens_to_map(tokens, h, w)


class MLPDecodeHead(nn.Module):
    """Per-stage linear projection, upsample to the first stage, concat, fuse, classify."""

    def __init__(self, in_channels, dim, num_classes):
        super().__init__()
        self.proj = nn.ModuleList(nn.Linear(c, dim) for c in in_channels)
        self.fuse = nn.Conv2d(dim * len(in_channels), dim, 1)
        self.classify = nn.Conv2d(dim, num_classes, 1)

    def forward(self, fms):
        size = fms[0].shape[-2:]
        ups = []
        for proj, f in zip(self.proj, fms):
            y = tokens_to_map(proj(map_to_tokens(f)), *f.shape[-2:])
            if y.shape[-2:] != size:
                y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
            ups.append(y)
        return self.classify(F.relu(self.fuse(torch.cat(ups, dim=1))))


class HierarchicalSegmenter(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = (cfg.in_channels,) + cfg.stage_channels
        self.stages = nn.ModuleList(
            Stage(chans[i], chans[i + 1], cfg.patch_kernel[i], cfg.stage_strides[i],
                  cfg.stage_depths[i], cfg.heads[i], cfg.attn_reduction[i], cfg.mlp_ratio)
            for i in range(cfg.n_stages)
        )
        self.head = MLPDecodeHead(cfg.stage_channels, cfg.decoder_dim, cfg.num_classes)
        self.frozen = False
        self.apply(_init_weights)

    def check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"expected images (B, {self.cfg.in_channels}, H, W), got {tuple(images.shape)}"
            )
        s = self.cfg.total_stride
        h, w = images.shape[-2:]
        if h % s or w % s:
            near = tuple(max(s, round(v / s) * s) for v in (h, w))
            raise DimensionError(
                f"input size {h}x{w} is not divisible by the total stride {s}; "
                f"nearest valid size is {near[0]}x{near[1]}"
            )

    def forward(self, images: torch.Tensor) -> StageTaps:
        self.check_input(images)
        embs, fms, sizes = [], [], []
        x = images
        for stage in self.stages:
            emb, x = stage(x, self.cfg.tap_point)
            embs.append(emb)
            fms.append(x)
            sizes.append(tuple(x.shape[-2:]))
        return StageTaps(embs, fms, self.head(fms), sizes)

    def train(self, mode: bool = True):
        # a frozen model never leaves eval mode
        return super().train(mode and not self.frozen)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> HierarchicalSegmenter:
    """Build a segmenter with parameters determined by ``seed`` alone."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HierarchicalSegmenter(cfg)
    log.info("built model with %d parameters (seed %d)", count_params(model), seed)
    return model


def forward_with_taps(model: HierarchicalSegmenter, images: torch.Tensor) -> StageTaps:
    return model(images)


def freeze(model: nn.Module) -> nn.Module:
    """Eval mode, no gradients, and stays in eval mode through ``.train()``."""
    for p in model.parameters():
        p.requires_grad_(False)
    if isinstance(model, HierarchicalSegmenter):
        model.frozen = True
    model.eval()
    return model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def stage_resolutions(cfg: EncoderConfig, height: int, width: int) -> list[tuple[int, int]]:
    out = []
    for s in cfg.stage_strides:
        height, width = height // s, width // s
        out.append((height, width))
    return out
