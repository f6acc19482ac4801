"""Central finite differences against autograd, in double precision.

Each component builds a tiny problem, a scalar loss closure and a list of
named tensors to differentiate. Every entry of every tensor is perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import ConfigError, NumericError
from .fusion import FusionStack, review_pipeline
from .losses import LossWeights, PeaParams, PyramidSpec, cross_entropy_seg, downsample_labels, hcl_loss, pea_loss, total_loss
from .models import EncoderConfig, HierarchicalSegmenter

COMPONENTS = ("pea", "skf", "hcl", "full")

# tiny encoder for the composite check: 16x16 input, every stage map <= 4x4
TINY_STUDENT = EncoderConfig(stage_channels=(4, 4, 8, 8), stage_depths=(1, 1, 1, 1),
                             stage_strides=(4, 2, 1, 1), patch_kernel=(3, 3, 3, 3),
                             heads=(1, 1, 2, 2), attn_reduction=(2, 1, 1, 1), num_classes=3,
                             mlp_ratio=1, decoder_dim=4)
TINY_TEACHER = EncoderConfig(stage_channels=(6, 6, 8, 10), stage_depths=(1, 1, 1, 1),
                             stage_strides=(4, 2, 1, 1), patch_kernel=(3, 3, 3, 3),
                             heads=(1, 1, 2, 2), attn_reduction=(2, 1, 1, 1), num_classes=3,
                             mlp_ratio=1, decoder_dim=4)


@dataclass
class GradcheckReport:
    component: str
    max_rel_error: float
    worst: str  # "tensor[index]" with the largest error
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {self.component}: {status} max rel err {self.max_rel_error:.3e} "
                f"at {self.worst} ({self.n_checked} entries, tol {self.tol:g})")


def rel_error(analytic: float, numeric: float, floor: float) -> float:
    # entries with both gradients below ``floor`` are compared on an absolute scale
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], component: str = "custom",
          eps: float = 1e-5, tol: float = 1e-4, floor: float = 1e-5) -> GradcheckReport:
    """Compare autograd gradients of ``fn()`` w.r.t. ``tensors`` with central differences."""
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise ConfigError(f"{name}: gradcheck needs float64 tensors, got {t.dtype}")
    for t in tensors.values():
        t.grad = None
    loss = fn()
    if not torch.isfinite(loss):
        raise NumericError(f"gradcheck {component}: loss is not finite")
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    worst, worst_at, count = 0.0, "-", 0
    with torch.no_grad():
        for (name, t), g in zip(tensors.items(), grads):
            g = torch.zeros_like(t) if g is None else g
            flat, gflat = t.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                err = rel_error(gflat[i].item(), numeric, floor)
                count += 1
                if err > worst or worst_at == "-":
                    idx = tuple(int(v) for v in torch.unravel_index(torch.tensor(i), t.shape))
                    worst, worst_at = err, f"{name}[{', '.join(map(str, idx))}]"
    return GradcheckReport(component, worst, worst_at, count, tol)


def _pea_problem(g: torch.Generator):
    e_s = torch.randn(1, 2, 3, generator=g, dtype=torch.float64, requires_grad=True)
    w_e = torch.randn(3, 4, generator=g, dtype=torch.float64, requires_grad=True)
    e_t = torch.randn(1, 2, 4, generator=g, dtype=torch.float64)
    return (lambda: pea_loss(e_s, w_e, e_t)), {"e_student": e_s, "w_e": w_e}


def _randomize_gates(stack: FusionStack, g: torch.Generator) -> None:
    # zero gates block the gradient path into the compact feature layer
    with torch.no_grad():
        for name, p in stack.named_parameters():
            if "gate" in name:
                p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=p.dtype))


def _skf_problem(g: torch.Generator):
    s_ch, t_ch, sizes = (2, 3), (3, 4), (4, 2)
    stack = FusionStack(s_ch, t_ch, width=4, reduction=2, min_dim=2).double()
    _randomize_gates(stack, g)
    s = [torch.randn(3, c, n, n, generator=g, dtype=torch.float64, requires_grad=True)
         for c, n in zip(s_ch, sizes)]
    t = [torch.randn(3, c, n, n, generator=g, dtype=torch.float64) for c, n in zip(t_ch, sizes)]
    spec = PyramidSpec((2, 1))

    def fn():
        return sum(review_pipeline(s, t, stack, spec))

    tensors = {f"student_fm{m}": x for m, x in enumerate(s, start=1)}
    tensors.update({f"stack.{n}": p for n, p in stack.named_parameters()})
    return fn, tensors


def _hcl_problem(g: torch.Generator):
    u = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    t = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    return (lambda: hcl_loss(u, t, PyramidSpec((4, 2, 1)))), {"u_out": u}


def _full_problem(g: torch.Generator):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
        student = HierarchicalSegmenter(TINY_STUDENT).double().train()
        teacher = HierarchicalSegmenter(TINY_TEACHER).double().eval()
        stack = FusionStack(TINY_STUDENT.stage_channels, TINY_TEACHER.stage_channels,
                            width=4, reduction=2, min_dim=2).double()
        pea = PeaParams(TINY_STUDENT.stage_channels, TINY_TEACHER.stage_channels, (1, 2, 3, 4)).double()
    _randomize_gates(stack, g)
    for p in teacher.parameters():
        p.requires_grad_(False)
    images = torch.randn(3, 3, 16, 16, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (3, 16, 16), generator=g)
    weights = LossWeights()
    spec = PyramidSpec((2, 1))
    with torch.no_grad():
        t_taps = teacher(images)

    def fn():
        s_taps = student(images)
        ce = cross_entropy_seg(s_taps.logits, downsample_labels(labels, s_taps.logits.shape[-2:]))
        embd = [pea_loss(e, pea.matrix(m), te, stage=m)
                for m, (e, te) in enumerate(zip(s_taps.embeddings, t_taps.embeddings), start=1)]
        fm = review_pipeline(s_taps.feature_maps, t_taps.feature_maps, stack, spec)
        return total_loss(ce, embd, fm, weights)

    tensors = {f"student.{n}": p for n, p in student.named_parameters()}
    tensors.update({f"stack.{n}": p for n, p in stack.named_parameters()})
    tensors.update({f"pea.{n}": p for n, p in pea.named_parameters()})
    return fn, tensors


_PROBLEMS = {"pea": _pea_problem, "skf": _skf_problem, "hcl": _hcl_problem, "full": _full_problem}


def gradcheck(component: str, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
              floor: float = 1e-5) -> GradcheckReport:
    """Run the named check; see ``COMPONENTS``."""
    if component not in _PROBLEMS:
        raise ConfigError(f"unknown gradcheck component {component!r}; choose from {', '.join(COMPONENTS)}")
    g = torch.Generator().manual_seed(seed)
    fn, tensors = _PROBLEMS[component](g)
    return check(fn, tensors, component, eps, tol, floor)
