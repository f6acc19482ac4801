"""Confusion-matrix mIoU and segmentation map export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DimensionError
from .losses import IGNORE_INDEX


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions. Ignored pixels are skipped."""

    num_classes: int
    ignore_index: int = IGNORE_INDEX
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, prediction, label) -> "ConfusionMatrix":
        pred, lab = _as_numpy(prediction), _as_numpy(label)
        if pred.shape != lab.shape:
            raise DimensionError(f"prediction {pred.shape} and label {lab.shape} differ in shape")
        keep = lab != self.ignore_index
        pred, lab = pred[keep].astype(np.int64), lab[keep].astype(np.int64)
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k):
            raise DimensionError(f"prediction values must lie in 0..{k - 1}")
        if lab.size and (lab.min() < 0 or lab.max() >= k):
            raise DimensionError(f"label values must lie in 0..{k - 1} or be {self.ignore_index}")
        self.counts += np.bincount(k * lab + pred, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class IoUReport:
    miou: float | None  # percent; None if no class has a non-empty union
    per_class: list[float | None]

    def to_dict(self) -> dict:
        return {"miou": self.miou, "per_class": self.per_class}


def miou(cm: ConfusionMatrix) -> IoUReport:
    """Per-class IoU in percent; classes with an empty union are ``None`` and
    left out of the mean."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(0) + c.sum(1) - tp
    per_class = [float(100.0 * t / u) if u > 0 else None for t, u in zip(tp, union)]
    defined = [v for v in per_class if v is not None]
    return IoUReport(float(np.mean(defined)) if defined else None, per_class)


def upsample_prediction(logits: torch.Tensor, size) -> torch.Tensor:
    """argmax at logit resolution, then nearest-neighbour upsampling."""
    pred = logits.argmax(dim=1)
    if tuple(pred.shape[-2:]) != tuple(size):
        pred = F.interpolate(pred[:, None].float(), size=tuple(size), mode="nearest")[:, 0].long()
    return pred


@torch.no_grad()
def evaluate(model, batches, num_classes: int, ignore_index: int = IGNORE_INDEX) -> IoUReport:
    """Score ``model`` on an iterable of ``(images, labels)`` batches."""
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(num_classes, ignore_index)
    for images, labels in batches:
        logits = model(images).logits
        cm.update(upsample_prediction(logits, labels.shape[-2:]), labels)
    model.train(was_training)
    return miou(cm)


def write_per_class_csv(report: IoUReport, path, class_names: Sequence[str] | None = None,
                        name: str = "model") -> Path:
    path = Path(path)
    k = len(report.per_class)
    names = list(class_names) if class_names else [f"class_{i}" for i in range(k)]
    fmt = lambda v: "" if v is None else f"{v:.2f}"  # noqa: E731
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mIoU"] + names)
        w.writerow([name, fmt(report.miou)] + [fmt(v) for v in report.per_class])
    return path


def write_summary_json(report: IoUReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2))
    return path


def default_palette(num_classes: int) -> np.ndarray:
    """(256, 3) uint8 palette; entries beyond the classes (incl. 255) are black."""
    pal = np.zeros((256, 3), dtype=np.uint8)
    rng = np.random.default_rng(7)
    pal[:num_classes] = rng.integers(40, 256, size=(num_classes, 3))
    pal[IGNORE_INDEX] = 0
    return pal


def export_maps(predictions, out_dir, palette: np.ndarray | None = None, num_classes: int | None = None,
                start_index: int = 0) -> list[Path]:
    """Write one indexed-color PNG per map; pixel values are the class IDs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = [_as_numpy(p) for p in predictions]
    if palette is None:
        k = num_classes or (max(int(m[m != IGNORE_INDEX].max(initial=0)) for m in maps) + 1 if maps else 1)
        palette = default_palette(k)
    flat = np.asarray(palette, dtype=np.uint8).reshape(-1).tolist()
    paths = []
    for i, m in enumerate(maps, start=start_index):
        img = Image.fromarray(m.astype(np.uint8), mode="P")
        img.putpalette(flat)
        p = out / f"pred_{i:06d}.png"
        img.save(p)
        paths.append(p)
    return paths


def load_map(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def constant_prediction_miou(class_freq: Sequence[float], predicted: int = 0) -> float:
    """mIoU (percent) of a model that predicts one class everywhere.

    That class scores IoU equal to its pixel share; every other present class
    scores 0. Uniform logits hit this case with ``predicted=0``.
    """
    present = [f for f in class_freq if f > 0]
    if not present:
        return math.nan
    return 100.0 * class_freq[predicted] / sum(class_freq) / len(present)
