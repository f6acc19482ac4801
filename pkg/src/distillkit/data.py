"""Segmentation data: a synthetic shapes task, paired PNG folders, batching.

Images are float tensors (3, H, W) normalized per channel; labels are int64
maps (H, W) with values in 0..K-1 or 255 (ignore).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DataError
from .losses import IGNORE_INDEX

log = logging.getLogger(__name__)

MEAN = (0.5, 0.5, 0.5)
STD = (0.25, 0.25, 0.25)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class SegSample:
    image: torch.Tensor
    label: torch.Tensor


def normalize(img: torch.Tensor, mean=MEAN, std=STD) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=img.dtype)[:, None, None]
    s = torch.as_tensor(std, dtype=img.dtype)[:, None, None]
    return (img - m) / s


def denormalize(img: torch.Tensor, mean=MEAN, std=STD) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=img.dtype)[:, None, None]
    s = torch.as_tensor(std, dtype=img.dtype)[:, None, None]
    return img * s + m


class SegDataset:
    """In-memory list of samples."""

    def __init__(self, samples: Sequence[SegSample], num_classes: int):
        self.samples = list(samples)
        self.num_classes = num_classes

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> SegSample:
        return self.samples[i]

    def class_histogram(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for s in self.samples:
            lab = s.label.numpy().ravel()
            lab = lab[lab != IGNORE_INDEX]
            counts += np.bincount(lab, minlength=self.num_classes)[: self.num_classes]
        return counts


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Random rectangles and circles on a background.

    Each class has its own base color by default. With ``paired_colors``
    classes ``2j - 1`` (rectangles) and ``2j`` (circles) share a base color,
    so telling them apart needs shape context (a much harder task).
    """

    seed: int = 0
    num_samples: int = 256
    image_size: int = 64
    num_classes: int = 8
    shapes_per_image: tuple[int, int] = (2, 5)
    noise_std: float = 0.1
    color_jitter: float = 0.05
    paired_colors: bool = False
    min_extent: int = 6
    max_extent: int = 24
    # shape geometry is snapped to grid x grid cells; 4 matches the logit
    # stride so nearest-upsampled predictions can be exact
    grid: int = 4

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad shapes_per_image range {self.shapes_per_image}")
        if self.num_samples < 0 or self.image_size < 1:
            raise ConfigError("num_samples must be >= 0 and image_size >= 1")
        if not 1 <= self.min_extent <= self.max_extent:
            raise ConfigError("need 1 <= min_extent <= max_extent")
        if self.grid < 1:
            raise ConfigError("grid must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def class_colors(num_classes: int, paired: bool = True) -> np.ndarray:
    """Fixed RGB base colors in [0, 1], row ``k`` for class ``k``."""
    rng = np.random.default_rng(12345)
    n_base = num_classes // 2 + 1 if paired else num_classes
    base = rng.uniform(0.15, 0.95, size=(n_base, 3))
    base[0] = (0.1, 0.1, 0.1)
    colors = np.zeros((num_classes, 3))
    for k in range(num_classes):
        colors[k] = base[(k + 1) // 2] if (paired and k > 0) else base[k]
    return colors


def _paint(spec: SynthSpec, rng: np.random.Generator, colors: np.ndarray):
    n = spec.image_size
    img = np.empty((n, n, 3))
    img[:] = colors[0] + rng.normal(0, spec.color_jitter, 3)
    label = np.zeros((n, n), dtype=np.int64)
    g = spec.grid
    yy, xx = np.mgrid[0:n, 0:n]
    # cell centre coordinates: every pixel in a cell shares one mask decision
    yc = (yy // g) * g + (g - 1) / 2
    xc = (xx // g) * g + (g - 1) / 2
    for _ in range(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1)):
        k = int(rng.integers(1, spec.num_classes))
        if spec.paired_colors:
            circle = k % 2 == 0
        else:
            circle = bool(rng.integers(0, 2))
        ext = int(rng.integers(spec.min_extent, spec.max_extent + 1))
        if circle:
            r = ext / 2
            cy, cx = rng.uniform(0, n, 2)
            mask = (yc - cy) ** 2 + (xc - cx) ** 2 <= r * r
        else:
            h = ext
            w = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            y0 = int(rng.integers(-h // 2, n - h // 2))
            x0 = int(rng.integers(-w // 2, n - w // 2))
            y0, x0, h, w = y0 // g * g, x0 // g * g, max(g, h // g * g), max(g, w // g * g)
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        img[mask] = np.clip(colors[k] + rng.normal(0, spec.color_jitter, 3), 0, 1)
        label[mask] = k
    if spec.noise_std > 0:
        img = img + rng.normal(0, spec.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0), label


def generate_synthetic(spec: SynthSpec) -> SegDataset:
    rng = np.random.default_rng(spec.seed)
    colors = class_colors(spec.num_classes, spec.paired_colors)
    samples = []
    for _ in range(spec.num_samples):
        img, label = _paint(spec, rng, colors)
        image = normalize(torch.from_numpy(img).permute(2, 0, 1).float())
        samples.append(SegSample(image, torch.from_numpy(label)))
    return SegDataset(samples, spec.num_classes)


def cached_synthetic(spec: SynthSpec, cache_dir: str | os.PathLike | None = None) -> SegDataset:
    """Like :func:`generate_synthetic`, reusing an ``.pt`` file under
    ``cache_dir`` (default: ``$DISTILLKIT_CACHE``, no caching if unset)."""
    cache_dir = cache_dir or os.environ.get("DISTILLKIT_CACHE")
    if not cache_dir:
        return generate_synthetic(spec)
    path = Path(cache_dir) / f"synth-{spec.digest()}.pt"
    if path.exists():
        blob = torch.load(path)
        return SegDataset([SegSample(i, l) for i, l in zip(blob["images"], blob["labels"])],
                          spec.num_classes)
    ds = generate_synthetic(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    images = torch.stack([s.image for s in ds]) if len(ds) else torch.empty(0)
    labels = torch.stack([s.label for s in ds]) if len(ds) else torch.empty(0)
    torch.save({"spec": asdict(spec), "images": images, "labels": labels}, path)
    return ds


# --------------------------------------------------------------------------
# on-disk layout: <root>/images/<stem>.png (RGB), <root>/labels/<stem>.png (L)
# --------------------------------------------------------------------------


def export_dataset(dataset, out_dir, mean=MEAN, std=STD) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        s = dataset[i]
        rgb = denormalize(s.image, mean, std).clamp(0, 1).mul(255).round().byte()
        Image.fromarray(rgb.permute(1, 2, 0).numpy(), mode="RGB").save(out / "images" / f"{i:06d}.png")
        Image.fromarray(s.label.numpy().astype(np.uint8), mode="L").save(out / "labels" / f"{i:06d}.png")
    return out


def _validate_label(arr: np.ndarray, num_classes: int, path) -> None:
    bad = (arr >= num_classes) & (arr != IGNORE_INDEX)
    if bad.any():
        i, j = (int(v) for v in np.argwhere(bad)[0])
        raise DataError(
            f"{path}: label ID {int(arr[i, j])} at pixel (row={i}, col={j}) is outside "
            f"0..{num_classes - 1} and not {IGNORE_INDEX}"
        )


class PairedDataset:
    """Image/label PNG pairs matched by file stem, decoded on access."""

    def __init__(self, pairs, num_classes: int, mean=MEAN, std=STD):
        self.pairs = list(pairs)
        self.num_classes = num_classes
        self.mean, self.std = mean, std

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i) -> SegSample:
        img_path, lab_path = self.pairs[i]
        rgb = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        lab = np.asarray(Image.open(lab_path), dtype=np.int64)
        _validate_label(lab, self.num_classes, lab_path)
        image = normalize(torch.from_numpy(rgb).permute(2, 0, 1).contiguous(), self.mean, self.std)
        return SegSample(image, torch.from_numpy(lab.copy()))


def load_paired_dataset(image_dir, label_dir, expected_classes: int, mean=MEAN, std=STD) -> PairedDataset:
    """Match images to labels by stem and check every label map's IDs up front."""
    image_dir, label_dir = Path(image_dir), Path(label_dir)
    images = {p.stem: p for p in sorted(image_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    labels = {p.stem: p for p in sorted(label_dir.iterdir()) if p.suffix.lower() == ".png"}
    missing = [f"label missing for image {images[s].name}" for s in sorted(images.keys() - labels.keys())]
    missing += [f"image missing for label {labels[s].name}" for s in sorted(labels.keys() - images.keys())]
    if missing:
        raise DataError(f"{len(missing)} unpaired file(s):\n  " + "\n  ".join(missing))
    if not images:
        warnings.warn(f"no image/label pairs found in {image_dir} and {label_dir}", stacklevel=2)
    pairs = [(images[s], labels[s]) for s in sorted(images)]
    for _, lab_path in pairs:
        img = Image.open(lab_path)
        if img.mode not in ("L", "P"):
            raise DataError(f"{lab_path}: label must be single-channel 8-bit, got mode {img.mode}")
        _validate_label(np.asarray(img), expected_classes, lab_path)
    return PairedDataset(pairs, expected_classes, mean, std)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def resize_pair(image: torch.Tensor, label: torch.Tensor, size: tuple[int, int]):
    """Bilinear for images, nearest for labels; accepts batched or single samples."""
    single = image.dim() == 3
    if single:
        image, label = image[None], label[None]
    if tuple(image.shape[-2:]) != tuple(size):
        image = F.interpolate(image, size=size, mode="bilinear", align_corners=False)
        label = F.interpolate(label[:, None].float(), size=size, mode="nearest")[:, 0].long()
    if single:
        image, label = image[0], label[0]
    return image, label


def make_batches(
    dataset,
    batch_size: int = 2,
    seed: int | tuple[int, ...] = 0,
    resize_to: tuple[int, int] | None = None,
    stride_multiple: int = 32,
    shuffle: bool = True,
    drop_last: bool = False,
    hflip: bool = False,
    crop_to: tuple[int, int] | None = None,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """One pass over ``dataset`` in a seed-determined order.

    ``hflip`` and ``crop_to`` enable random flips and crops, drawn from the
    same seeded generator.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    for name, size in (("resize_to", resize_to), ("crop_to", crop_to)):
        if size is not None and (size[0] % stride_multiple or size[1] % stride_multiple):
            raise ConfigError(
                f"{name}={tuple(size)} is not divisible by the model stride {stride_multiple}"
            )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        imgs, labs = [], []
        for i in idx:
            s = dataset[int(i)]
            img, lab = s.image, s.label
            if resize_to is not None:
                img, lab = resize_pair(img, lab, tuple(resize_to))
            if crop_to is not None:
                h, w = img.shape[-2:]
                ch, cw = crop_to
                if ch > h or cw > w:
                    raise ConfigError(f"crop {tuple(crop_to)} larger than image {(h, w)}")
                y0 = int(rng.integers(0, h - ch + 1))
                x0 = int(rng.integers(0, w - cw + 1))
                img, lab = img[:, y0:y0 + ch, x0:x0 + cw], lab[y0:y0 + ch, x0:x0 + cw]
            if hflip and rng.random() < 0.5:
                img, lab = img.flip(-1), lab.flip(-1)
            imgs.append(img)
            labs.append(lab)
        yield torch.stack(imgs), torch.stack(labs)


def cycle_batches(dataset, batch_size: int = 2, seed: int = 0, **kwargs):
    """Endless batches; epoch ``e`` is shuffled with seed ``(seed, e)``."""
    if len(dataset) == 0:
        raise ConfigError("cannot draw batches from an empty dataset")
    epoch = 0
    while True:
        yield from make_batches(dataset, batch_size, seed=(seed, epoch),
                                drop_last=len(dataset) >= batch_size, **kwargs)
        epoch += 1
