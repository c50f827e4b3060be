"""Datasets, attack task manifests and 8-bit PNG I/O.

Two image sources feed the desk-scale experiments:

* ``cifar10`` -- the python-pickle release of CIFAR-10, read from a local
  directory (``data_batch_1`` ... ``test_batch``);
* ``shapes10`` -- a procedurally rendered CIFAR-format stand-in: ten shape
  classes drawn with random pose, scale and colour over smooth cluttered
  backgrounds, quantized to 8 bits.

Task sets use the NIPS 2017 development-set layout: a CSV with columns
``ImageId, TrueLabel, TargetClass`` (1-indexed classes) next to one
``<ImageId>.png`` per row.
"""

from __future__ import annotations

import csv
import math
import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, PngImagePlugin

from .errors import ConfigurationError, IngestionError, ManifestError

SHAPE_CLASSES = (
    "disk", "ring", "square", "frame", "triangle",
    "cross", "star", "crescent", "chevron", "two_dots",
)
MANIFEST_COLUMNS = ("ImageId", "TrueLabel", "TargetClass")


@dataclass
class LabeledImages:
    images: torch.Tensor  # (N, C, H, W) float in [0, 1]
    labels: torch.Tensor  # (N,) long

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "LabeledImages":
        return LabeledImages(self.images[index], self.labels[index])


@dataclass
class AttackTask:
    image_id: str
    image: torch.Tensor
    true_label: int
    target_label: int

    def __post_init__(self):
        if self.true_label == self.target_label:
            raise ManifestError(f"{self.image_id}: target class equals true label")


# ---------------------------------------------------------------------------
# shapes10


def _shape_masks(label: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Membership of canonical coordinates ``(u, v)`` in each image's class shape."""
    r = torch.sqrt(u * u + v * v)
    theta = torch.atan2(v, u)
    box = torch.maximum(u.abs(), v.abs())
    masks = [
        r < 0.8,
        (r > 0.48) & (r < 0.85),
        box < 0.65,
        (box > 0.38) & (box < 0.72),
        (v <= 0.55) & (u.abs() <= (v + 0.8) * (0.8 / 1.35)),
        ((u.abs() < 0.24) & (v.abs() < 0.82)) | ((v.abs() < 0.24) & (u.abs() < 0.82)),
        r < 0.42 + 0.4 * torch.cos(5 * theta).clamp(min=0) ** 1.5,
        (r < 0.82) & (torch.sqrt((u - 0.4) ** 2 + v * v) > 0.62),
        ((v - (u.abs() - 0.35)).abs() < 0.24) & (u.abs() < 0.8),
        (torch.sqrt((u - 0.45) ** 2 + v * v) < 0.33) | (torch.sqrt((u + 0.45) ** 2 + v * v) < 0.33),
    ]
    stacked = torch.cat(masks, dim=1).float()  # (N, 10, H, W)
    return stacked.gather(1, label.view(-1, 1, 1, 1).expand(-1, 1, *u.shape[-2:]))


def render_shapes(labels: torch.Tensor, generator: torch.Generator, side: int = 32, supersample: int = 2,
                  min_gap: float = 0.12) -> torch.Tensor:
    """Render one image per label; returns uint8 ``(N, 3, side, side)``.

    ``min_gap`` is the smallest luminance difference between object and
    background; low values make the class evidence faint and textured, which
    keeps trained models about as fragile as natural-image classifiers.
    """
    n = len(labels)
    s = side * supersample
    # canonical coordinates: pixel grid -> rotated, scaled, shifted frame
    coords = (torch.arange(s, dtype=torch.float32) + 0.5) / s * 2.0 - 1.0
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    angle = (torch.rand(n, generator=generator) * 2 - 1) * math.radians(25)
    scale = 0.5 + 0.3 * torch.rand(n, generator=generator)
    shift = (torch.rand(n, 2, generator=generator) * 2 - 1) * 0.22
    c, sn = torch.cos(angle).view(n, 1, 1), torch.sin(angle).view(n, 1, 1)
    x0 = xx.unsqueeze(0) - shift[:, 0].view(n, 1, 1)
    y0 = yy.unsqueeze(0) - shift[:, 1].view(n, 1, 1)
    u = (c * x0 + sn * y0) / scale.view(n, 1, 1)
    v = (-sn * x0 + c * y0) / scale.view(n, 1, 1)
    mask = _shape_masks(labels, u.unsqueeze(1), v.unsqueeze(1))
    mask = F.avg_pool2d(mask, supersample)  # anti-aliased coverage

    # smooth coloured background with clutter and sensor noise
    coarse = torch.rand(n, 3, 4, 4, generator=generator)
    bg = F.interpolate(coarse, size=(side, side), mode="bicubic", align_corners=False)
    fine = torch.rand(n, 3, 16, 16, generator=generator) - 0.5
    bg = bg + 0.3 * F.interpolate(fine, size=(side, side), mode="bilinear", align_corners=False)
    bg = 0.15 + 0.7 * bg.clamp(0, 1)

    fg = torch.rand(n, 3, 1, 1, generator=generator)
    lum = torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    bg_lum = (bg.mean(dim=(2, 3), keepdim=True) * lum).sum(1, keepdim=True)
    fg_lum = (fg * lum).sum(1, keepdim=True)
    # push the object away from the background luminance
    direction = torch.where(bg_lum > 0.5, -1.0, 1.0)
    gap = (fg_lum - bg_lum) * direction
    fg = (fg + direction * (min_gap - gap).clamp(min=0)).clamp(0, 1)
    ramp = (coords[::supersample] + coords[1::supersample]) / 2
    shade = 1.0 + 0.15 * (torch.rand(n, 1, 1, 1, generator=generator) * 2 - 1) * ramp.view(1, 1, 1, side)
    texture = torch.rand(n, 1, 8, 8, generator=generator) - 0.5
    texture = 0.2 * F.interpolate(texture, size=(side, side), mode="bilinear", align_corners=False)
    fg_img = (fg * shade + texture).clamp(0, 1)

    img = bg * (1 - mask) + fg_img * mask
    img = img + 0.03 * torch.randn(img.shape, generator=generator)
    return torch.round(img.clamp(0, 1) * 255).to(torch.uint8)


def make_shapes10(n_train: int = 10000, n_test: int = 2000, seed: int = 0, side: int = 32, min_gap: float = 0.12):
    """Balanced ``(train, test)`` splits of the shapes10 dataset."""
    g = torch.Generator().manual_seed(int(seed))
    splits = []
    for n in (n_train, n_test):
        labels = torch.arange(n) % len(SHAPE_CLASSES)
        labels = labels[torch.randperm(n, generator=g)]
        chunks = [render_shapes(lab, g, side, min_gap=min_gap) for lab in labels.split(1000)]
        images = torch.cat(chunks) if chunks else torch.empty(0, 3, side, side, dtype=torch.uint8)
        splits.append(LabeledImages(images.float() / 255.0, labels))
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# CIFAR-10 (python pickle release)


def _unpickle(path: Path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


def load_cifar10(root) -> tuple:
    """Read ``(train, test)`` from an extracted ``cifar-10-batches-py`` directory."""
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    files = [root / f"data_batch_{i}" for i in range(1, 6)] + [root / "test_batch"]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise ConfigurationError(f"CIFAR-10 batches not found: {missing}")
    parts = []
    for f in files:
        blob = _unpickle(f)
        data = np.asarray(blob[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
        labels = np.asarray(blob[b"labels"], dtype=np.int64)
        parts.append((data, labels))
    train_x = np.concatenate([p[0] for p in parts[:5]])
    train_y = np.concatenate([p[1] for p in parts[:5]])
    test_x, test_y = parts[5]
    return (
        LabeledImages(torch.from_numpy(train_x).float() / 255.0, torch.from_numpy(train_y)),
        LabeledImages(torch.from_numpy(test_x).float() / 255.0, torch.from_numpy(test_y)),
    )


def load_dataset(name: str = "shapes10", root=None, seed: int = 0, n_train: int = 10000, n_test: int = 2000):
    """Return ``(train, test)`` for ``shapes10`` or ``cifar10``.

    ``cifar10`` reads from ``root`` or the ``AAIT_CIFAR10_DIR`` environment variable.
    """
    if name == "shapes10":
        return make_shapes10(n_train, n_test, seed)
    if name == "cifar10":
        root = root or os.environ.get("AAIT_CIFAR10_DIR")
        if not root:
            raise ConfigurationError("cifar10 needs a data directory (--data-root or AAIT_CIFAR10_DIR)")
        return load_cifar10(root)
    raise ConfigurationError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# tasks, manifests, PNG


def assign_targets(labels: torch.Tensor, num_classes: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniformly random target class different from each true label."""
    offset = torch.randint(1, num_classes, labels.shape, generator=generator)
    return (labels + offset) % num_classes


def save_png(image: torch.Tensor, path, metadata: Optional[dict] = None) -> None:
    """Write a ``(C, H, W)`` image in [0, 1] as 8-bit PNG (rounded)."""
    arr = torch.round(image.detach().clamp(0, 1) * 255).to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    info = PngImagePlugin.PngInfo()
    for key, value in (metadata or {}).items():
        info.add_text(str(key), str(value))
    Image.fromarray(arr).save(path, format="PNG", pnginfo=info)


def load_png(path, side: Optional[int] = None) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def quantize(images: torch.Tensor) -> torch.Tensor:
    """Round to the 8-bit grid, as a PNG round trip would."""
    return torch.round(images.clamp(0, 1) * 255) / 255


def write_task_set(out_dir, images: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor,
                   ids: Optional[Sequence[str]] = None, manifest_name: str = "dev_dataset.csv",
                   metadata: Optional[dict] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = list(ids) if ids is not None else [f"{i:05d}" for i in range(len(labels))]
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for image_id, img, y, t in zip(ids, images, labels.tolist(), targets.tolist()):
            save_png(img, out_dir / f"{image_id}.png", metadata)
            writer.writerow([image_id, y + 1, t + 1])
    return manifest


def read_manifest(manifest_path, num_classes: int = 1000) -> list:
    """Rows of ``(image_id, true_label, target_label)`` with 0-indexed labels."""
    rows = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        absent = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if absent:
            raise ManifestError(f"manifest lacks columns {absent}")
        for line, row in enumerate(reader, start=2):
            try:
                y, t = int(row["TrueLabel"]), int(row["TargetClass"])
            except ValueError:
                raise ManifestError(f"line {line}: labels must be integers") from None
            for name, value in (("TrueLabel", y), ("TargetClass", t)):
                if not 1 <= value <= num_classes:
                    raise ManifestError(f"line {line}: {name} {value} outside [1, {num_classes}]")
            if y == t:
                raise ManifestError(f"line {line}: TargetClass equals TrueLabel for {row['ImageId']}")
            rows.append((row["ImageId"], y - 1, t - 1))
    return rows


def load_imagenet_compatible(manifest_path, images_dir=None, side: int = 299, num_classes: int = 1000,
                             expected_count: Optional[int] = None) -> list:
    """Load attack tasks from an ImageNet-Compatible style manifest and image folder."""
    manifest_path = Path(manifest_path)
    images_dir = Path(images_dir) if images_dir is not None else manifest_path.parent
    rows = read_manifest(manifest_path, num_classes)
    missing = [image_id for image_id, _, _ in rows if _find_image(images_dir, image_id) is None]
    if missing:
        raise IngestionError(f"{len(missing)} image(s) missing: {missing[:20]}", missing)
    tasks = [AttackTask(i, load_png(_find_image(images_dir, i), side), y, t) for i, y, t in rows]
    if expected_count is not None and len(tasks) != expected_count:
        raise ManifestError(f"expected {expected_count} tasks, found {len(tasks)}")
    return tasks


def _find_image(images_dir: Path, image_id: str) -> Optional[Path]:
    for ext in (".png", ".jpg", ".jpeg", ".JPEG", ".PNG"):
        candidate = images_dir / f"{image_id}{ext}"
        if candidate.is_file():
            return candidate
    return None


def tasks_to_batch(tasks: Iterable[AttackTask]):
    """Stack tasks into ``(ids, images, true_labels, target_labels)``."""
    tasks = list(tasks)
    if not tasks:
        raise ConfigurationError("empty task list")
    ids = [t.image_id for t in tasks]
    images = torch.stack([t.image for t in tasks])
    y = torch.tensor([t.true_label for t in tasks], dtype=torch.long)
    yt = torch.tensor([t.target_label for t in tasks], dtype=torch.long)
    return ids, images, y, yt
