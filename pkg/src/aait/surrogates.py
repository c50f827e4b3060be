"""Classifier wrapper, a small CIFAR-scale model zoo, checkpoints and ensembles."""

from __future__ import annotations

import logging
import math
import time
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ConfigurationError, TrainingFailure

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
ACCURACY_FLOOR = 70.0
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class Classifier(nn.Module):
    """Maps ``[0, 1]`` pixel batches to logits; owns its input normalization."""

    def __init__(self, net: nn.Module, architecture_id: str, num_classes: int, input_side: int,
                 mean=CIFAR_MEAN, std=CIFAR_STD):
        super().__init__()
        self.net = net
        self.architecture_id = architecture_id
        self.num_classes = num_classes
        self.input_side = input_side
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))
        self.eval()

    def forward(self, x):
        return self.net((x - self.mean) / self.std)


class EnsembleClassifier(nn.Module):
    """Plain average of member logits."""

    def __init__(self, members):
        super().__init__()
        members = list(members)
        if not members:
            raise ConfigurationError("ensemble needs at least one member")
        counts = {m.num_classes for m in members}
        if len(counts) != 1:
            raise ConfigurationError(f"ensemble members disagree on class count: {sorted(counts)}")
        self.members = nn.ModuleList(members)
        self.num_classes = counts.pop()
        self.input_side = members[0].input_side
        self.architecture_id = "ensemble(" + ",".join(m.architecture_id for m in members) + ")"
        self.eval()

    def forward(self, x):
        return torch.stack([m(x) for m in self.members]).mean(dim=0)


# ---------------------------------------------------------------------------
# architectures


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class ResNetCifar(nn.Module):
    """ResNet-(6n+2) for 32x32 inputs; depth 20 uses n=3 blocks per stage."""

    def __init__(self, depth=20, width=16, num_classes=10):
        super().__init__()
        n = (depth - 2) // 6
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        blocks, cin = [], width
        for stage, cout in enumerate((width, 2 * width, 4 * width)):
            for i in range(n):
                blocks.append(_BasicBlock(cin, cout, 2 if (i == 0 and stage > 0) else 1))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(cin, num_classes)

    def forward(self, x):
        x = self.blocks(self.stem(x))
        return self.head(F.adaptive_avg_pool2d(x, 1).flatten(1))


class VGGCifar(nn.Module):
    """VGG-11 layout with batch norm and global pooling."""

    def __init__(self, width=8, num_classes=10):
        super().__init__()
        cfg = [1, "M", 2, "M", 4, 4, "M", 8, 8, "M", 8, 8]
        layers, cin = [], 3
        for item in cfg:
            if item == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                cout = item * width
                layers += [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
                cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, num_classes)

    def forward(self, x):
        return self.head(F.adaptive_avg_pool2d(self.features(x), 1).flatten(1))


class _SeparableBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.dw = nn.Conv2d(cin, cin, 3, stride, 1, groups=cin, bias=False)
        self.bn1 = nn.BatchNorm2d(cin)
        self.pw = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn2(self.pw(F.relu(self.bn1(self.dw(x))))))


class MobileNetCifar(nn.Module):
    """Depthwise-separable stack in the MobileNet-v1 style."""

    def __init__(self, width=16, num_classes=10):
        super().__init__()
        w = width
        plan = [(w, 2 * w, 1), (2 * w, 4 * w, 2), (4 * w, 4 * w, 1), (4 * w, 8 * w, 2), (8 * w, 8 * w, 1)]
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        self.blocks = nn.Sequential(*[_SeparableBlock(a, b, s) for a, b, s in plan])
        self.head = nn.Linear(8 * w, num_classes)

    def forward(self, x):
        return self.head(F.adaptive_avg_pool2d(self.blocks(self.stem(x)), 1).flatten(1))


class TinyCNN(nn.Module):
    """Two-layer CNN used for fast tests."""

    def __init__(self, width=8, num_classes=10):
        super().__init__()
        self.c1 = nn.Conv2d(3, width, 3, padding=1)
        self.c2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.head = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        x = F.relu(self.c2(F.relu(self.c1(x))))
        return self.head(F.adaptive_avg_pool2d(x, 1).flatten(1))


ARCHITECTURES: dict = {
    "resnet20": lambda num_classes: ResNetCifar(20, 8, num_classes),
    "resnet20-w16": lambda num_classes: ResNetCifar(20, 16, num_classes),
    "vgg11": lambda num_classes: VGGCifar(8, num_classes),
    "mobilenet": lambda num_classes: MobileNetCifar(8, num_classes),
    "tiny": lambda num_classes: TinyCNN(8, num_classes),
}


def build_classifier(architecture_id: str, num_classes: int = 10, input_side: int = 32, seed: Optional[int] = None) -> Classifier:
    if architecture_id not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {architecture_id!r}; known: {sorted(ARCHITECTURES)}")
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(int(seed))
        net = ARCHITECTURES[architecture_id](num_classes)
    return Classifier(net, architecture_id, num_classes, input_side)


# ---------------------------------------------------------------------------
# training and evaluation


@torch.no_grad()
def predict(classifier: Callable, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    logits = [classifier(chunk) for chunk in images.split(batch_size)]
    return torch.cat(logits) if logits else torch.empty(0)


def accuracy(classifier: Callable, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 500) -> float:
    if len(labels) == 0:
        return 0.0
    pred = predict(classifier, images, batch_size).argmax(dim=1)
    return 100.0 * float((pred == labels).float().mean())


def _augment(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    padded = F.pad(x, (4, 4, 4, 4))
    dx = torch.randint(0, 9, (n,), generator=g)
    dy = torch.randint(0, 9, (n,), generator=g)
    rows = (dy.view(n, 1) + torch.arange(h).view(1, h)).view(n, 1, h, 1).expand(n, x.shape[1], h, w + 8)
    out = padded.gather(2, rows)
    cols = (dx.view(n, 1) + torch.arange(w).view(1, w)).view(n, 1, 1, w).expand(n, x.shape[1], h, w)
    out = out.gather(3, cols)
    flip = torch.rand(n, generator=g) < 0.5
    out[flip] = out[flip].flip(-1)
    return out


def train_surrogate(
    architecture_id: str,
    train_images: torch.Tensor,
    train_labels: torch.Tensor,
    test_images: torch.Tensor,
    test_labels: torch.Tensor,
    epochs: int = 30,
    seed: int = 0,
    batch_size: int = 128,
    lr: float = 0.05,
    weight_decay: float = 5e-4,
    accuracy_floor: float = ACCURACY_FLOOR,
    checkpoint: Optional[Path] = None,
):
    """Train a zoo model with SGD + cosine schedule; return ``(classifier, test_accuracy)``.

    Raises :class:`TrainingFailure` when the test accuracy ends below
    ``accuracy_floor``.  The checkpoint, if requested, is only written on
    success.
    """
    num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    model = build_classifier(architecture_id, num_classes, train_images.shape[-1], seed=seed)
    g = torch.Generator().manual_seed(int(seed))
    steps_per_epoch = max(1, math.ceil(len(train_labels) / batch_size))
    total = max(1, epochs * steps_per_epoch)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=weight_decay, nesterov=True)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=total, pct_start=0.15)

    for epoch in range(epochs):
        model.train()
        t0 = time.time()
        order = torch.randperm(len(train_labels), generator=g)
        running = 0.0
        for idx in order.split(batch_size):
            x = _augment(train_images[idx], g)
            loss = F.cross_entropy(model(x), train_labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += float(loss.detach()) * len(idx)
        model.eval()
        logger.info("%s epoch %d loss %.4f (%.1fs)", architecture_id, epoch + 1, running / len(train_labels), time.time() - t0)

    model.eval()
    acc = accuracy(model, test_images, test_labels)
    logger.info("%s seed %d test accuracy %.2f%%", architecture_id, seed, acc)
    if acc < accuracy_floor:
        raise TrainingFailure(f"{architecture_id}: test accuracy {acc:.2f}% below floor {accuracy_floor}%", acc, model)
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, seed=seed, test_accuracy=acc)
    return model, acc


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(classifier: Classifier, path, seed: int, test_accuracy: float, **extra) -> None:
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture_id": classifier.architecture_id,
        "class_count": classifier.num_classes,
        "input_side": classifier.input_side,
        "seed": int(seed),
        "test_accuracy": float(test_accuracy),
        "mean": [float(v) for v in classifier.mean.flatten()],
        "std": [float(v) for v in classifier.std.flatten()],
    }
    header.update(extra)
    state = {k: v for k, v in classifier.net.state_dict().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"header": header, "state_dict": state}, tmp)
    tmp.replace(path)


def read_header(path) -> dict:
    return _read(path)["header"]


def _read(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types on corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or "header" not in blob or "state_dict" not in blob:
        raise CheckpointError(f"{path}: not a classifier checkpoint")
    header = blob["header"]
    required = ("format_version", "architecture_id", "class_count", "input_side", "seed", "test_accuracy")
    missing = [k for k in required if k not in header]
    if missing:
        raise CheckpointError(f"{path}: header missing {missing}")
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header['format_version']}")
    return blob


def load_classifier(path, expected_architecture: Optional[str] = None) -> Classifier:
    blob = _read(path)
    header = blob["header"]
    arch = header["architecture_id"]
    if expected_architecture is not None and arch != expected_architecture:
        raise CheckpointError(f"architecture mismatch: expected {expected_architecture!r}, found {arch!r}")
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"{path}: unknown architecture {arch!r}")
    model = build_classifier(arch, header["class_count"], header["input_side"])
    if "mean" in header:
        model.mean.copy_(torch.tensor(header["mean"]).view(1, -1, 1, 1))
        model.std.copy_(torch.tensor(header["std"]).view(1, -1, 1, 1))
    try:
        model.net.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not fit {arch!r}: {exc}") from None
    model.eval()
    model.checkpoint_header = dict(header)
    return model


def freeze(classifier: nn.Module) -> nn.Module:
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)
    return classifier
