"""Targeted classification losses on raw logits."""

from __future__ import annotations

import enum

import torch
import torch.nn.functional as F

from .errors import DomainError


class LossKind(str, enum.Enum):
    LOGIT = "logit"
    CROSS_ENTROPY = "cross_entropy"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        aliases = {"ce": cls.CROSS_ENTROPY, "xent": cls.CROSS_ENTROPY}
        key = str(value).lower().replace("-", "_")
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise DomainError(f"unknown loss kind {value!r}") from None


def check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise DomainError(f"label out of range [0, {num_classes})")


def targeted_loss(logits: torch.Tensor, targets: torch.Tensor, kind=LossKind.LOGIT, reduction: str = "mean"):
    """Loss whose minimization drives predictions toward ``targets``.

    ``logit``: negative target-class logit.  ``cross_entropy``: softmax cross
    entropy against the target.  Consumes raw logits, never probabilities.
    """
    kind = LossKind.parse(kind)
    check_labels(targets, logits.shape[-1])
    if kind is LossKind.LOGIT:
        per_item = -logits.gather(1, targets.view(-1, 1)).squeeze(1)
    else:
        per_item = F.cross_entropy(logits, targets, reduction="none")
    if reduction == "none":
        return per_item
    if reduction == "sum":
        return per_item.sum()
    return per_item.mean()
