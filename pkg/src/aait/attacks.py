"""Targeted iterative gradient attacks and their input-transformation wrappers.

All attacks work in ``[0, 1]`` pixel space and *descend* a targeted loss.
:func:`run_attack` composes the pieces: per iteration an optional DIM
transform of the running adversary, a gradient-averaging stage (plain, SIM,
Admix or a searched policy), momentum accumulation, TI smoothing, a signed
step and projection onto the epsilon ball intersected with ``[0, 1]``.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError, NumericError
from .losses import LossKind, targeted_loss
from .policy import Policy, apply_policy

logger = logging.getLogger(__name__)

STAGES = ("plain", "sim", "admix", "aait")


@dataclass
class AttackConfig:
    epsilon: float = 16 / 255
    alpha: float = 2 / 255
    iterations: int = 300
    decay: float = 1.0
    m: int = 5
    dim_probability: float = 0.7
    dim_max_size: int = 40
    ti_kernel_size: int = 5
    ti_sigma: float = 1.0  # 32 px inputs; the ImageNet preset uses 3
    sim_copies: int = 5
    admix_mixes: int = 3
    admix_weight: float = 0.2
    loss_kind: LossKind = LossKind.LOGIT
    seed: int = 0
    # sub-policy granularity at attack time; None = one sub-policy per transformed copy
    aait_chunk_size: Optional[int] = None
    # True re-smooths the stored momentum every iteration (blur compounds over t);
    # False keeps the raw accumulator and smooths only the step direction
    ti_on_momentum: bool = False

    def __post_init__(self):
        self.loss_kind = LossKind.parse(self.loss_kind)
        if self.epsilon < 0 or self.alpha < 0:
            raise DomainError("epsilon and alpha must be non-negative")
        if self.iterations < 0:
            raise DomainError("iterations must be non-negative")
        if self.m < 1 or self.sim_copies < 1 or self.admix_mixes < 1:
            raise DomainError("m, sim_copies and admix_mixes must be >= 1")
        if not 0.0 <= self.dim_probability <= 1.0:
            raise DomainError("dim_probability must lie in [0, 1]")

    @classmethod
    def imagenet(cls, **overrides) -> "AttackConfig":
        return cls(**{"dim_max_size": 330, "ti_sigma": 3.0, **overrides})

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["loss_kind"] = self.loss_kind.value
        return out


@dataclass
class Recipe:
    """Which wrappers take part in an attack.

    ``stage`` is the single gradient-averaging stage: ``plain``, ``sim``,
    ``admix`` or ``aait`` (the latter needs ``policy``).
    """

    dim: bool = False
    tim: bool = False
    mi: bool = False
    stage: str = "plain"
    policy: Optional[Policy] = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown gradient stage {self.stage!r}")
        if self.stage == "aait" and self.policy is None:
            raise ConfigurationError("AAIT stage requires a policy")

    @property
    def name(self) -> str:
        prefix = {"plain": "", "sim": "SI-", "admix": "Admix-", "aait": "AAIT-"}[self.stage]
        core = "".join(s for s, on in (("D", self.dim), ("T", self.tim), ("MI", self.mi)) if on)
        if not core:
            return prefix.rstrip("-") or "I-FGSM"
        return prefix + core

    @classmethod
    def parse(cls, text: str, policy: Optional[Policy] = None) -> "Recipe":
        """Parse ``dtmi``, ``si-dtmi``, ``admix-dtmi``, ``aait-dtmi`` or a comma list like ``dim,tim,mi,sim``."""
        text = text.strip().lower()
        if text in ("", "ifgsm", "i-fgsm", "none"):
            return cls(policy=policy)
        parts = []
        for chunk in text.replace("+", ",").split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            if "-" in chunk and chunk not in ("i-fgsm",):
                parts.extend(chunk.split("-"))
            else:
                parts.append(chunk)
        flags = {"dim": False, "tim": False, "mi": False}
        stages = []
        for token in parts:
            if token in ("dtmi", "dimtimmi"):
                flags.update(dim=True, tim=True, mi=True)
            elif token in ("dim", "di"):
                flags["dim"] = True
            elif token in ("tim", "ti"):
                flags["tim"] = True
            elif token in ("mi", "mim", "mifgsm"):
                flags["mi"] = True
            elif token in ("dmi",):
                flags.update(dim=True, mi=True)
            elif token in ("tmi",):
                flags.update(tim=True, mi=True)
            elif token in ("sim", "si"):
                stages.append("sim")
            elif token == "admix":
                stages.append("admix")
            elif token == "aait":
                stages.append("aait")
            else:
                raise ConfigurationError(f"unknown recipe component {token!r}")
        if len(set(stages)) > 1:
            raise ConfigurationError(f"gradient stages are mutually exclusive: {sorted(set(stages))}")
        stage = stages[0] if stages else "plain"
        return cls(stage=stage, policy=policy if stage == "aait" else None, **flags)


@dataclass
class AttackResult:
    adversarial: torch.Tensor
    loss_trace: list = field(default_factory=list)
    recipe_name: str = ""
    zero_gradient_steps: int = 0


def _check_finite(grad: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(grad).all():
        raise NumericError(f"non-finite gradient in {what}")
    return grad


def loss_gradient(classifier: Callable, x: torch.Tensor, targets: torch.Tensor, loss_kind=LossKind.LOGIT,
                  transform: Optional[Callable] = None):
    """Gradient of the summed targeted loss w.r.t. ``x`` (optionally through ``transform``)."""
    x = x.detach().requires_grad_(True)
    inp = transform(x) if transform is not None else x
    loss = targeted_loss(classifier(inp), targets, loss_kind, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return grad, float(loss.detach()) / max(1, len(targets))


def fgsm(classifier: Callable, x: torch.Tensor, targets: torch.Tensor, epsilon: float, loss_kind=LossKind.LOGIT):
    """Single targeted signed-gradient step of size ``epsilon``."""
    grad, _ = loss_gradient(classifier, x, targets, loss_kind)
    _check_finite(grad, "fgsm")
    return (x.detach() - epsilon * grad.sign()).clamp(0.0, 1.0)


def dim_transform(images: torch.Tensor, probability: float, max_size: int, generator: Optional[torch.Generator] = None):
    """Random resize to ``[side, max_size)`` then random zero-pad to ``max_size``, with given probability."""
    side = images.shape[-1]
    if max_size < side or max_size < images.shape[-2]:
        raise DomainError(f"dim_max_size {max_size} smaller than input side {side}")
    fire = float(torch.rand((), generator=generator)) < probability
    if not fire:
        return images
    if max_size == side:
        return images
    rnd = int(torch.randint(side, max_size, (1,), generator=generator))
    resized = F.interpolate(images, size=(rnd, rnd), mode="bilinear", align_corners=False)
    rem = max_size - rnd
    top = int(torch.randint(0, rem + 1, (1,), generator=generator))
    left = int(torch.randint(0, rem + 1, (1,), generator=generator))
    return F.pad(resized, (left, rem - left, top, rem - top), value=0.0)


def gaussian_kernel(size: int = 5, sigma: float = 3.0) -> torch.Tensor:
    """Normalized 2-D Gaussian on the integer grid ``[-size//2, size//2]^2`` (float64)."""
    if size < 1 or size % 2 == 0:
        raise DomainError(f"kernel size must be a positive odd integer, got {size}")
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    r = size // 2
    ax = torch.arange(-r, r + 1, dtype=torch.float64)
    kernel = torch.exp(-(ax.view(-1, 1) ** 2 + ax.view(1, -1) ** 2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def ti_smooth(kernel: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Depthwise same-padded convolution of each gradient channel with ``kernel``."""
    c = grad.shape[1]
    k = kernel.to(grad.dtype).expand(c, 1, *kernel.shape)
    return F.conv2d(grad, k, padding=kernel.shape[-1] // 2, groups=c)


def mi_accumulate(g_prev: torch.Tensor, grad: torch.Tensor, decay: float):
    """``decay * g_prev + grad / ||grad||_1`` with the L1 norm taken per image.

    Images whose gradient is all zero keep ``decay * g_prev``; a warning is
    issued and the number of such images is returned alongside.
    """
    dims = tuple(range(1, grad.dim()))
    norm = grad.abs().sum(dim=dims, keepdim=True) if dims else grad.abs()
    zero = norm == 0
    normalized = torch.where(zero, torch.zeros_like(grad), grad / torch.where(zero, torch.ones_like(norm), norm))
    n_zero = int(zero.sum())
    if n_zero:
        warnings.warn(f"zero gradient for {n_zero} image(s); momentum carried over", RuntimeWarning, stacklevel=2)
    return decay * g_prev + normalized, n_zero


def sim_gradient(classifier: Callable, x: torch.Tensor, targets: torch.Tensor, copies: int = 5,
                 loss_kind=LossKind.LOGIT, transform: Optional[Callable] = None):
    """Mean over ``i < copies`` of the gradient at ``x / 2**i``."""
    if copies < 1:
        raise DomainError("sim_copies must be >= 1")
    total, losses = torch.zeros_like(x), []
    for i in range(copies):
        scale = 1.0 / (2**i)
        inner = (lambda z, s=scale: transform(z) * s) if transform is not None else (lambda z, s=scale: z * s)
        grad, loss = loss_gradient(classifier, x, targets, loss_kind, inner)
        total += _check_finite(grad, f"SIM copy {i}")
        losses.append(loss)
    return total / copies, float(np.mean(losses))


def admix_partners(true_labels: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """For every row, the index of a random other row with a different true label."""
    n = len(true_labels)
    partners = torch.empty(n, dtype=torch.long)
    for i in range(n):
        pool = (true_labels != true_labels[i]).nonzero().flatten()
        if len(pool) == 0:
            raise DomainError("Admix needs images from a different true class in the batch")
        partners[i] = pool[int(torch.randint(len(pool), (1,), generator=generator))]
    return partners


def admix_gradient(classifier: Callable, x: torch.Tensor, targets: torch.Tensor, true_labels: torch.Tensor,
                   mixes: int = 3, weight: float = 0.2, copies: int = 5, loss_kind=LossKind.LOGIT,
                   generator: Optional[torch.Generator] = None, transform: Optional[Callable] = None,
                   other_images: Optional[torch.Tensor] = None):
    """Mean over mixes and scales of the gradient at ``(x + weight * x') / 2**i``.

    Mixing partners ``x'`` are other rows of the (transformed) batch with a
    different true label, detached from the graph.  ``other_images`` overrides
    the pool with an explicit ``(mixes, N, C, H, W)`` tensor.
    """
    if true_labels is None and other_images is None:
        raise DomainError("Admix requires true labels or an explicit mixing pool")
    total, losses = torch.zeros_like(x), []
    for j in range(mixes):
        if other_images is not None:
            partner_img = other_images[j].detach()
        else:
            idx = admix_partners(true_labels, generator)
            partner_img = None
        for i in range(copies):
            scale = 1.0 / (2**i)

            def inner(z, s=scale, idx=None if other_images is not None else idx, fixed=partner_img):
                base = transform(z) if transform is not None else z
                mate = fixed if fixed is not None else base.detach()[idx]
                return (base + weight * mate) * s

            grad, loss = loss_gradient(classifier, x, targets, loss_kind, inner)
            total += _check_finite(grad, f"Admix mix {j} copy {i}")
            losses.append(loss)
    return total / (mixes * copies), float(np.mean(losses))


def aait_gradient(classifier: Callable, policy, x_adv: torch.Tensor, targets: torch.Tensor, m: int = 5,
                  loss_kind=LossKind.LOGIT, generator: Optional[torch.Generator] = None,
                  transform: Optional[Callable] = None, chunk_size: Optional[int] = None):
    """Average gradient over ``m`` copies each transformed by the policy in attack mode.

    The gradient is taken w.r.t. the untransformed ``x_adv``, differentiating
    through the policy (and through ``transform`` applied before it).
    """
    if m < 1:
        raise DomainError("m must be >= 1")
    total, losses = torch.zeros_like(x_adv), []
    for i in range(m):
        def inner(z):
            base = transform(z) if transform is not None else z
            return apply_policy(policy, base, chunk_size, "attack", generator)

        grad, loss = loss_gradient(classifier, x_adv, targets, loss_kind, inner)
        if not torch.isfinite(grad).all():
            raise NumericError(f"non-finite gradient in AAIT copy {i}")
        total += grad
        losses.append(loss)
    return total / m, float(np.mean(losses))


def project_linf(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clip into ``[x - eps, x + eps] ∩ [0, 1]``, exact in real arithmetic despite float rounding."""
    x64 = x.detach().double()
    lo64, hi64 = x64 - epsilon, x64 + epsilon
    lo, hi = lo64.to(x.dtype), hi64.to(x.dtype)
    # round the bounds toward x so the cast never widens the ball
    lo = torch.where(lo.double() < lo64, torch.nextafter(lo, torch.full_like(lo, math.inf)), lo)
    hi = torch.where(hi.double() > hi64, torch.nextafter(hi, torch.full_like(hi, -math.inf)), hi)
    return torch.minimum(torch.maximum(x_adv, lo), hi).clamp(0.0, 1.0)


def run_attack(classifier: Callable, x: torch.Tensor, targets: torch.Tensor, config: AttackConfig,
               recipe: Recipe, true_labels: Optional[torch.Tensor] = None,
               generator: Optional[torch.Generator] = None,
               callback: Optional[Callable[[int, torch.Tensor], None]] = None) -> AttackResult:
    """Run ``config.iterations`` steps of the composed targeted attack.

    The transformed inputs only feed the gradient; the update is applied to
    the untransformed running adversary.  ``callback(t, x_adv)`` sees every
    iterate after projection.
    """
    if recipe.stage == "admix" and true_labels is None:
        raise ConfigurationError("Admix recipes need the true labels of the batch")
    if generator is None:
        generator = torch.Generator().manual_seed(int(config.seed))
    x = x.detach()
    x_adv = x.clone()
    g = torch.zeros_like(x)
    kernel = gaussian_kernel(config.ti_kernel_size, config.ti_sigma) if recipe.tim else None
    trace, zero_steps = [], 0

    for t in range(config.iterations):
        if recipe.dim:
            # one DIM draw per iteration, shared by every copy of the stage
            fire = float(torch.rand((), generator=generator)) < config.dim_probability
            draw = torch.Generator().manual_seed(int(torch.randint(2**62, (1,), generator=generator)))
            transform = (lambda z, d=draw.get_state(): _dim_replay(z, config.dim_max_size, d)) if fire else None
        else:
            transform = None

        if recipe.stage == "plain":
            grad, loss = loss_gradient(classifier, x_adv, targets, config.loss_kind, transform)
            _check_finite(grad, f"iteration {t}")
        elif recipe.stage == "sim":
            grad, loss = sim_gradient(classifier, x_adv, targets, config.sim_copies, config.loss_kind, transform)
        elif recipe.stage == "admix":
            grad, loss = admix_gradient(classifier, x_adv, targets, true_labels, config.admix_mixes,
                                        config.admix_weight, config.sim_copies, config.loss_kind, generator, transform)
        else:
            grad, loss = aait_gradient(classifier, recipe.policy, x_adv, targets, config.m, config.loss_kind,
                                       generator, transform, config.aait_chunk_size)

        if recipe.mi:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                g, n_zero = mi_accumulate(g, grad, config.decay)
            zero_steps += n_zero
        else:
            g = grad
        direction = g
        if kernel is not None:
            direction = ti_smooth(kernel, g)
            if config.ti_on_momentum:
                g = direction

        x_adv = project_linf(x_adv - config.alpha * direction.sign(), x, config.epsilon).detach()
        trace.append(loss)
        if callback is not None:
            callback(t, x_adv)

    return AttackResult(x_adv, trace, recipe.name, zero_steps)


def batch_generator(seed: int, index: int) -> torch.Generator:
    """Independent RNG stream for batch ``index`` of a run seeded with ``seed``."""
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + int(index)) % (2**63))


def attack_batches(classifier: Callable, x: torch.Tensor, targets: torch.Tensor, config: AttackConfig,
                   recipe: Recipe, true_labels: Optional[torch.Tensor] = None, batch_size: int = 64,
                   workers: int = 1, progress: Optional[Callable[[int, int], None]] = None) -> torch.Tensor:
    """Attack ``x`` in fixed batches, optionally on a thread pool.

    Each batch owns an RNG stream derived from ``config.seed`` and its index,
    so the output does not depend on ``workers``.
    """
    if len(x) == 0:
        return x.clone()
    starts = list(range(0, len(x), batch_size))

    def one(i):
        sl = slice(starts[i], starts[i] + batch_size)
        labels = true_labels[sl] if true_labels is not None else None
        res = run_attack(classifier, x[sl], targets[sl], config, recipe, labels, batch_generator(config.seed, i))
        if progress is not None:
            progress(i, len(starts))
        return res.adversarial

    if workers <= 1:
        parts = [one(i) for i in range(len(starts))]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, range(len(starts))))
    return torch.cat(parts)


def _dim_replay(images: torch.Tensor, max_size: int, state: torch.Tensor) -> torch.Tensor:
    """DIM resize-and-pad that always fires, drawing its geometry from a saved RNG state."""
    g = torch.Generator()
    g.set_state(state)
    return dim_transform(images, 1.0, max_size, g)


# ---------------------------------------------------------------------------
# export


def linf_distance(x_adv: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return (x_adv.double() - x.double()).abs().flatten(1).amax(dim=1)


def write_attack_csv(path, image_ids, targets, linf, success, success_float, fingerprint: str) -> None:
    """Per-image attack records; success is measured on the 8-bit rounded adversary."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "target_class", "linf", "success", "success_float", "fingerprint"])
        for image_id, t, d, s, sf in zip(image_ids, targets, linf, success, success_float):
            writer.writerow([image_id, int(t), f"{float(d):.8f}", int(bool(s)), int(bool(sf)), fingerprint])
