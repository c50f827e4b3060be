"""Gradient-based policy search.

Each step splits a batch of clean images (with target labels) into halves
``A`` and ``B``, transforms ``A`` with a randomly drawn sub-policy in search
mode, and updates the policy's probabilities and magnitudes with Adam to
minimize ``d + eta * l``: ``d`` is a WGAN-GP critic's Wasserstein estimate
between transformed ``A`` and clean ``B``, ``l`` the targeted classification
loss on both halves.  The critic is updated adversarially on the same batch.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch import nn

from .errors import DomainError, InvalidBatchError, SearchDivergedError
from .losses import LossKind, targeted_loss
from .policy import Policy, PolicyParameters, Vocabulary, apply_policy

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "d", "l", "objective", "wallclock_s")


@dataclass
class SearchConfig:
    eta: float = 0.3
    epochs: int = 20
    temperature: float = 0.05
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.0, 0.999)
    chunk_size: int = 8
    gp_coefficient: float = 10.0
    batch_size: int = 32
    loss_kind: LossKind = LossKind.LOGIT
    seed: int = 0
    L: int = 10
    K: int = 2
    vocabulary: Vocabulary = Vocabulary.AFFINE
    critic_learning_rate: float = 1e-3
    critic_width: int = 32
    init_probability: float = 0.5
    # critic-only steps on the initial policy before the policy moves, so the
    # first logged d is already a Wasserstein estimate rather than ~0
    critic_warmup_steps: int = 200

    def __post_init__(self):
        self.loss_kind = LossKind.parse(self.loss_kind)
        self.vocabulary = Vocabulary.parse(self.vocabulary)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise DomainError(f"eta (η) must be a finite non-negative number, got {self.eta}")
        if self.epochs < 0:
            raise DomainError("epochs must be non-negative")
        if not self.temperature > 0:
            raise DomainError("temperature must be positive")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if self.chunk_size < 1:
            raise DomainError("chunk_size must be >= 1")
        if self.batch_size < 2:
            raise DomainError("batch_size must be >= 2")
        if self.critic_warmup_steps < 0:
            raise DomainError("critic_warmup_steps must be non-negative")
        if self.L < 1 or self.K < 1:
            raise DomainError("L and K must be >= 1")

    def meta(self) -> dict:
        return {
            "η": self.eta,
            "epochs": self.epochs,
            "temperature": self.temperature,
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "adam_betas": list(self.adam_betas),
            "chunk_size": self.chunk_size,
            "gp_coefficient": self.gp_coefficient,
            "batch_size": self.batch_size,
            "loss_kind": self.loss_kind.value,
            "critic_warmup_steps": self.critic_warmup_steps,
        }


class Critic(nn.Module):
    """Three stride-2 conv blocks, global average pooling and a scalar head."""

    def __init__(self, in_channels: int = 3, width: int = 32, zero_head: bool = True):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(4 * width, 1)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3))).squeeze(1)


def split_indices(n: int, generator: Optional[torch.Generator] = None):
    if n < 2:
        raise InvalidBatchError(f"need at least 2 images to split, got {n}")
    perm = torch.randperm(n, generator=generator)
    half = (n + 1) // 2
    return perm[:half], perm[half:]


def split_batch(batch: torch.Tensor, generator: Optional[torch.Generator] = None):
    """Random disjoint halves of ``batch`` (sizes differ by at most one)."""
    ia, ib = split_indices(len(batch), generator)
    return batch[ia], batch[ib]


def critic_distance(critic: Callable, transformed: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """Wasserstein estimate: mean critic score on ``transformed`` minus on ``clean``."""
    if len(transformed) == 0 or len(clean) == 0:
        raise InvalidBatchError("critic_distance needs non-empty batches")
    if transformed.shape[1:] != clean.shape[1:]:
        raise InvalidBatchError(f"shape mismatch {tuple(transformed.shape)} vs {tuple(clean.shape)}")
    return critic(transformed).mean() - critic(clean).mean()


def gradient_penalty(critic: Callable, a: torch.Tensor, b: torch.Tensor, generator: Optional[torch.Generator] = None):
    """Mean ``(||grad critic(x_hat)||_2 - 1)^2`` on random interpolates of ``a`` and ``b``."""
    n = min(len(a), len(b))
    eps = torch.rand(n, 1, 1, 1, generator=generator, dtype=a.dtype)
    interp = (eps * a[:n].detach() + (1 - eps) * b[:n].detach()).requires_grad_(True)
    (grad,) = torch.autograd.grad(critic(interp).sum(), interp, create_graph=True)
    return ((grad.flatten(1).norm(dim=1) - 1.0) ** 2).mean()


def critic_step(critic: nn.Module, optimizer, transformed: torch.Tensor, clean: torch.Tensor,
                gp_coefficient: float = 10.0, generator: Optional[torch.Generator] = None) -> float:
    """One ascent step on ``d - gp_coefficient * penalty``; returns ``d`` before the step."""
    optimizer.zero_grad(set_to_none=True)
    d = critic_distance(critic, transformed.detach(), clean)
    loss = -d + gp_coefficient * gradient_penalty(critic, transformed, clean, generator)
    loss.backward()
    optimizer.step()
    return float(d.detach())


def classification_loss(classifier: Callable, transformed: torch.Tensor, targets_a: torch.Tensor,
                        clean: torch.Tensor, targets_b: torch.Tensor, loss_kind=LossKind.LOGIT) -> torch.Tensor:
    """Targeted loss on the transformed half plus the same loss on the clean half.

    Only the first term depends on the policy; the second is kept for the
    objective's value and has no gradient w.r.t. policy parameters.
    """
    return (targeted_loss(classifier(transformed), targets_a, loss_kind)
            + targeted_loss(classifier(clean), targets_b, loss_kind))


@dataclass
class SearchState:
    policy: PolicyParameters
    critic: Critic
    step: int = 0
    last_d: float = 0.0
    last_l: float = 0.0

    def snapshot(self) -> dict:
        return {
            "step": self.step,
            "last_d": self.last_d,
            "last_l": self.last_l,
            "probability": self.policy.probability.detach().tolist(),
            "magnitude": self.policy.magnitude.detach().tolist(),
            "kinds": [[k.value for k in row] for row in self.policy.kinds],
        }


@dataclass
class SearchResult:
    policy: Policy
    log: list = field(default_factory=list)
    state: Optional[SearchState] = None


class _Frozen:
    """Temporarily disable parameter gradients of a module."""

    def __init__(self, module):
        self.module = module
        self.saved = []

    def __enter__(self):
        params = list(self.module.parameters()) if isinstance(self.module, nn.Module) else []
        self.saved = [(p, p.requires_grad) for p in params]
        for p, _ in self.saved:
            p.requires_grad_(False)
        if isinstance(self.module, nn.Module):
            self.was_training = self.module.training
            self.module.eval()
        return self.module

    def __exit__(self, *exc):
        for p, flag in self.saved:
            p.requires_grad_(flag)
        if isinstance(self.module, nn.Module) and self.was_training:
            self.module.train()
        return False


def run_search(images: torch.Tensor, targets: torch.Tensor, classifier: Callable, config: SearchConfig,
               log_path=None, fingerprint: str = "", initial: Optional[PolicyParameters] = None) -> SearchResult:
    """Optimize a policy on clean ``images`` with their ``targets``.

    Returns the final policy together with one log record per epoch holding
    the epoch means of ``d``, ``l`` and ``d + eta * l``.
    """
    if len(images) < 2:
        raise InvalidBatchError("search needs at least two images")
    g = torch.Generator().manual_seed(int(config.seed))
    params = initial if initial is not None else PolicyParameters.initialize(
        config.L, config.K, config.vocabulary, config.seed, config.init_probability)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(config.seed))
        critic = Critic(images.shape[1], config.critic_width)
    opt_policy = torch.optim.Adam(params.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    opt_critic = torch.optim.Adam(critic.parameters(), lr=config.critic_learning_rate, betas=config.adam_betas)
    state = SearchState(params, critic)
    log = []
    start = time.time()
    writer = None
    fh = open(log_path, "w", newline="") if log_path is not None else None
    try:
        if fh is not None:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS + ("fingerprint",))
        with _Frozen(classifier):
            _warm_up_critic(params, critic, opt_critic, images, config, g)
            for epoch in range(1, config.epochs + 1):
                sums = {"d": 0.0, "l": 0.0, "objective": 0.0}
                steps = 0
                order = torch.randperm(len(images), generator=g)
                for batch_idx in order.split(config.batch_size):
                    if len(batch_idx) < 2:
                        continue
                    ia, ib = split_indices(len(batch_idx), g)
                    a, b = images[batch_idx[ia]], images[batch_idx[ib]]
                    ta, tb = targets[batch_idx[ia]], targets[batch_idx[ib]]

                    a_prime = apply_policy(params, a, config.chunk_size, "search", g, config.temperature)
                    critic_step(critic, opt_critic, a_prime, b, config.gp_coefficient, g)

                    opt_policy.zero_grad(set_to_none=True)
                    d = critic_distance(critic, a_prime, b)
                    l = classification_loss(classifier, a_prime, ta, b, tb, config.loss_kind)
                    objective = d + config.eta * l
                    state.step += 1
                    state.last_d, state.last_l = float(d.detach()), float(l.detach())
                    if not math.isfinite(float(objective.detach())):
                        raise SearchDivergedError(
                            f"non-finite objective at epoch {epoch}, step {state.step}", state.snapshot())
                    objective.backward()
                    opt_policy.step()
                    params.clamp_()
                    critic.zero_grad(set_to_none=True)

                    sums["d"] += state.last_d
                    sums["l"] += state.last_l
                    sums["objective"] += float(objective.detach())
                    steps += 1
                record = {"epoch": epoch, **{k: v / max(1, steps) for k, v in sums.items()},
                          "wallclock_s": time.time() - start}
                log.append(record)
                logger.info("search epoch %d d=%.4f l=%.4f obj=%.4f", epoch, record["d"], record["l"], record["objective"])
                if writer is not None:
                    writer.writerow([epoch, f"{record['d']:.8g}", f"{record['l']:.8g}",
                                     f"{record['objective']:.8g}", f"{record['wallclock_s']:.3f}", fingerprint])
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()

    meta = config.meta()
    if fingerprint:
        meta["fingerprint"] = fingerprint
    return SearchResult(params.to_policy(meta), log, state)


def _warm_up_critic(params, critic, optimizer, images, config: SearchConfig, g: torch.Generator) -> None:
    steps = 0
    while steps < config.critic_warmup_steps:
        order = torch.randperm(len(images), generator=g)
        for batch_idx in order.split(config.batch_size):
            if steps >= config.critic_warmup_steps:
                break
            if len(batch_idx) < 2:
                continue
            ia, ib = split_indices(len(batch_idx), g)
            with torch.no_grad():
                a_prime = apply_policy(params, images[batch_idx[ia]], config.chunk_size, "search", g,
                                       config.temperature)
            critic_step(critic, optimizer, a_prime, images[batch_idx[ib]], config.gp_coefficient, g)
            steps += 1


@torch.no_grad()
def mean_target_logit(classifier: Callable, images: torch.Tensor, targets: torch.Tensor, policy=None,
                      draws: int = 1, chunk_size: Optional[int] = 8, generator: Optional[torch.Generator] = None,
                      batch_size: int = 256) -> float:
    """Mean target-class logit of ``images``, optionally after the policy in attack mode."""
    total, count = 0.0, 0
    for _ in range(max(1, draws) if policy is not None else 1):
        for x, t in zip(images.split(batch_size), targets.split(batch_size)):
            inp = apply_policy(policy, x, chunk_size, "attack", generator) if policy is not None else x
            logits = classifier(inp)
            total += float(logits.gather(1, t.view(-1, 1)).sum())
            count += len(t)
    return total / max(1, count)
