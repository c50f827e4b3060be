"""Targeted success measurement, report tables and the logit correlation study."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import torch

from .attacks import AttackConfig, Recipe, admix_partners, dim_transform, run_attack
from .data import load_imagenet_compatible, quantize  # noqa: F401  (re-exported)
from .errors import ConfigurationError
from .policy import Policy
from .surrogates import predict


def targeted_success_rate(classifier: Callable, adversaries: torch.Tensor, targets: torch.Tensor,
                          batch_size: int = 500) -> float:
    """Percentage of adversaries whose argmax prediction equals the target label."""
    if len(targets) == 0:
        return 0.0
    pred = predict(classifier, adversaries, batch_size).argmax(dim=1)
    return 100.0 * float((pred == targets).sum()) / len(targets)


@dataclass
class SuccessReport:
    """Targeted success rates (%) of one attack from one source against several models.

    ``average`` is taken over every listed model, source included (the
    conventional "Avg." arithmetic); ``blackbox_average`` leaves the
    white-box column out.
    """

    source_model: str
    attack: str
    rows: Dict[str, float]
    n_images: int
    fingerprint: str = ""
    white_box: Optional[str] = None

    def __post_init__(self):
        for name, rate in self.rows.items():
            if not 0.0 <= rate <= 100.0:
                raise ValueError(f"success rate for {name} outside [0, 100]: {rate}")

    @property
    def average(self) -> float:
        return sum(self.rows.values()) / len(self.rows) if self.rows else 0.0

    @property
    def blackbox_rows(self) -> Dict[str, float]:
        return {k: v for k, v in self.rows.items() if k != self.white_box}

    @property
    def blackbox_average(self) -> float:
        rows = self.blackbox_rows
        return sum(rows.values()) / len(rows) if rows else 0.0

    @property
    def white_box_rate(self) -> Optional[float]:
        return self.rows.get(self.white_box) if self.white_box else None


def evaluate_adversaries(adversaries: torch.Tensor, targets: torch.Tensor, models: Dict[str, Callable],
                         source_model: str, attack: str, fingerprint: str = "") -> SuccessReport:
    rows = {name: targeted_success_rate(model, adversaries, targets) for name, model in models.items()}
    white = source_model if source_model in models else None
    return SuccessReport(source_model, attack, rows, len(targets), fingerprint, white)


def _columns(reports: Sequence[SuccessReport]):
    names = []
    for report in reports:
        for name in report.rows:
            if name not in names:
                names.append(name)
    return names


def reports_to_csv(reports: Sequence[SuccessReport]) -> str:
    names = _columns(reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source", "attack", *names, "avg_all", "avg_blackbox", "n_images", "fingerprint"])
    for r in reports:
        writer.writerow([r.source_model, r.attack, *(f"{r.rows[n]:.2f}" if n in r.rows else "" for n in names),
                         f"{r.average:.2f}", f"{r.blackbox_average:.2f}", r.n_images, r.fingerprint])
    return buf.getvalue()


def reports_to_markdown(reports: Sequence[SuccessReport], title: str = "") -> str:
    names = _columns(reports)
    lines = []
    if title:
        lines += [f"### {title}", ""]
    header = ["Attack", *(f"{n} (white-box)" if reports and n == reports[0].white_box else n for n in names),
              "Avg.", "Avg. black-box"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for r in reports:
        cells = [r.attack, *(f"{r.rows[n]:.1f}" if n in r.rows else "-" for n in names),
                 f"{r.average:.2f}", f"{r.blackbox_average:.2f}"]
        lines.append("| " + " | ".join(cells) + " |")
    if reports:
        lines += ["", f"Source: {reports[0].source_model}; images: {reports[0].n_images}; "
                      f"fingerprint: {reports[0].fingerprint}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# correlation between transformation diversity and target logit

CORRELATION_STACKS = ("identity", "SIM", "SI-DIM", "Admix-SI-DIM")


def stack_recipe(name: str) -> Recipe:
    recipes = {
        "identity": Recipe(),
        "SIM": Recipe(stage="sim"),
        "DIM": Recipe(dim=True),
        "SI-DIM": Recipe(dim=True, stage="sim"),
        "Admix-SI-DIM": Recipe(dim=True, stage="admix"),
    }
    if name not in recipes:
        raise ConfigurationError(f"unknown transform stack {name!r}; known: {sorted(recipes)}")
    return recipes[name]


def stack_views(name: str, images: torch.Tensor, true_labels: torch.Tensor, config: AttackConfig,
                generator: torch.Generator):
    """The transformed copies an attack with this stack would feed the classifier."""
    recipe = stack_recipe(name)
    base = dim_transform(images, config.dim_probability, config.dim_max_size, generator) if recipe.dim else images
    if recipe.stage == "plain":
        return [base]
    scales = [1.0 / 2**i for i in range(config.sim_copies)]
    if recipe.stage == "sim":
        return [base * s for s in scales]
    views = []
    for _ in range(config.admix_mixes):
        mate = base[admix_partners(true_labels, generator)]
        views += [(base + config.admix_weight * mate) * s for s in scales]
    return views


@dataclass
class CorrelationRow:
    stack: str
    mean_target_logit: float
    mean_target_probability: float
    logits: torch.Tensor = field(repr=False, default=None)  # per-image mean logits over views


@torch.no_grad()
def transformed_logits(classifier: Callable, name: str, images: torch.Tensor, true_labels: torch.Tensor,
                       config: AttackConfig, generator: torch.Generator, draws: int = 4) -> torch.Tensor:
    """Per-image logits averaged over ``draws`` rounds of the stack's transformed views."""
    total, count = None, 0
    for _ in range(draws if name != "identity" else 1):
        for view in stack_views(name, images, true_labels, config, generator):
            logits = predict(classifier, view)
            total = logits if total is None else total + logits
            count += 1
    return total / count


def correlation_experiment(classifier: Callable, images: torch.Tensor, true_labels: torch.Tensor,
                           targets: torch.Tensor, stacks: Sequence[str] = CORRELATION_STACKS,
                           config: Optional[AttackConfig] = None, eval_classifier: Optional[Callable] = None,
                           craft: bool = True, draws: int = 4) -> list:
    """Mean target logit / probability of each stack's transformed adversaries.

    For every stack, adversaries are crafted on ``classifier`` with that
    stack's recipe (``craft=False`` skips crafting and measures the clean
    images), then passed through the same transforms and scored by
    ``eval_classifier`` (default: ``classifier``).
    """
    config = config or AttackConfig()
    scorer = eval_classifier or classifier
    rows = []
    for name in stacks:
        recipe = stack_recipe(name)
        g = torch.Generator().manual_seed(int(config.seed))
        adv = images
        if craft:
            adv = run_attack(classifier, images, targets, config, recipe, true_labels=true_labels, generator=g).adversarial
            adv = quantize(adv)
        logits = transformed_logits(scorer, name, adv, true_labels, config, g, draws)
        probs = torch.softmax(logits, dim=1)
        t = targets.view(-1, 1)
        rows.append(CorrelationRow(name, float(logits.gather(1, t).mean()), float(probs.gather(1, t).mean()), logits))
    return rows


def correlation_to_csv(rows: Sequence[CorrelationRow], fingerprint: str = "") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stack", "mean_target_logit", "mean_target_probability", "fingerprint"])
    for r in rows:
        writer.writerow([r.stack, f"{r.mean_target_logit:.6f}", f"{r.mean_target_probability:.6f}", fingerprint])
    return buf.getvalue()


def plot_correlation(rows: Sequence[CorrelationRow], path, fingerprint: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r.stack for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].bar(names, [r.mean_target_logit for r in rows], color="tab:blue")
    axes[0].set_ylabel("mean target logit")
    axes[1].bar(names, [r.mean_target_probability for r in rows], color="tab:orange")
    axes[1].set_ylabel("mean target probability")
    for ax in axes:
        ax.tick_params(axis="x", rotation=20)
    if fingerprint:
        fig.suptitle(f"config {fingerprint}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": f"fingerprint={fingerprint}"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# affine vs colour search space


def affine_vs_color_ablation(source: Callable, models: Dict[str, Callable], images: torch.Tensor,
                             true_labels: torch.Tensor, targets: torch.Tensor,
                             affine_policy: Optional[Policy], color_policy: Optional[Policy],
                             config: Optional[AttackConfig] = None, source_name: str = "source",
                             fingerprint: str = "") -> list:
    """Success of DTMI, DTMI with the affine policy and DTMI with the colour policy."""
    if affine_policy is None or color_policy is None:
        raise ConfigurationError("ablation needs both an affine and a colour policy")
    config = config or AttackConfig()
    plan = [
        ("DTMI", Recipe(dim=True, tim=True, mi=True)),
        ("DTMI-Affine", Recipe(dim=True, tim=True, mi=True, stage="aait", policy=affine_policy)),
        ("DTMI-Color", Recipe(dim=True, tim=True, mi=True, stage="aait", policy=color_policy)),
    ]
    reports = []
    for name, recipe in plan:
        g = torch.Generator().manual_seed(int(config.seed))
        adv = run_attack(source, images, targets, config, recipe, true_labels=true_labels, generator=g).adversarial
        reports.append(evaluate_adversaries(quantize(adv), targets, models, source_name, name, fingerprint))
    return reports
