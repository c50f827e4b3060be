"""Desk-scale transfer experiment: surrogates, searched policies, attacks and reports.

Every stage is cached on disk under a directory keyed by the fingerprint of
the parameters it depends on, so an interrupted or repeated run only pays
for what is missing.  The default cache is ``$AAIT_CACHE_DIR`` or
``~/.cache/aait``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import torch

from .attacks import AttackConfig, Recipe, attack_batches
from .data import assign_targets, load_dataset, quantize
from .evaluation import (CORRELATION_STACKS, SuccessReport, correlation_experiment, correlation_to_csv,
                         evaluate_adversaries, plot_correlation, reports_to_csv, reports_to_markdown)
from .policy import Policy, load_policy, save_policy
from .runconfig import fingerprint
from .search import SearchConfig, mean_target_logit, run_search
from .surrogates import load_classifier, train_surrogate

logger = logging.getLogger(__name__)

TRANSFER_RECIPES = ("dtmi", "si-dtmi", "admix-dtmi", "aait-dtmi")


def default_cache_dir() -> Path:
    return Path(os.environ.get("AAIT_CACHE_DIR") or Path.home() / ".cache" / "aait")


@dataclass
class DeskConfig:
    dataset: str = "shapes10"
    data_seed: int = 0
    n_train: int = 8000
    n_test: int = 1000
    source: str = "resnet20"
    targets: tuple = ("vgg11", "mobilenet")
    train_epochs: int = 20
    train_seed: int = 1
    accuracy_floor: float = 70.0
    n_tasks: int = 256
    task_seed: int = 5
    search_images: int = 1024
    search_epochs: int = 20
    search_seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    attack_batch_size: int = 64
    correlation_tasks: int = 64
    correlation_iterations: int = 50

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)

    def data_key(self) -> dict:
        return {"dataset": self.dataset, "seed": self.data_seed, "n_train": self.n_train, "n_test": self.n_test}

    def model_key(self, arch: str) -> str:
        return fingerprint({"data": self.data_key(), "arch": arch, "epochs": self.train_epochs, "seed": self.train_seed})

    def task_key(self) -> dict:
        return {"data": self.data_key(), "n": self.n_tasks, "seed": self.task_seed}

    def search_config(self, vocabulary: str) -> SearchConfig:
        return SearchConfig(epochs=self.search_epochs, seed=self.search_seed, vocabulary=vocabulary)

    def fingerprint(self) -> str:
        return fingerprint(asdict(self))


@dataclass
class DeskResults:
    reports: list
    ablation: list
    search_logs: Dict[str, list]
    policy_logit: Dict[str, float]
    correlation: list = field(default_factory=list)
    fingerprint: str = ""

    def report(self, attack: str) -> SuccessReport:
        for r in self.reports + self.ablation:
            if r.attack == attack:
                return r
        raise KeyError(attack)


class DeskExperiment:
    def __init__(self, config: Optional[DeskConfig] = None, cache_dir=None, workers: int = 1):
        self.config = config or DeskConfig()
        self.cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.workers = workers
        self._data = None

    # -- data ---------------------------------------------------------------
    @property
    def data(self):
        if self._data is None:
            c = self.config
            self._data = load_dataset(c.dataset, seed=c.data_seed, n_train=c.n_train, n_test=c.n_test)
        return self._data

    def tasks(self):
        """First ``n_tasks`` test images with seeded random targets: ``(x, y, y_t)``."""
        c = self.config
        test = self.data[1]
        x, y = test.images[: c.n_tasks], test.labels[: c.n_tasks]
        t = assign_targets(y, int(test.labels.max()) + 1, torch.Generator().manual_seed(c.task_seed))
        return x, y, t

    # -- surrogates ---------------------------------------------------------
    def model(self, arch: str):
        c = self.config
        path = self.cache / "models" / f"{arch}-{c.model_key(arch)}.pt"
        if not path.is_file():
            train, test = self.data
            logger.info("training %s (%d epochs)", arch, c.train_epochs)
            train_surrogate(arch, train.images, train.labels, test.images, test.labels,
                            epochs=c.train_epochs, seed=c.train_seed, accuracy_floor=c.accuracy_floor,
                            checkpoint=path)
        model = load_classifier(path, arch)
        for p in model.parameters():
            p.requires_grad_(False)
        return model

    def models(self) -> dict:
        c = self.config
        return {name: self.model(name) for name in (c.source, *c.targets)}

    # -- policy search ------------------------------------------------------
    def _policy_path(self, vocabulary: str) -> Path:
        c = self.config
        key = fingerprint({"model": c.model_key(c.source), "search": self.search_config(vocabulary).meta(),
                           "vocabulary": vocabulary, "n": c.search_images, "data": c.data_key()})
        return self.cache / "policies" / f"{vocabulary}-{key}.json"

    def policy(self, vocabulary: str) -> Policy:
        c = self.config
        path = self._policy_path(vocabulary)
        if not path.is_file():
            train = self.data[0]
            x, y = train.images[: c.search_images], train.labels[: c.search_images]
            t = assign_targets(y, int(train.labels.max()) + 1, torch.Generator().manual_seed(c.search_seed))
            path.parent.mkdir(parents=True, exist_ok=True)
            result = run_search(x, t, self.model(c.source), self.search_config(vocabulary),
                                log_path=path.with_suffix(".log.csv"), fingerprint=path.stem.split("-")[-1])
            save_policy(result.policy, path)
        return load_policy(path)

    def search_config(self, vocabulary: str) -> SearchConfig:
        return self.config.search_config(vocabulary)

    def search_log(self, vocabulary: str) -> list:
        self.policy(vocabulary)
        with open(self._policy_path(vocabulary).with_suffix(".log.csv"), newline="") as fh:
            return [{k: (v if k == "fingerprint" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]

    # -- attacks ------------------------------------------------------------
    def recipe(self, name: str, vocabulary: str = "affine") -> Recipe:
        policy = self.policy(vocabulary) if "aait" in name else None
        return Recipe.parse(name, policy)

    def adversaries(self, name: str, vocabulary: str = "affine") -> torch.Tensor:
        """Quantized adversaries of the task set for one recipe (cached)."""
        c = self.config
        recipe = self.recipe(name, vocabulary)
        policy_key = fingerprint(recipe.policy) if recipe.policy is not None else None
        key = fingerprint({"model": c.model_key(c.source), "tasks": c.task_key(), "attack": c.attack.as_dict(),
                           "recipe": name, "policy": policy_key, "batch": c.attack_batch_size})
        path = self.cache / "adversaries" / f"{name}-{vocabulary if policy_key else 'none'}-{key}.pt"
        if path.is_file():
            return torch.load(path, weights_only=True).float() / 255.0
        x, y, t = self.tasks()
        start = time.time()
        adv = attack_batches(self.model(c.source), x, t, c.attack, recipe, y, c.attack_batch_size, self.workers,
                             progress=lambda i, n: logger.info("%s batch %d/%d", name, i + 1, n))
        logger.info("%s done in %.0fs", name, time.time() - start)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(torch.round(adv.clamp(0, 1) * 255).to(torch.uint8), path)
        return quantize(adv)

    # -- full pipeline ------------------------------------------------------
    def run(self, recipes=TRANSFER_RECIPES, ablation: bool = True, correlation: bool = False) -> DeskResults:
        c = self.config
        fp = c.fingerprint()
        models = self.models()
        x, y, t = self.tasks()
        reports = [evaluate_adversaries(self.adversaries(name), t, models, c.source, Recipe.parse(
            name, self.policy("affine") if "aait" in name else None).name, fp) for name in recipes]

        ablation_reports = []
        if ablation:
            base = next((r for r in reports if r.attack == "DTMI"), None)
            if base is None:
                base = evaluate_adversaries(self.adversaries("dtmi"), t, models, c.source, "DTMI", fp)
            affine = evaluate_adversaries(self.adversaries("aait-dtmi", "affine"), t, models, c.source, "DTMI-Affine", fp)
            color = evaluate_adversaries(self.adversaries("aait-dtmi", "color"), t, models, c.source, "DTMI-Color", fp)
            ablation_reports = [SuccessReport(base.source_model, "DTMI", base.rows, base.n_images, fp, base.white_box),
                                affine, color]

        logs = {v: self.search_log(v) for v in ("affine",) + (("color",) if ablation else ())}
        source = models[c.source]
        train = self.data[0]
        sx, sy = train.images[: c.search_images], train.labels[: c.search_images]
        st = assign_targets(sy, int(train.labels.max()) + 1, torch.Generator().manual_seed(c.search_seed))
        policy_logit = {
            "identity": mean_target_logit(source, sx, st),
            "policy": mean_target_logit(source, sx, st, self.policy("affine"), draws=4,
                                        generator=torch.Generator().manual_seed(c.search_seed)),
        }

        corr = []
        if correlation:
            n = c.correlation_tasks
            cfg = AttackConfig(**{**c.attack.as_dict(), "iterations": c.correlation_iterations})
            corr = correlation_experiment(source, x[:n], y[:n], t[:n], CORRELATION_STACKS, cfg)
        return DeskResults(reports, ablation_reports, logs, policy_logit, corr, fp)


def write_results(results: DeskResults, out_dir) -> list:
    """Write CSV/Markdown reports (and the correlation table/plot) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    (out / "transfer.csv").write_text(reports_to_csv(results.reports))
    md = reports_to_markdown(results.reports, "Targeted transfer success (%)")
    if results.ablation:
        (out / "ablation.csv").write_text(reports_to_csv(results.ablation))
        md += "\n" + reports_to_markdown(results.ablation, "Affine vs colour search space (%)")
    (out / "report.md").write_text(md)
    written += [out / "transfer.csv", out / "report.md"]
    if results.correlation:
        (out / "correlation.csv").write_text(correlation_to_csv(results.correlation, results.fingerprint))
        plot_correlation(results.correlation, out / "correlation.png", results.fingerprint)
        written += [out / "correlation.csv", out / "correlation.png"]
    (out / "search_logs.json").write_text(json.dumps({"fingerprint": results.fingerprint, **results.search_logs},
                                                     indent=1))
    return written
