"""Command-line front end: ``aait <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.  Flags can
also come from a ``key = value`` file given with ``--config`` (explicit flags
win), and ``AAIT_SEED`` is the seed fallback.  Every artifact a command
writes carries the fingerprint of the resolved parameters.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch

from . import __version__
from .attacks import AttackConfig, Recipe, attack_batches, linf_distance, write_attack_csv
from .data import (MANIFEST_COLUMNS, assign_targets, load_dataset, load_imagenet_compatible, quantize, save_png,
                   tasks_to_batch, write_task_set)
from .errors import (AAITError, CheckpointError, ConfigurationError, InvalidBatchError, InvalidOperationError,
                     InvalidPolicyError, NumericError, PolicyParseError, TrainingFailure)
from .evaluation import (CORRELATION_STACKS, SuccessReport, correlation_experiment, correlation_to_csv,
                         evaluate_adversaries, plot_correlation, reports_to_csv, reports_to_markdown,
                         targeted_success_rate)
from .experiment import DeskConfig, DeskExperiment, TRANSFER_RECIPES, write_results
from .policy import load_policy, save_policy
from .runconfig import fingerprint, load_config_file, resolve_seed
from .search import SearchConfig, run_search
from .surrogates import ARCHITECTURES, load_classifier, predict, save_checkpoint, train_surrogate

logger = logging.getLogger("aait")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CONFIG_ERRORS = (ConfigurationError, CheckpointError, InvalidPolicyError, PolicyParseError, InvalidOperationError,
                 InvalidBatchError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(f"{self.prog}: {message}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _bool(text):
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text}")


def _common(p):
    p.add_argument("--config", help="key = value file supplying defaults for any flag")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (fallback: AAIT_SEED, then 0)")
    p.add_argument("--workers", type=_positive_int, default=1, help="parallel attack batches / evaluated models")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(p):
    d = AttackConfig()
    p.add_argument("--epsilon", type=float, default=d.epsilon, help="L-inf budget in [0,1] pixel units")
    p.add_argument("--alpha", type=float, default=d.alpha, help="step size")
    p.add_argument("--iters", type=int, default=d.iterations, help="iterations T")
    p.add_argument("--decay", type=float, default=d.decay, help="momentum decay")
    p.add_argument("--m", type=int, default=d.m, help="policy-transformed copies per iteration")
    p.add_argument("--dim-probability", type=float, default=d.dim_probability)
    p.add_argument("--dim-max-size", type=int, default=d.dim_max_size)
    p.add_argument("--ti-kernel-size", type=int, default=d.ti_kernel_size)
    p.add_argument("--ti-sigma", type=float, default=d.ti_sigma)
    p.add_argument("--sim-copies", type=int, default=d.sim_copies)
    p.add_argument("--admix-mixes", type=int, default=d.admix_mixes)
    p.add_argument("--admix-weight", type=float, default=d.admix_weight)
    p.add_argument("--loss", default=d.loss_kind.value, help="logit or cross_entropy")
    p.add_argument("--batch-size", type=_positive_int, default=64, help="images per attack batch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aait", description="Searched-augmentation targeted transfer attacks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-dataset", help="write a task set (PNGs + manifest) from a dataset split")
    _common(p)
    p.add_argument("--dataset", default="shapes10", help="shapes10 or cifar10")
    p.add_argument("--data-root", default=None)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--n-train", type=_positive_int, default=8000, help="shapes10 train split size")
    p.add_argument("--n-test", type=_positive_int, default=1000, help="shapes10 test split size")
    p.add_argument("--data-seed", type=int, default=0, help="shapes10 generation seed (--seed picks targets)")
    p.add_argument("--n", type=_positive_int, default=256)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a surrogate classifier and write a checkpoint")
    _common(p)
    p.add_argument("--arch", default="resnet20", choices=sorted(ARCHITECTURES))
    p.add_argument("--dataset", default="shapes10")
    p.add_argument("--data-root", default=None)
    p.add_argument("--n-train", type=_positive_int, default=8000)
    p.add_argument("--n-test", type=_positive_int, default=1000)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--accuracy-floor", type=float, default=70.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", help="search an augmentation policy on a surrogate")
    _common(p)
    s = SearchConfig()
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", default=None, help="manifest of search images (default: dataset train split)")
    p.add_argument("--images-dir", default=None)
    p.add_argument("--dataset", default="shapes10")
    p.add_argument("--data-root", default=None)
    p.add_argument("--n-images", type=_positive_int, default=1024)
    p.add_argument("--vocabulary", default=s.vocabulary.value, help="affine, color or full")
    p.add_argument("--eta", type=float, default=s.eta, help="weight of the classification loss (η)")
    p.add_argument("--epochs", type=int, default=s.epochs)
    p.add_argument("--L", type=int, default=s.L, help="sub-policies")
    p.add_argument("--K", type=int, default=s.K, help="operations per sub-policy")
    p.add_argument("--temperature", type=float, default=s.temperature)
    p.add_argument("--lr", type=float, default=s.learning_rate)
    p.add_argument("--batch-size", type=_positive_int, default=s.batch_size)
    p.add_argument("--chunk-size", type=int, default=s.chunk_size)
    p.add_argument("--loss", default=s.loss_kind.value)
    p.add_argument("--out", required=True, help="policy file to write")
    p.add_argument("--log", default=None, help="epoch log CSV (default: <out>.log.csv)")

    p = sub.add_parser("attack", help="craft adversarial PNGs for a task manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True, help="manifest CSV (ImageId, TrueLabel, TargetClass)")
    p.add_argument("--images-dir", default=None)
    p.add_argument("--recipe", default="dtmi", help="dtmi, si-dtmi, admix-dtmi, aait-dtmi or a comma list")
    p.add_argument("--policy", default=None, help="policy file (AAIT recipes)")
    _attack_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="targeted success of saved adversaries on target models")
    _common(p)
    p.add_argument("--adversaries", required=True, help="directory written by `attack`")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--source", default=None, help="name of the white-box model, if among the checkpoints")
    p.add_argument("--out", required=True)

    p = sub.add_parser("correlate", help="target logit/probability per transform stack")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-checkpoint", default=None, help="model that scores the adversaries (default: source)")
    p.add_argument("--tasks", required=True)
    p.add_argument("--images-dir", default=None)
    p.add_argument("--stacks", default=",".join(CORRELATION_STACKS))
    p.add_argument("--draws", type=_positive_int, default=4)
    _attack_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("desk", help="full desk-scale pipeline with on-disk caching")
    _common(p)
    p.add_argument("--cache", default=None, help="cache directory (default: AAIT_CACHE_DIR or ~/.cache/aait)")
    p.add_argument("--n-tasks", type=_positive_int, default=256)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--train-epochs", type=int, default=20)
    p.add_argument("--search-epochs", type=int, default=20)
    p.add_argument("--ablation", type=_bool, default=True)
    p.add_argument("--correlation", type=_bool, default=False)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from ``--config`` (explicit flags still win)."""
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise ConfigurationError("no command given")
    if not getattr(args, "config", None):
        return args, {}
    values = load_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    unknown = sorted(k for k in values if k not in known or k in ("config", "help"))
    if unknown:
        raise ConfigurationError(f"{args.config}: unknown keys {unknown}")
    defaults = {}
    for key, raw in values.items():
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _bool(raw)
        elif action.nargs in ("+", "*"):
            defaults[key] = raw.split()
        else:
            defaults[key] = raw  # argparse converts string defaults through ``type``
    sub.set_defaults(**defaults)
    return parser.parse_args(argv), values


def _attack_config(args, seed) -> AttackConfig:
    return AttackConfig(epsilon=args.epsilon, alpha=args.alpha, iterations=args.iters, decay=args.decay, m=args.m,
                        dim_probability=args.dim_probability, dim_max_size=args.dim_max_size,
                        ti_kernel_size=args.ti_kernel_size, ti_sigma=args.ti_sigma, sim_copies=args.sim_copies,
                        admix_mixes=args.admix_mixes, admix_weight=args.admix_weight, loss_kind=args.loss, seed=seed)


def _load_tasks(manifest, images_dir, classifier):
    tasks = load_imagenet_compatible(manifest, images_dir, side=classifier.input_side,
                                     num_classes=classifier.num_classes)
    if not tasks:
        raise ConfigurationError(f"{manifest}: no tasks")
    return tasks_to_batch(tasks)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=1, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_make_dataset(args, seed):
    train, test = load_dataset(args.dataset, args.data_root, seed=args.data_seed, n_train=args.n_train,
                               n_test=args.n_test)
    split = test if args.split == "test" else train
    n = min(args.n, len(split.labels))
    images, labels = split.images[:n], split.labels[:n]
    targets = assign_targets(labels, int(split.labels.max()) + 1, torch.Generator().manual_seed(seed))
    fp = fingerprint({"command": "make-dataset", "dataset": args.dataset, "split": args.split, "n": n, "seed": seed,
                      "data_seed": args.data_seed, "n_train": args.n_train, "n_test": args.n_test})
    manifest = write_task_set(args.out, images, labels, targets, metadata={"fingerprint": fp})
    _write_json(Path(args.out) / "run.json", {"command": "make-dataset", "fingerprint": fp, "n": n, "seed": seed})
    print(f"wrote {n} tasks to {manifest} (fingerprint {fp})")


def cmd_train(args, seed):
    train, test = load_dataset(args.dataset, args.data_root, seed=0, n_train=args.n_train, n_test=args.n_test)
    fp = fingerprint({"command": "train", "arch": args.arch, "dataset": args.dataset, "epochs": args.epochs,
                      "seed": seed, "n_train": args.n_train, "n_test": args.n_test})
    model, acc = train_surrogate(args.arch, train.images, train.labels, test.images, test.labels, epochs=args.epochs,
                                 seed=seed, accuracy_floor=args.accuracy_floor, checkpoint=None)
    save_checkpoint(model, args.out, seed=seed, test_accuracy=acc, fingerprint=fp, dataset=args.dataset)
    print(f"{args.arch}: test accuracy {acc:.2f}% -> {args.out} (fingerprint {fp})")


def cmd_search(args, seed):
    config = SearchConfig(eta=args.eta, epochs=args.epochs, temperature=args.temperature, learning_rate=args.lr,
                          chunk_size=args.chunk_size, batch_size=args.batch_size, loss_kind=args.loss, seed=seed,
                          L=args.L, K=args.K, vocabulary=args.vocabulary)
    classifier = load_classifier(args.checkpoint)
    if args.tasks:
        _, images, _, targets = _load_tasks(args.tasks, args.images_dir, classifier)
    else:
        train, _ = load_dataset(args.dataset, args.data_root, seed=0, n_train=8000, n_test=1000)
        images, labels = train.images[: args.n_images], train.labels[: args.n_images]
        targets = assign_targets(labels, classifier.num_classes, torch.Generator().manual_seed(seed))
    fp = fingerprint({"command": "search", "search": config.meta(), "vocabulary": config.vocabulary.value,
                      "L": config.L, "K": config.K, "checkpoint": Path(args.checkpoint).name, "tasks": args.tasks,
                      "n_images": len(images)})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    result = run_search(images, targets, classifier, config, log_path=log_path, fingerprint=fp)
    save_policy(result.policy, out)
    last = result.log[-1] if result.log else {}
    print(f"policy -> {out}; log -> {log_path}; final objective {last.get('objective', float('nan')):.4f} "
          f"(fingerprint {fp})")


def cmd_attack(args, seed):
    policy = load_policy(args.policy) if args.policy else None
    recipe = Recipe.parse(args.recipe, policy)
    config = _attack_config(args, seed)
    classifier = load_classifier(args.checkpoint)
    for p in classifier.parameters():
        p.requires_grad_(False)
    ids, images, labels, targets = _load_tasks(args.tasks, args.images_dir, classifier)
    fp = fingerprint({"command": "attack", "attack": config.as_dict(), "recipe": recipe.name,
                      "policy": fingerprint(policy) if policy is not None else None,
                      "checkpoint": Path(args.checkpoint).name, "tasks": Path(args.tasks).name, "n": len(ids),
                      "batch_size": args.batch_size})
    adv = attack_batches(classifier, images, targets, config, recipe, labels, args.batch_size, args.workers)
    if not torch.isfinite(adv).all():
        raise NumericError("attack produced non-finite pixels")
    rounded = quantize(adv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_id, img in zip(ids, rounded):
        save_png(img, out / f"{image_id}.png", {"fingerprint": fp, "recipe": recipe.name})
    success = predict(classifier, rounded).argmax(1) == targets
    success_float = predict(classifier, adv).argmax(1) == targets
    write_attack_csv(out / "attack_results.csv", ids, targets, linf_distance(rounded, images), success,
                     success_float, fp)
    with open(out / "dev_dataset.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for image_id, y, t in zip(ids, labels.tolist(), targets.tolist()):
            writer.writerow([image_id, y + 1, t + 1])
    _write_json(out / "run.json", {"command": "attack", "fingerprint": fp, "recipe": recipe.name,
                                   "config": config.as_dict(), "checkpoint": str(args.checkpoint)})
    rate = 100.0 * float(success.float().mean())
    print(f"{recipe.name}: {len(ids)} adversaries -> {out}; white-box success {rate:.1f}% (fingerprint {fp})")


def cmd_evaluate(args, seed):
    adv_dir = Path(args.adversaries)
    manifest = adv_dir / "dev_dataset.csv"
    if not adv_dir.is_dir() or not any(adv_dir.glob("*.png")):
        raise ConfigurationError(f"no adversarial PNGs in {adv_dir}")
    if not manifest.is_file():
        raise ConfigurationError(f"{adv_dir} has no dev_dataset.csv manifest")
    models = {}
    for path in args.checkpoints:
        model = load_classifier(path)
        name = Path(path).stem
        models[name] = model
    first = next(iter(models.values()))
    ids, images, labels, targets = _load_tasks(manifest, adv_dir, first)
    run = json.loads((adv_dir / "run.json").read_text()) if (adv_dir / "run.json").is_file() else {}
    source = args.source or (Path(run["checkpoint"]).stem if run.get("checkpoint") else None)
    attack = run.get("recipe", "attack")
    fp = fingerprint({"command": "evaluate", "adversaries": run.get("fingerprint"), "models": sorted(models)})
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            rates = dict(zip(models, pool.map(lambda m: targeted_success_rate(m, images, targets), models.values())))
        report = SuccessReport(source or "", attack, rates, len(targets), fp, source if source in models else None)
    else:
        report = evaluate_adversaries(images, targets, models, source or "", attack, fp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(reports_to_csv([report]))
    (out / "report.md").write_text(reports_to_markdown([report], "Targeted success (%)"))
    print(reports_to_markdown([report]), end="")


def cmd_correlate(args, seed):
    classifier = load_classifier(args.checkpoint)
    for p in classifier.parameters():
        p.requires_grad_(False)
    scorer = load_classifier(args.eval_checkpoint) if args.eval_checkpoint else None
    ids, images, labels, targets = _load_tasks(args.tasks, args.images_dir, classifier)
    stacks = [s.strip() for s in args.stacks.split(",") if s.strip()]
    config = _attack_config(args, seed)
    fp = fingerprint({"command": "correlate", "attack": config.as_dict(), "stacks": stacks, "draws": args.draws,
                      "checkpoint": Path(args.checkpoint).name, "tasks": Path(args.tasks).name, "n": len(ids)})
    rows = correlation_experiment(classifier, images, labels, targets, stacks, config, scorer, draws=args.draws)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "correlation.csv").write_text(correlation_to_csv(rows, fp))
    plot_correlation(rows, out / "correlation.png", fp)
    for r in rows:
        print(f"{r.stack:>14s}  logit {r.mean_target_logit:8.3f}  prob {r.mean_target_probability:.4f}")


def cmd_desk(args, seed):
    config = DeskConfig(n_tasks=args.n_tasks, train_epochs=args.train_epochs, search_epochs=args.search_epochs,
                        attack=AttackConfig(iterations=args.iters, seed=seed))
    results = DeskExperiment(config, args.cache, args.workers).run(TRANSFER_RECIPES, args.ablation, args.correlation)
    write_results(results, args.out)
    print((Path(args.out) / "report.md").read_text(), end="")


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "search": cmd_search,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "correlate": cmd_correlate,
    "desk": cmd_desk,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, file_values = _apply_config_file(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        seed = resolve_seed(args.seed, file_values.get("seed"))
        COMMANDS[args.command](args, seed)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # domain checks raised from library code (e.g. invalid enum values)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AAITError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
