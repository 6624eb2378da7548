"""Episodic experiment runner: strategies, ablation matrix, sweeps, reports.

Every episode derives its randomness from ``(master_seed, episode_index)``
alone, so all strategies in a matrix see byte-identical episodes and the
results do not depend on how many worker processes execute them.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import make_rng, sample_episode
from .diffcore import softmax_np
from .errors import ConfigError, ContractViolation, LabelHallucError
from .models import ParamGroupMask
from .pipeline import (FinetuneConfig, FitConfig, evaluate, finetune, fit_support_classifier,
                       pseudo_label)

STRATEGIES = ("frozen_lr", "finetune_only", "hard_halluc", "soft_halluc")
SWEEP_AXES = ("base_fraction", "way", "temperature", "lambda_kl")
MASKS = {label: ParamGroupMask(label[0] == "T", label[1] == "T") for label in ("FF", "FT", "TF", "TT")}


@dataclass(frozen=True)
class StrategyConfig:
    __pydantic_config__ = {"extra": "forbid"}

    strategy: str = "soft_halluc"
    mask: ParamGroupMask = field(default_factory=ParamGroupMask)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    episodes: int = 50
    base_fraction: float = 1.0
    way: int = 5
    shot: int = 5
    query_per_class: int = 15
    master_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.episodes < 1:
            raise ConfigError(f"episodes must be >= 1, got {self.episodes}")
        if not 0 < self.base_fraction <= 1:
            raise ConfigError(f"base_fraction must lie in (0, 1], got {self.base_fraction}")
        if min(self.way, self.shot, self.query_per_class) < 1:
            raise ConfigError("way, shot and query_per_class must be >= 1")

    def effective_finetune(self):
        """Finetune config with the strategy's forced fields applied."""
        ft = replace(self.finetune, mask=self.mask)
        if self.strategy == "finetune_only":
            return replace(ft, use_base=False)
        if self.strategy == "hard_halluc":
            return replace(ft, label_mode="hard", use_base=True)
        return replace(ft, label_mode="soft", use_base=True)

    def fingerprint(self):
        return config_fingerprint(self)

    @property
    def label(self):
        if self.strategy == "soft_halluc" and self.mask != ParamGroupMask():
            return f"soft_halluc[{self.mask.label}]"
        return self.strategy


def config_fingerprint(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunSummary:
    per_episode_accuracy: tuple
    mean: float
    ci95: float
    fingerprint: str = ""
    label: str = ""
    ci_defined: bool = True

    @property
    def n(self):
        return len(self.per_episode_accuracy)

    def overlaps(self, other):
        """True when the two 95% intervals intersect."""
        return abs(self.mean - other.mean) <= self.ci95 + other.ci95


def summarize(accuracies, fingerprint="", label=""):
    """Mean and ``1.96 * s / sqrt(n)`` with the n-1 sample deviation.

    One episode has no spread estimate: ci95 is reported as 0 and flagged.
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ContractViolation("summarize: no accuracies")
    mean = float(acc.mean())
    if acc.size == 1:
        return RunSummary(tuple(acc.tolist()), mean, 0.0, fingerprint, label, ci_defined=False)
    ci = 1.96 * float(acc.std(ddof=1)) / math.sqrt(acc.size)
    return RunSummary(tuple(acc.tolist()), mean, ci, fingerprint, label)


def episode_seeds(master_seed, index):
    """``(sampling_seed, finetune_seed)`` for one episode."""
    a, b = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(2)
    return int(a), int(b)


def subsample_base(base, fraction, master_seed):
    if fraction >= 1.0:
        return base
    keep = max(1, round(fraction * len(base)))
    idx = np.sort(make_rng(master_seed, 0xBA5E).choice(len(base), size=keep, replace=False))
    return base.subset(idx)


def run_episode(backbone, novel, base, cfg, index, split=None):
    """Query accuracy of one strategy on one episode."""
    sample_seed, ft_seed = episode_seeds(cfg.master_seed, index)
    episode = sample_episode(novel, cfg.way, cfg.shot, cfg.query_per_class, sample_seed, split)
    head = fit_support_classifier(backbone, episode.support, cfg.fit)
    if cfg.strategy == "frozen_lr":
        return evaluate(backbone, head, episode.query)
    ft = cfg.effective_finetune()
    ft = replace(ft, seed=int(np.random.SeedSequence([ft_seed, ft.seed]).generate_state(1)[0]))
    store = None
    if ft.use_base and not ft.on_the_fly:
        store = pseudo_label(base, backbone, head, episode.classes, source_episode=index)
    result = finetune(backbone, head, episode.support, base, store, ft)
    return evaluate(result.backbone, result.head, episode.query)


def _episode_task(args):
    backbone, novel, base, cfg, index, split = args
    try:
        return run_episode(backbone, novel, base, cfg, index, split)
    except LabelHallucError as exc:
        exc.episode = index
        exc.args = (f"episode {index}: {exc}",) + exc.args[1:]
        raise


def _check_snapshot(backbone, novel, base):
    if backbone.input_dim != base.dim or novel.dim != base.dim:
        raise ContractViolation(
            f"snapshot expects {backbone.input_dim}-dim inputs; base has {base.dim}, "
            f"novel has {novel.dim}")


def run_strategy(backbone, novel, base, cfg, workers=1, split=None):
    """Run ``cfg.episodes`` seeded episodes and summarise query accuracy."""
    _check_snapshot(backbone, novel, base)
    pool = subsample_base(base, cfg.base_fraction, cfg.master_seed)
    tasks = [(backbone, novel, pool, cfg, i, split) for i in range(cfg.episodes)]
    if workers <= 1:
        accs = [_episode_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            accs = list(ex.map(_episode_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    return summarize(accs, cfg.fingerprint(), cfg.label)


def matrix_configs(master_cfg, strategies=STRATEGIES, masks=("FT", "TF", "TT")):
    """Row name -> StrategyConfig for the strategy and gradient-gating tables."""
    rows = {}
    for s in strategies:
        rows[s] = replace(master_cfg, strategy=s,
                          mask=master_cfg.mask if s != "finetune_only" else ParamGroupMask())
    for m in masks:
        rows[f"mask_{m}"] = replace(master_cfg, strategy="soft_halluc", mask=MASKS[m])
    return rows


def ablation_matrix(backbone, novel, base, master_cfg, workers=1, split=None,
                    strategies=STRATEGIES, include_masks=True):
    """Strategy rows plus soft_halluc under each base-gradient mask, paired by seed.

    The all-blocked mask row is the finetune_only run itself: blocking every
    base gradient is finetuning on the support set alone.
    """
    configs = matrix_configs(master_cfg, strategies, ("FT", "TF", "TT") if include_masks else ())
    cache, table = {}, {}
    for name, cfg in configs.items():
        key = cfg.fingerprint()
        if key not in cache:
            cache[key] = run_strategy(backbone, novel, base, cfg, workers, split)
        table[name] = replace(cache[key], label=name)
    if include_masks:
        if "finetune_only" not in table:
            cfg = replace(master_cfg, strategy="finetune_only", mask=ParamGroupMask())
            table["finetune_only"] = replace(run_strategy(backbone, novel, base, cfg, workers, split),
                                             label="finetune_only")
        ordered = {k: v for k, v in table.items() if not k.startswith("mask_")}
        ordered["mask_FF"] = replace(table["finetune_only"], label="mask_FF")
        for m in ("FT", "TF", "TT"):
            ordered[f"mask_{m}"] = table[f"mask_{m}"]
        table = ordered
    return table


def sweep_config(cfg, axis, value):
    if axis == "base_fraction":
        return replace(cfg, base_fraction=float(value))
    if axis == "way":
        return replace(cfg, way=int(value))
    if axis == "temperature":
        return replace(cfg, finetune=replace(cfg.finetune, temperature=float(value)))
    if axis == "lambda_kl":
        return replace(cfg, finetune=replace(cfg.finetune, lambda_kl=float(value)))
    raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")


def sweep(backbone, novel, base, axis, values, cfg, workers=1, split=None):
    """One paired-seed RunSummary per axis value."""
    out = []
    for v in values:
        s = run_strategy(backbone, novel, base, sweep_config(cfg, axis, v), workers, split)
        out.append(replace(s, label=f"{axis}={v}"))
    return out


def trend_violations(summaries):
    """Indices where the mean drops by more than the two intervals combined."""
    return [i for i in range(1, len(summaries))
            if summaries[i - 1].mean - summaries[i].mean > summaries[i - 1].ci95 + summaries[i].ci95]


def top_base_examples(store, base, k):
    """Per novel class, the ``k`` base examples with the highest softmax score.

    Returns ``{novel_class: [(base_index, base_label, confidence), ...]}`` sorted
    by descending confidence, ties broken by lower base index.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(store) != len(base):
        raise ContractViolation(f"store has {len(store)} rows, base has {len(base)}")
    if k > len(base):
        warnings.warn(f"k={k} exceeds the {len(base)} base examples; clamping", stacklevel=2)
        k = len(base)
    probs = softmax_np(store.logits)
    classes = store.classes or tuple(range(store.way))
    report = {}
    for j, cls in enumerate(classes):
        order = np.argsort(-probs[:, j], kind="stable")[:k]
        report[cls] = [(int(t), int(base.labels[t]), float(probs[t, j])) for t in order]
    return report


def write_episode_csv(path, table):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "episode", "accuracy", "fingerprint"])
        for name, s in table.items():
            for i, acc in enumerate(s.per_episode_accuracy):
                w.writerow([name, i, repr(acc), s.fingerprint])


def markdown_table(table, title=None):
    lines = [f"### {title}", ""] if title else []
    lines += ["| row | accuracy (%) | episodes |", "|---|---|---|"]
    for name, s in table.items():
        ci = f"{100 * s.ci95:.2f}" if s.ci_defined else "n/a"
        lines.append(f"| {name} | {100 * s.mean:.2f} ± {ci} | {s.n} |")
    return "\n".join(lines) + "\n"


def write_top_examples_csv(path, report):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["novel_class", "rank", "base_index", "base_label", "confidence"])
        for cls, rows in report.items():
            for rank, (idx, label, conf) in enumerate(rows):
                w.writerow([cls, rank, idx, label, repr(conf)])
