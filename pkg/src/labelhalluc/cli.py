"""Command-line entry point: ``labelhalluc {generate,pretrain,run,sweep,inspect}``.

All knobs live in one JSON experiment file; every command writes the fully
resolved config (defaults filled in) into the output directory, which is
enough to reproduce each output byte.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from pydantic import TypeAdapter, ValidationError

from . import harness
from .data import ClassSplit, generate_synthetic, load_csv, save_csv, sample_episode
from .diffcore import OptimizerState
from .errors import ConfigError, ContractViolation, DataError, NumericError
from .models import dims_of, load_checkpoint, save_checkpoint
from .pipeline import (FinetuneConfig, FitConfig, ModelConfig, PretrainConfig, PretrainResult,
                       fit_support_classifier, pretrain, pseudo_label)

log = logging.getLogger("labelhalluc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED_NAME = "config.resolved.json"


@dataclass(frozen=True)
class SyntheticSection:
    __pydantic_config__ = {"extra": "forbid"}

    num_base_classes: int = 20
    num_novel_classes: int = 5
    dim: int = 32
    examples_per_class: int = 100
    cluster_spread: float = 0.25
    seed: int = 0
    novel_shift: float = 0.0
    base_counts: Optional[tuple] = None

    def __post_init__(self):
        for name in ("num_base_classes", "num_novel_classes", "examples_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.synthetic.{name} must be >= 1, got {getattr(self, name)}")
        if self.dim < 2:
            raise ConfigError(f"data.synthetic.dim must be >= 2, got {self.dim}")
        if not self.cluster_spread > 0:
            raise ConfigError(f"data.synthetic.cluster_spread must be > 0, got {self.cluster_spread}")


@dataclass(frozen=True)
class DataSection:
    __pydantic_config__ = {"extra": "forbid"}

    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    base_csv: Optional[str] = None
    novel_csv: Optional[str] = None


@dataclass(frozen=True)
class HarnessSection:
    __pydantic_config__ = {"extra": "forbid"}

    strategies: tuple = harness.STRATEGIES
    masks: tuple = ("FT", "TF", "TT")
    episodes: int = 50
    way: int = 5
    shot: int = 5
    query_per_class: int = 15
    master_seed: int = 0
    base_fraction: float = 1.0
    mask: str = "TT"
    sweep_axis: str = "base_fraction"
    sweep_values: tuple = (0.1, 0.5, 1.0)
    sweep_strategy: str = "soft_halluc"
    inspect_episode: int = 0
    inspect_k: int = 10

    def __post_init__(self):
        bad = [s for s in self.strategies if s not in harness.STRATEGIES]
        if bad:
            raise ConfigError(f"harness.strategies: unknown {bad}")
        bad = [m for m in (*self.masks, self.mask) if m not in harness.MASKS]
        if bad:
            raise ConfigError(f"harness.masks: unknown {bad}")
        if self.sweep_axis not in harness.SWEEP_AXES:
            raise ConfigError(f"harness.sweep_axis must be one of {harness.SWEEP_AXES}")
        if self.sweep_strategy not in harness.STRATEGIES:
            raise ConfigError(f"harness.sweep_strategy: unknown {self.sweep_strategy!r}")
        if self.inspect_k < 1:
            raise ConfigError("harness.inspect_k must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    __pydantic_config__ = {"extra": "forbid"}

    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    harness: HarnessSection = field(default_factory=HarnessSection)
    output_dir: str = "runs/default"

    def strategy_config(self, strategy="soft_halluc"):
        h = self.harness
        return harness.StrategyConfig(
            strategy=strategy, mask=harness.MASKS[h.mask], finetune=self.finetune, fit=self.fit,
            episodes=h.episodes, base_fraction=h.base_fraction, way=h.way, shot=h.shot,
            query_per_class=h.query_per_class, master_seed=h.master_seed)


_ADAPTER = TypeAdapter(ExperimentConfig)


def parse_config(raw):
    """Validate a plain dict; unknown keys and out-of-range values raise ConfigError."""
    try:
        return _ADAPTER.validate_python(raw)
    except ValidationError as exc:
        msgs = ["{}: {}".format(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"])
                for e in exc.errors()]
        raise ConfigError("invalid config: " + "; ".join(msgs)) from None


def load_config(path):
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw)


def config_to_dict(cfg):
    return json.loads(json.dumps(asdict(cfg)))


def _prepare_out(cfg):
    out = cfg.output_dir
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, RESOLVED_NAME), "w", encoding="utf-8") as fh:
            json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write to output directory {out}: {exc}") from None
    return out


def _paths(cfg):
    out = cfg.output_dir
    return {
        "base": cfg.data.base_csv or os.path.join(out, "base.csv"),
        "novel": cfg.data.novel_csv or os.path.join(out, "novel.csv"),
        "split": os.path.join(out, "split.json"),
        "checkpoint": os.path.join(out, "checkpoint.json"),
        "pretrain_log": os.path.join(out, "pretrain_log.csv"),
    }


def cmd_generate(cfg):
    out = _prepare_out(cfg)
    s = cfg.data.synthetic
    base, novel, split = generate_synthetic(
        s.num_base_classes, s.num_novel_classes, s.dim, s.examples_per_class, s.cluster_spread,
        s.seed, base_counts=s.base_counts, novel_shift=s.novel_shift)
    save_csv(base, os.path.join(out, "base.csv"))
    save_csv(novel, os.path.join(out, "novel.csv"))
    with open(os.path.join(out, "split.json"), "w", encoding="utf-8") as fh:
        json.dump({"base_classes": sorted(split.base_classes),
                   "novel_classes": sorted(split.novel_classes),
                   "base_rows": len(base), "novel_rows": len(novel)}, fh, indent=2)
        fh.write("\n")
    log.info("wrote %d base and %d novel examples to %s", len(base), len(novel), out)
    return base, novel, split


def load_data(cfg):
    p = _paths(cfg)
    for key in ("base", "novel"):
        if not os.path.exists(p[key]):
            raise DataError(f"missing {key} dataset {p[key]}; run `generate` first")
    base = load_csv(p["base"], "base")
    novel = load_csv(p["novel"], "novel")
    if base.dim != novel.dim:
        raise DataError(f"base has {base.dim} features, novel has {novel.dim}")
    return base, novel, ClassSplit(base.class_set, novel.class_set)


def _expected_dims(cfg, base):
    return {"input_dim": base.dim, "hidden_dims": list(cfg.model.hidden_dims),
            "embed_dim": cfg.model.embed_dim if cfg.model.hidden_dims else None,
            "num_classes": len(base.class_set)}


def cmd_pretrain(cfg, resume=False):
    out = _prepare_out(cfg)
    p = _paths(cfg)
    base, _, _ = load_data(cfg)
    start = None
    if resume:
        backbone, head, extra = _load_checkpoint(cfg, base)
        opt = OptimizerState(cfg.pretrain.learning_rate, cfg.pretrain.momentum,
                             cfg.pretrain.weight_decay,
                             [np.array(v).reshape(q.shape) for v, q in
                              zip(extra["velocity"], backbone.params() + head.params())])
        start = PretrainResult(backbone, head, extra["log"], opt, extra["epochs_done"])
    result = pretrain(base, cfg.model, cfg.pretrain, resume=start)
    extra = {"epochs_done": result.epochs_done, "log": result.log,
             "velocity": [v.ravel().tolist() for v in result.optimizer.velocity]}
    save_checkpoint(p["checkpoint"], result.backbone, result.head, extra)
    with open(p["pretrain_log"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy"])
        for row in result.log:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["accuracy"])])
    if result.log:
        log.info("pretrained %d epochs; final loss %.4f acc %.4f", result.epochs_done,
                 result.log[-1]["loss"], result.log[-1]["accuracy"])
    return result


def _load_checkpoint(cfg, base):
    path = _paths(cfg)["checkpoint"]
    if not os.path.exists(path):
        raise DataError(f"missing checkpoint {path}; run `pretrain` first")
    backbone, head, extra = load_checkpoint(path)
    found, expected = dims_of(backbone, head), _expected_dims(cfg, base)
    if found != expected:
        raise ConfigError(f"checkpoint dimensions {found} do not match config {expected}")
    return backbone, head, extra


def _snapshot(cfg):
    base, novel, split = load_data(cfg)
    backbone, _, _ = _load_checkpoint(cfg, base)
    return backbone, base, novel, split


def _row_filter(cfg, strategy):
    h = cfg.harness
    if strategy is None:
        return tuple(h.strategies), tuple(h.masks)
    if strategy in harness.STRATEGIES:
        return (strategy,), ()
    if strategy.startswith("mask_") and strategy[5:] in harness.MASKS:
        return (), (strategy[5:],)
    raise ConfigError(f"--strategy must be one of {harness.STRATEGIES} or mask_XY, got {strategy!r}")


def cmd_run(cfg, strategy=None, workers=1):
    out = _prepare_out(cfg)
    backbone, base, novel, split = _snapshot(cfg)
    strategies, masks = _row_filter(cfg, strategy)
    master = cfg.strategy_config()
    table, cache = {}, {}
    for name, row_cfg in harness.matrix_configs(master, strategies, masks).items():
        key = row_cfg.fingerprint()
        if key not in cache:
            cache[key] = harness.run_strategy(backbone, novel, base, row_cfg, workers, split)
        table[name] = replace(cache[key], label=name)
        log.info("%s: %.4f ± %.4f", name, table[name].mean, table[name].ci95)
    if masks and "finetune_only" in table:
        # blocking every base gradient is finetuning on the support set alone
        rows = [(k, v) for k, v in table.items() if not k.startswith("mask_")]
        rows.append(("mask_FF", replace(table["finetune_only"], label="mask_FF")))
        rows += [(k, v) for k, v in table.items() if k.startswith("mask_")]
        table = dict(rows)
    harness.write_episode_csv(os.path.join(out, "results.csv"), table)
    h = cfg.harness
    title = f"{h.way}-way {h.shot}-shot, {h.episodes} episodes, master seed {h.master_seed}"
    with open(os.path.join(out, "summary.md"), "w", encoding="utf-8") as fh:
        fh.write(harness.markdown_table(table, title))
    return table


def cmd_sweep(cfg, workers=1):
    out = _prepare_out(cfg)
    backbone, base, novel, split = _snapshot(cfg)
    h = cfg.harness
    summaries = harness.sweep(backbone, novel, base, h.sweep_axis, h.sweep_values,
                              cfg.strategy_config(h.sweep_strategy), workers, split)
    table = {s.label: s for s in summaries}
    harness.write_episode_csv(os.path.join(out, "sweep.csv"), table)
    flagged = harness.trend_violations(summaries)
    with open(os.path.join(out, "sweep.md"), "w", encoding="utf-8") as fh:
        fh.write(harness.markdown_table(table, f"sweep over {h.sweep_axis} ({h.sweep_strategy})"))
        if flagged:
            fh.write("\nMean drops beyond CI noise at: "
                     + ", ".join(summaries[i].label for i in flagged) + "\n")
    return summaries


def cmd_inspect(cfg, k=None):
    out = _prepare_out(cfg)
    backbone, base, novel, split = _snapshot(cfg)
    h = cfg.harness
    k = h.inspect_k if k is None else k
    sample_seed, _ = harness.episode_seeds(h.master_seed, h.inspect_episode)
    episode = sample_episode(novel, h.way, h.shot, h.query_per_class, sample_seed, split)
    head = fit_support_classifier(backbone, episode.support, cfg.fit)
    store = pseudo_label(base, backbone, head, episode.classes, h.inspect_episode)
    report = harness.top_base_examples(store, base, k)
    harness.write_top_examples_csv(os.path.join(out, "top_examples.csv"), report)
    return report


def build_parser():
    parser = argparse.ArgumentParser(prog="labelhalluc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file (defaults if omitted)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="override harness.master_seed")
    common.add_argument("--workers", type=int, default=1, help="episode worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("generate", parents=[common], help="write synthetic base/novel CSVs")
    p = sub.add_parser("pretrain", parents=[common], help="pretrain the embedding on base")
    p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    p = sub.add_parser("run", parents=[common], help="run the strategy / gating matrix")
    p.add_argument("--strategy", help="run only this row")
    sub.add_parser("sweep", parents=[common], help="sweep one harness axis")
    p = sub.add_parser("inspect", parents=[common], help="top base examples per novel class")
    p.add_argument("--k", type=int, help="examples per class (overrides harness.inspect_k)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg = replace(cfg, output_dir=args.out)
        if args.seed is not None:
            cfg = replace(cfg, harness=replace(cfg.harness, master_seed=args.seed))
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, resume=args.resume)
        elif args.command == "run":
            table = cmd_run(cfg, args.strategy, args.workers)
            print(harness.markdown_table(table), end="")
        elif args.command == "sweep":
            cmd_sweep(cfg, args.workers)
        elif args.command == "inspect":
            cmd_inspect(cfg, args.k)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractViolation, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
