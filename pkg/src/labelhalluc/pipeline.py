"""Pretrain, hallucinate novel-class labels on the base set, finetune, evaluate.

One episode runs::

    head_i = fit_support_classifier(backbone, episode.support)
    store = pseudo_label(base, backbone, head_i, episode.classes)
    result = finetune(backbone, head_i, episode.support, base, store, cfg)
    acc = evaluate(result.backbone, result.head, episode.query)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import diffcore as dc
from .data import AugmentationConfig, augment_batch, make_rng
from .errors import ConfigError, ContractViolation, NumericError, TrainingError
from .models import (LinearHead, ParamGroupMask, forward_embed, forward_logits, init_model,
                     predict_logits)


@dataclass(frozen=True)
class ModelConfig:
    __pydantic_config__ = {"extra": "forbid"}

    hidden_dims: tuple = (64, 64)
    embed_dim: Optional[int] = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if any(h < 1 for h in self.hidden_dims) or (self.embed_dim is not None and self.embed_dim < 1):
            raise ConfigError("hidden_dims and embed_dim must be >= 1")


@dataclass(frozen=True)
class PretrainConfig:
    __pydantic_config__ = {"extra": "forbid"}

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple = (20, 25)
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")

    def lr_at(self, epoch):
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor ** drops


class PretrainResult(NamedTuple):
    backbone: object
    head: LinearHead
    log: list
    optimizer: dc.OptimizerState
    epochs_done: int


def accuracy(backbone, head, ds):
    pred = predict_logits(backbone, head, ds.features).argmax(axis=1)
    return float((pred == ds.local_labels()).mean())


def pretrain(base, model_cfg, cfg, resume=None):
    """Minimise base-class cross-entropy with mini-batch momentum SGD.

    Each epoch's shuffle comes from ``(seed, epoch)``, so continuing from a
    ``resume`` result follows the same trajectory as one uninterrupted run.
    """
    if len(base) == 0:
        raise ContractViolation("pretrain: empty base dataset")
    if cfg.batch_size > len(base):
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {len(base)}")
    if resume is None:
        backbone, head = init_model(base.dim, model_cfg.hidden_dims, model_cfg.embed_dim,
                                    len(base.class_set), model_cfg.seed)
        opt = dc.OptimizerState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
        start, log = 0, []
    else:
        backbone, head = resume.backbone.clone(), resume.head.clone()
        opt = replace(resume.optimizer, velocity=[v.copy() for v in resume.optimizer.velocity])
        start, log = resume.epochs_done, list(resume.log)
    params = backbone.params() + head.params()
    x, y = base.features, base.local_labels()
    n = len(base)
    step = 0
    for epoch in range(start, start + cfg.epochs):
        opt.learning_rate = cfg.lr_at(epoch)
        order = make_rng(cfg.seed, epoch).permutation(n)
        total_loss = correct = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                logits = forward_logits(backbone, head, x[idx])
                loss = dc.cross_entropy(logits, y[idx])
            except NumericError as exc:
                raise TrainingError(f"pretraining diverged: {exc}", step) from None
            loss.backward()
            dc.sgd_step(params, opt)
            total_loss += float(loss.value) * idx.size
            correct += float((logits.value.argmax(axis=1) == y[idx]).sum())
            step += 1
        log.append({"epoch": epoch + 1, "loss": total_loss / n, "accuracy": correct / n})
    return PretrainResult(backbone, head, log, opt, start + cfg.epochs)


@dataclass(frozen=True)
class FitConfig:
    """Logistic-regression fit on frozen embeddings.

    Objective: mean cross-entropy + ``l2/2 * ||W||^2`` (bias unpenalised),
    minimised by full-batch Nesterov gradient descent with step ``1/L``.
    """

    __pydantic_config__ = {"extra": "forbid"}

    steps: int = 1000
    l2: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not self.l2 >= 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")


def logreg_objective(weight, bias, z, y, l2):
    """Differentiable support-classifier objective on fixed embeddings ``z``."""
    loss = dc.cross_entropy(dc.constant(z) @ weight + bias, y)
    if l2:
        loss = loss + dc.sum_all(dc.mul(weight, weight)) * (0.5 * l2)
    return loss


def fit_support_classifier(backbone, support, cfg=FitConfig()):
    """Train a linear head on the frozen backbone's support embeddings.

    Starts from the zero head, whose loss is ``ln(way)``.  Labels follow
    ``support.class_set`` order.
    """
    z = forward_embed(backbone, support.features).value
    y = support.local_labels()
    n, way = z.shape[0], len(support.class_set)
    zb = np.hstack([z, np.ones((n, 1))])
    # softmax-CE Hessian w.r.t. logits is bounded by 1/2
    lipschitz = 0.5 * np.linalg.norm(zb, 2) ** 2 / n + cfg.l2
    lr = 1.0 / lipschitz
    if cfg.l2 > 0:
        root_kappa = math.sqrt(lipschitz / cfg.l2)
        beta = (root_kappa - 1) / (root_kappa + 1)
    else:
        beta = None
    w_prev = w = np.zeros((z.shape[1], way))
    b_prev = b = np.zeros(way)
    for k in range(cfg.steps):
        mom = beta if beta is not None else k / (k + 3)
        weight = dc.parameter(w + mom * (w - w_prev))
        bias = dc.parameter(b + mom * (b - b_prev))
        logreg_objective(weight, bias, z, y, cfg.l2).backward()
        w_prev, b_prev = w, b
        w = weight.value - lr * weight.grad
        b = bias.value - lr * bias.grad
    return LinearHead(dc.parameter(w), dc.parameter(b))


@dataclass(frozen=True, eq=False)
class PseudoLabelStore:
    """Teacher logits of every base example over one episode's novel classes."""

    logits: np.ndarray
    source_episode: int = -1
    classes: tuple = ()
    frozen: bool = True

    def __post_init__(self):
        a = np.array(self.logits, dtype=np.float64, copy=True)
        a.setflags(write=False)
        object.__setattr__(self, "logits", a)
        object.__setattr__(self, "frozen", True)

    @property
    def way(self):
        return self.logits.shape[1]

    def __len__(self):
        return self.logits.shape[0]


def check_disjoint(base_classes, episode_classes):
    overlap = set(base_classes) & set(episode_classes)
    if overlap:
        raise ContractViolation(f"episode classes {sorted(overlap)} also occur in the base set")


def pseudo_label(base, backbone, head, episode_classes, source_episode=-1):
    """Single gradient-free pass: row ``t`` is ``head(backbone(x_t))``."""
    check_disjoint(base.class_set, episode_classes)
    if head.num_classes != len(episode_classes):
        raise ContractViolation(
            f"head has {head.num_classes} outputs for {len(episode_classes)} episode classes")
    return PseudoLabelStore(predict_logits(backbone, head, base.features), int(source_episode),
                            tuple(episode_classes))


def hardify(store):
    """Per-row argmax; ties go to the lowest class index."""
    logits = store.logits if isinstance(store, PseudoLabelStore) else np.asarray(store)
    return np.argmax(logits, axis=1)


DEFAULT_AUG = AugmentationConfig(jitter_sigma=0.1, mask_fraction=0.1, flip_prob=0.0)


@dataclass(frozen=True)
class FinetuneConfig:
    __pydantic_config__ = {"extra": "forbid"}

    lambda_kl: float = 1.0
    lambda_ce: float = 1.0
    temperature: float = 4.0
    steps: int = 300
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    mask: ParamGroupMask = field(default_factory=ParamGroupMask)
    label_mode: str = "soft"
    on_the_fly: bool = False
    use_base: bool = True
    aug: AugmentationConfig = DEFAULT_AUG
    seed: int = 0

    def __post_init__(self):
        if not (self.lambda_kl >= 0 and self.lambda_ce >= 0):
            raise ConfigError("lambda_kl and lambda_ce must be >= 0")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be a positive even number, got {self.batch_size}")
        if self.label_mode not in ("soft", "hard"):
            raise ConfigError(f"label_mode must be 'soft' or 'hard', got {self.label_mode!r}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")


class FinetuneResult(NamedTuple):
    backbone: object
    head: LinearHead
    log: list


class _BaseCycler:
    """Without-replacement sampling over shuffled passes of ``range(n)``."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def take(self, k):
        out = []
        while k:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            chunk = self.order[self.pos:self.pos + k]
            self.pos += chunk.size
            k -= chunk.size
            out.append(chunk)
        return np.concatenate(out)


def finetune(backbone, head, support, base, store, cfg, teacher=None):
    """Whole-model finetuning on augmented support views plus pseudo-labelled base.

    Every step draws ``batch_size/2`` support views (with replacement, each
    augmented) and, unless ``cfg.use_base`` is off, ``batch_size/2`` base
    examples.  Loss is ``lambda_kl * base_term + lambda_ce * support_CE``; the
    base term is the KD loss against the stored logits (or CE against their
    argmax in hard mode).  Base-term gradients are dropped on the parameter
    groups disabled by ``cfg.mask``.  Groups that no active loss term reaches
    are frozen outright, weight decay included.

    With ``cfg.on_the_fly`` the teacher logits are recomputed per batch from
    ``teacher`` (default: the incoming backbone/head) instead of read from
    ``store``.  The inputs are not modified.
    """
    way = len(support.class_set)
    if head.num_classes != way:
        raise ContractViolation(f"head has {head.num_classes} outputs for a {way}-way support")
    use_base = cfg.use_base and base is not None and len(base) > 0
    if use_base:
        check_disjoint(base.class_set, support.class_set)
        if cfg.on_the_fly:
            t_backbone, t_head = teacher if teacher is not None else (backbone, head)
            t_backbone, t_head = t_backbone.clone(), t_head.clone()
        elif store is None or store.logits.shape != (len(base), way):
            shape = None if store is None else store.logits.shape
            raise ContractViolation(f"pseudo-label store {shape} does not match base "
                                    f"({len(base)} rows) and a {way}-way episode")
        hard = hardify(store) if cfg.label_mode == "hard" and not cfg.on_the_fly else None

    backbone, head = backbone.clone(), head.clone()
    groups = {"backbone": backbone.params(), "head": head.params()}
    base_on = use_base and cfg.lambda_kl > 0
    allow = {"backbone": cfg.mask.base_grads_to_backbone, "head": cfg.mask.base_grads_to_head}
    active = [g for g in groups if cfg.lambda_ce > 0 or (base_on and allow[g])]
    trained = [p for g in active for p in groups[g]]
    every = groups["backbone"] + groups["head"]
    opt = dc.OptimizerState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)

    support_rng, base_rng = (np.random.default_rng(s)
                             for s in np.random.SeedSequence(int(cfg.seed)).spawn(2))
    cycler = _BaseCycler(len(base), base_rng) if use_base else None
    sx, sy = support.features, support.local_labels()
    half = cfg.batch_size // 2
    log = []
    for step in range(cfg.steps):
        try:
            base_val = 0.0
            if use_base:
                bidx = cycler.take(half)
                student = forward_logits(backbone, head, base.features[bidx])
                if cfg.on_the_fly:
                    target = predict_logits(t_backbone, t_head, base.features[bidx])
                else:
                    target = store.logits[bidx]
                if cfg.label_mode == "hard":
                    labels = hard[bidx] if hard is not None else np.argmax(target, axis=1)
                    base_loss = dc.cross_entropy(student, labels)
                else:
                    base_loss = dc.kd_loss(student, target, cfg.temperature)
                base_val = float(base_loss.value)
                (base_loss * cfg.lambda_kl).backward()
                for g, ok in allow.items():
                    if not ok:
                        dc.zero_grad(groups[g])
            sidx = support_rng.integers(0, len(support), size=half)
            views = augment_batch(sx[sidx], cfg.aug, support_rng)
            ce = dc.cross_entropy(forward_logits(backbone, head, views), sy[sidx])
            (ce * cfg.lambda_ce).backward()
        except NumericError as exc:
            raise TrainingError(f"finetuning diverged: {exc}", step) from None
        dc.sgd_step(trained, opt)
        dc.zero_grad(every)
        ce_val = float(ce.value)
        total = cfg.lambda_kl * base_val + cfg.lambda_ce * ce_val
        if not math.isfinite(total):
            raise TrainingError("finetuning produced a non-finite loss", step)
        log.append({"step": step, "kd_loss": base_val, "ce_loss": ce_val, "total": total})
    return FinetuneResult(backbone, head, log)


def evaluate(backbone, head, query):
    """Fraction of query examples whose argmax logit is the true class."""
    if len(query) == 0:
        raise ContractViolation("evaluate: empty query set")
    if head.num_classes != len(query.class_set):
        raise ContractViolation(
            f"head has {head.num_classes} outputs, query has {len(query.class_set)} classes")
    return accuracy(backbone, head, query)
