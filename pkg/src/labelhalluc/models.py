"""MLP backbone, linear heads, base-gradient gating and checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, DataError, DimensionError

CHECKPOINT_FORMAT = "labelhalluc-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Backbone:
    """Stack of ``relu(h @ W + b)`` layers; zero layers is the identity map."""

    input_dim: int
    layers: list

    @property
    def widths(self):
        return [w.shape[1] for w, _ in self.layers]

    @property
    def hidden_dims(self):
        return self.widths[:-1]

    @property
    def embed_dim(self):
        return self.widths[-1] if self.layers else self.input_dim

    def params(self):
        return [p for layer in self.layers for p in layer]

    def clone(self):
        return Backbone(self.input_dim,
                        [(dc.parameter(w.value), dc.parameter(b.value)) for w, b in self.layers])


@dataclass
class LinearHead:
    weight: dc.Node
    bias: dc.Node

    @property
    def num_classes(self):
        return self.weight.shape[1]

    def params(self):
        return [self.weight, self.bias]

    def clone(self):
        return LinearHead(dc.parameter(self.weight.value), dc.parameter(self.bias.value))

    def __call__(self, embedding):
        return embedding @ self.weight + self.bias


@dataclass(frozen=True)
class ParamGroupMask:
    """Which parameter groups receive gradients from pseudo-labelled base examples."""

    __pydantic_config__ = {"extra": "forbid"}

    base_grads_to_backbone: bool = True
    base_grads_to_head: bool = True

    @property
    def label(self):
        return ("T" if self.base_grads_to_backbone else "F") + ("T" if self.base_grads_to_head else "F")


def _he(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def init_model(input_dim, hidden_dims, embed_dim, num_classes, seed):
    """He-initialised backbone and head.

    Layer widths are ``hidden_dims + [embed_dim]``.  An empty ``hidden_dims``
    gives a zero-depth (identity) backbone, in which case ``embed_dim`` must be
    ``None`` or equal to ``input_dim``.
    """
    hidden_dims = [int(h) for h in hidden_dims]
    if input_dim < 1 or num_classes < 1 or any(h < 1 for h in hidden_dims):
        raise ConfigError("model dimensions must all be >= 1")
    if hidden_dims:
        if embed_dim is None or embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {embed_dim}")
        widths = hidden_dims + [int(embed_dim)]
    else:
        if embed_dim not in (None, input_dim):
            raise ConfigError("a zero-depth backbone needs embed_dim == input_dim")
        widths = []
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    layers, fan_in = [], int(input_dim)
    for w in widths:
        layers.append((dc.parameter(_he(rng, fan_in, w)), dc.parameter(np.zeros(w))))
        fan_in = w
    backbone = Backbone(int(input_dim), layers)
    head = LinearHead(dc.parameter(_he(rng, fan_in, num_classes)),
                      dc.parameter(np.zeros(num_classes)))
    return backbone, head


def replace_head(backbone, num_classes, seed):
    """Fresh He-initialised head over a new label space; the backbone is untouched."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    return LinearHead(dc.parameter(_he(rng, backbone.embed_dim, num_classes)),
                      dc.parameter(np.zeros(num_classes)))


def forward_embed(backbone, x):
    x = x if isinstance(x, dc.Node) else dc.constant(np.asarray(x, dtype=np.float64))
    if x.value.ndim != 2 or x.shape[1] != backbone.input_dim:
        raise DimensionError(f"backbone expects (n, {backbone.input_dim}) input, got {x.shape}")
    h = x
    for w, b in backbone.layers:
        h = dc.relu(h @ w + b)
    return h


def forward_logits(backbone, head, x):
    return head(forward_embed(backbone, x))


def predict_logits(backbone, head, x):
    """Logits as a plain array (same arithmetic as :func:`forward_logits`)."""
    return forward_logits(backbone, head, x).value


def embed(backbone, x):
    return forward_embed(backbone, x).value


def param_count(input_dim, hidden_dims, embed_dim, num_classes):
    widths = list(hidden_dims) + [embed_dim] if hidden_dims else []
    total, fan_in = 0, input_dim
    for w in widths:
        total += fan_in * w + w
        fan_in = w
    return total + fan_in * num_classes + num_classes


def dims_of(backbone, head):
    return {"input_dim": backbone.input_dim, "hidden_dims": backbone.hidden_dims,
            "embed_dim": backbone.embed_dim if backbone.layers else None,
            "num_classes": head.num_classes}


def snapshot(params):
    """Copies of parameter values, for bitwise before/after comparisons."""
    return [p.value.copy() for p in params]


def save_checkpoint(path, backbone, head, extra=None):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": dims_of(backbone, head),
        "backbone": [[w.value.ravel().tolist(), b.value.tolist()] for w, b in backbone.layers],
        "head": [head.weight.value.ravel().tolist(), head.bias.value.tolist()],
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_checkpoint(path):
    """Return ``(backbone, head, extra)``; floats round-trip exactly through JSON."""
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    dims = blob["dims"]
    fan_in = dims["input_dim"]
    layers = []
    for w, b in blob["backbone"]:
        width = len(b)
        layers.append((dc.parameter(np.array(w).reshape(fan_in, width)), dc.parameter(b)))
        fan_in = width
    hw, hb = blob["head"]
    head = LinearHead(dc.parameter(np.array(hw).reshape(fan_in, len(hb))), dc.parameter(hb))
    return Backbone(dims["input_dim"], layers), head, blob.get("extra", {})
