"""Frozen-feature probing with learnable per-layer weights.

A probe trains (a) one unconstrained scalar per encoder layer (including
layer 0, the encoder input), pushed through a softmax to give nonnegative
weights summing to 1, and (b) a linear head on the weighted-sum feature.
The upstream model is never updated. Two tasks:

* frame_content — per-frame logits over content units; metric is frame
  accuracy on the test split.
* utterance_speaker — time-mean pooled feature per utterance; metric is
  utterance accuracy on the test split.

`pin_layer` bypasses the softmax and fixes the weights to a one-hot on one
layer; used to check equivalence with a single-layer probe.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderModel, encode
from .masking import EMPTY_MASK


@dataclass(frozen=True)
class ProbeTask:
    kind: str  # "frame_content" | "utterance_speaker"
    num_classes: int

    def __post_init__(self):
        if self.kind not in ("frame_content", "utterance_speaker"):
            raise ValueError(f"unknown probe task kind {self.kind!r}")


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 1000
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    seed: int = 0
    pin_layer: int | None = None
    log_every: int = 50


@dataclass
class ProbeResult:
    task_kind: str
    metric: float
    layer_weights: list  # L+1 floats, nonnegative, summing to 1
    head_w: np.ndarray
    head_b: np.ndarray
    loss_log: list  # (step, loss)
    config: ProbeConfig

    def to_json_dict(self) -> dict:
        return {
            "task": self.task_kind,
            "metric": self.metric,
            "layer_weights": self.layer_weights,
            "loss_log": self.loss_log,
            "config": asdict(self.config),
        }


def param_digest(params: dict) -> str:
    """SHA-256 over all parameter bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


def extract_features(model: EncoderModel, utterance) -> list[np.ndarray]:
    """Per-layer activations with an empty mask; upstream untouched."""
    acts = encode(model, utterance.features, EMPTY_MASK)
    return [a.data.copy() for a in acts]


def _task_arrays(model, task: ProbeTask, corpus, split: str):
    """Stack (L+1) feature matrices and targets for one split."""
    per_layer = None
    targets = []
    for utt in corpus.splits[split]:
        feats = extract_features(model, utt)
        if per_layer is None:
            per_layer = [[] for _ in feats]
        if task.kind == "frame_content":
            for l, fmat in enumerate(feats):
                per_layer[l].append(fmat)
            targets.append(utt.content_labels)
        else:
            for l, fmat in enumerate(feats):
                per_layer[l].append(fmat.mean(axis=0, keepdims=True))
            targets.append(np.array([utt.speaker_id]))
    xs = [np.concatenate(chunks, axis=0) for chunks in per_layer]
    y = np.concatenate(targets).astype(np.int64)
    if y.size and y.max() >= task.num_classes:
        raise ValueError(
            f"target {y.max()} out of range for num_classes={task.num_classes}"
        )
    return xs, y


def _weighted_feature(xs_t, w_logits, pin_layer):
    n_layers = len(xs_t)
    if pin_layer is not None:
        weights = None
        feat = xs_t[pin_layer]
        # keep the same summation structure as the trained path: add exact zeros
        for l in range(n_layers):
            if l != pin_layer:
                feat = ad.add(feat, ad.smul(xs_t[l], 0.0))
        return feat, np.eye(n_layers)[pin_layer]
    ws = ad.softmax(w_logits)  # shape (1, L+1)
    feat = None
    for l in range(n_layers):
        term = ad.mul(xs_t[l], ad.col_slice(ws, l, l + 1))
        feat = term if feat is None else ad.add(feat, term)
    return feat, ws.data.ravel().copy()


def train_probe(model: EncoderModel, task: ProbeTask, corpus,
                config: ProbeConfig | None = None) -> ProbeResult:
    config = config or ProbeConfig()
    before = param_digest(model.params)

    xs_train, y_train = _task_arrays(model, task, corpus, "train")
    xs_test, y_test = _task_arrays(model, task, corpus, "test")
    n_layers = len(xs_train)
    d = xs_train[0].shape[1]

    rng = np.random.default_rng(config.seed)
    head_w = Tensor(rng.normal(0.0, 0.02, size=(d, task.num_classes)), requires_grad=True)
    head_b = Tensor(np.zeros(task.num_classes), requires_grad=True)
    w_logits = Tensor(np.zeros((1, n_layers)), requires_grad=True)
    trainable = [head_w, head_b] + ([] if config.pin_layer is not None else [w_logits])

    adam_m = [np.zeros_like(p.data) for p in trainable]
    adam_v = [np.zeros_like(p.data) for p in trainable]
    xs_t = [Tensor(x) for x in xs_train]

    loss_log = []
    weights = np.full(n_layers, 1.0 / n_layers)
    for t in range(1, config.steps + 1):
        for p in trainable:
            p.zero_grad()
        feat, weights = _weighted_feature(xs_t, w_logits, config.pin_layer)
        logits = ad.add(ad.matmul(feat, head_w), head_b)
        loss = ad.cross_entropy(logits, y_train)
        val = loss.item()
        if not np.isfinite(val):
            raise RuntimeError(f"non-finite probe loss at step {t}")
        ad.backward(loss)
        b1, b2 = config.adam_beta1, config.adam_beta2
        for p, m, v in zip(trainable, adam_m, adam_v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= config.learning_rate * (m / (1 - b1 ** t)) \
                / (np.sqrt(v / (1 - b2 ** t)) + config.adam_eps)
        if t % config.log_every == 0 or t == config.steps:
            loss_log.append((t, val))

    # final weights and test metric
    feat_test = np.zeros_like(xs_test[0])
    for l in range(n_layers):
        feat_test += weights[l] * xs_test[l]
    pred = (feat_test @ head_w.data + head_b.data).argmax(axis=1)
    metric = float((pred == y_test).mean())

    after = param_digest(model.params)
    if after != before:
        raise RuntimeError("probe mutated upstream parameters")
    return ProbeResult(
        task_kind=task.kind,
        metric=metric,
        layer_weights=[float(w) for w in weights],
        head_w=head_w.data.copy(),
        head_b=head_b.data.copy(),
        loss_log=loss_log,
        config=config,
    )


def weight_center_of_mass(layer_weights) -> float:
    """Depth summary in [0,1]: 0 = all mass at layer 0, 1 = all at layer L."""
    w = np.asarray(layer_weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 2 or np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("layer_weights must be a probability vector over layers")
    L = w.size - 1
    return float((np.arange(w.size) * w).sum() / L)


def weight_entropy(layer_weights) -> float:
    """Shannon entropy (nats) of the layer-weight distribution; 0 log 0 = 0."""
    w = np.asarray(layer_weights, dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


def save_probe_result(result: ProbeResult, path):
    with open(path, "w") as f:
        json.dump(result.to_json_dict(), f, indent=2, sort_keys=True)


def load_probe_result(path) -> dict:
    with open(path) as f:
        return json.load(f)
