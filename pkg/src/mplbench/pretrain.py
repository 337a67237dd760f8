"""Pre-training loop and checkpointing.

Each step draws a batch of utterances (without replacement within an
epoch, reshuffled per epoch), samples one shared span mask per utterance,
runs the encoder, sums the per-placement masked cross-entropies, and takes
an Adam step with linear warmup then constant learning rate. The run is
fully determined by the seeds: resuming from a checkpoint taken at step k
reproduces the uninterrupted run bit-exactly, because parameters, Adam
moments, the rng state, and the in-progress epoch permutation are all part
of the checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import read_container, write_container
from .encoder import EncoderConfig, EncoderModel, encode, init_encoder
from .masking import MaskPolicy, sample_mask
from .objective import PlacementPlan, init_heads, total_loss

MAGIC = b"MPLC"
VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_utterances: int = 8
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    warmup_steps: int = 200
    grad_clip_norm: float | None = None
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_utterances < 1:
            raise ValueError("steps must be >= 0 and batch_utterances >= 1")
        if self.warmup_steps > self.steps and self.steps > 0:
            raise ValueError("warmup_steps must not exceed steps")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive or None")


@dataclass
class TrainState:
    encoder_config: EncoderConfig
    plan: PlacementPlan
    params: dict  # name -> Tensor (encoder + heads)
    adam_m: dict  # name -> ndarray
    adam_v: dict
    step: int
    rng: np.random.Generator
    epoch_perm: np.ndarray
    epoch_cursor: int

    def model(self) -> EncoderModel:
        return EncoderModel(self.encoder_config, self.params)


def init_train_state(encoder_config: EncoderConfig, plan: PlacementPlan,
                     train_config: TrainConfig) -> TrainState:
    model = init_encoder(encoder_config)
    params = dict(model.params)
    params.update(init_heads(plan, encoder_config.model_dim, encoder_config.seed + 1))
    return TrainState(
        encoder_config=encoder_config,
        plan=plan,
        params=params,
        adam_m={n: np.zeros_like(p.data) for n, p in params.items()},
        adam_v={n: np.zeros_like(p.data) for n, p in params.items()},
        step=0,
        rng=np.random.default_rng(train_config.seed),
        epoch_perm=np.empty(0, dtype=np.int64),
        epoch_cursor=0,
    )


def _next_batch(state: TrainState, n_utts: int, batch: int):
    ids = []
    while len(ids) < batch:
        if state.epoch_cursor >= state.epoch_perm.size:
            state.epoch_perm = state.rng.permutation(n_utts)
            state.epoch_cursor = 0
        take = min(batch - len(ids), state.epoch_perm.size - state.epoch_cursor)
        ids.extend(state.epoch_perm[state.epoch_cursor:state.epoch_cursor + take].tolist())
        state.epoch_cursor += take
    return ids


def _adam_step(state: TrainState, cfg: TrainConfig, t: int):
    lr = cfg.learning_rate
    if cfg.warmup_steps > 0:
        lr *= min(1.0, t / cfg.warmup_steps)
    if cfg.grad_clip_norm is not None:
        sq = 0.0
        for p in state.params.values():
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        norm = np.sqrt(sq)
        if norm > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / norm
            for p in state.params.values():
                if p.grad is not None:
                    p.grad *= scale
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def pretrain(corpus, bundle, encoder_config: EncoderConfig, plan: PlacementPlan,
             train_config: TrainConfig, mask_policy: MaskPolicy | None = None,
             state: TrainState | None = None, log=None):
    """Train for train_config.steps total steps; resumes if `state` is given.

    Returns (state, log) where log is a list of dicts
    {step, total, 'K{size}@L{layer}': ...} appended every log_every steps.
    """
    for size in plan.sizes():
        if size not in bundle.frame_labels:
            raise ValueError(f"label bundle does not cover codebook size {size}")
    utts = corpus.splits["train"]
    if not utts:
        raise ValueError("corpus train split is empty")
    mask_policy = mask_policy or MaskPolicy()
    if state is None:
        state = init_train_state(encoder_config, plan, train_config)
    log = log if log is not None else []
    model = state.model()

    while state.step < train_config.steps:
        t = state.step + 1
        ids = _next_batch(state, len(utts), train_config.batch_utterances)
        for p in state.params.values():
            p.zero_grad()
        batch_total = 0.0
        breakdown_sum = {}
        losses = []
        for i in ids:
            utt = utts[i]
            mask = sample_mask(utt.num_frames, mask_policy, state.rng)
            acts = encode(model, utt.features, mask)
            labels = {s: bundle.labels_for(s, utt.utterance_id) for s in plan.sizes()}
            loss_u, breakdown = total_loss(plan, acts, state.params, labels, mask)
            losses.append(loss_u)
            for k, val in breakdown.items():
                breakdown_sum[k] = breakdown_sum.get(k, 0.0) + val
        batch_loss = losses[0]
        for lu in losses[1:]:
            batch_loss = ad.add(batch_loss, lu)
        batch_loss = ad.smul(batch_loss, 1.0 / len(ids))
        batch_total = batch_loss.item()
        if not np.isfinite(batch_total):
            raise DivergenceError(f"non-finite loss at step {t}")
        ad.backward(batch_loss)
        _adam_step(state, train_config, t)
        state.step = t
        if t % train_config.log_every == 0 or t == train_config.steps:
            row = {"step": t, "total": batch_total}
            for k, val in breakdown_sum.items():
                row[k] = val / len(ids)
            log.append(row)
    return state, log


def write_loss_csv(log, path):
    if not log:
        return
    cols = ["step", "total"] + [k for k in log[0] if k not in ("step", "total")]
    with open(path, "w", newline="") as f:
        f.write(",".join(cols) + "\n")
        for row in log:
            f.write(",".join(repr(row[c]) if c != "step" else str(row[c])
                             for c in cols) + "\n")


def save_checkpoint(state: TrainState, path):
    manifest = {
        "encoder_config": asdict(state.encoder_config),
        "plan": state.plan.to_dict(),
        "step": state.step,
        "rng_state": json.loads(json.dumps(state.rng.bit_generator.state)),
        "epoch_perm": state.epoch_perm.tolist(),
        "epoch_cursor": state.epoch_cursor,
        "param_order": list(state.params),
        "shapes": {n: list(p.data.shape) for n, p in state.params.items()},
    }
    blocks = {}
    for n, p in state.params.items():
        blocks[f"param/{n}"] = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    for n in state.params:
        blocks[f"adam_m/{n}"] = np.ascontiguousarray(state.adam_m[n], dtype="<f8").tobytes()
    for n in state.params:
        blocks[f"adam_v/{n}"] = np.ascontiguousarray(state.adam_v[n], dtype="<f8").tobytes()
    write_container(path, MAGIC, VERSION, manifest, blocks)


def load_checkpoint(path) -> TrainState:
    manifest, blocks = read_container(path, MAGIC, VERSION)
    ec = manifest["encoder_config"]
    encoder_config = EncoderConfig(
        num_layers=ec["num_layers"], model_dim=ec["model_dim"],
        num_heads=ec["num_heads"], ffn_dim=ec["ffn_dim"],
        input_dim=ec["input_dim"], max_frames=ec["max_frames"], seed=ec["seed"],
    )
    plan = PlacementPlan.from_dict(manifest["plan"])
    params = {}
    adam_m = {}
    adam_v = {}
    for n in manifest["param_order"]:
        shape = tuple(manifest["shapes"][n])
        params[n] = Tensor(np.frombuffer(blocks[f"param/{n}"], dtype="<f8")
                           .reshape(shape).copy(), requires_grad=True)
        adam_m[n] = np.frombuffer(blocks[f"adam_m/{n}"], dtype="<f8").reshape(shape).copy()
        adam_v[n] = np.frombuffer(blocks[f"adam_v/{n}"], dtype="<f8").reshape(shape).copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    return TrainState(
        encoder_config=encoder_config, plan=plan, params=params,
        adam_m=adam_m, adam_v=adam_v, step=manifest["step"], rng=rng,
        epoch_perm=np.asarray(manifest["epoch_perm"], dtype=np.int64),
        epoch_cursor=manifest["epoch_cursor"],
    )
