"""Toy pre-norm transformer encoder exposing per-layer activations.

Input frames are projected linearly to model space (no convolutional
front-end; the synthetic corpus is already frame-level), masked rows are
replaced by a learned mask embedding, and learned positional embeddings
are added. Layer 0 of the returned activations is this mask-substituted
input; layers 1..L are the block outputs, with the final layer norm folded
into layer L's output.

Parameter count closed form (documented for the init test):

    in_proj:   F*d + d
    positions: max_frames*d
    mask_emb:  d
    per block: 2d (ln1) + 4*(d*d + d) (attention) + 2d (ln2)
               + d*ffn + ffn + ffn*d + d (feed-forward)
    final ln:  2d
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 6
    model_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    input_dim: int = 24
    max_frames: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError(f"num_layers must be >= 2, got {self.num_layers}")
        if min(self.model_dim, self.num_heads, self.ffn_dim,
               self.input_dim, self.max_frames) < 1:
            raise ValueError("all dimensions must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )


def param_count(cfg: EncoderConfig) -> int:
    d, f, ffn = cfg.model_dim, cfg.input_dim, cfg.ffn_dim
    per_block = 2 * d + 4 * (d * d + d) + 2 * d + d * ffn + ffn + ffn * d + d
    return f * d + d + cfg.max_frames * d + d + cfg.num_layers * per_block + 2 * d


class EncoderModel:
    """Parameter container; `params` maps stable name paths to tensors."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params


def init_encoder(config: EncoderConfig) -> EncoderModel:
    """Deterministic initialization from config.seed."""
    rng = np.random.default_rng(config.seed)
    d, f, ffn, L = config.model_dim, config.input_dim, config.ffn_dim, config.num_layers
    scale = 0.02

    def p(shape, kind="normal"):
        if kind == "normal":
            data = rng.normal(0.0, scale, size=shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        return Tensor(data, requires_grad=True)

    params: dict[str, Tensor] = {}
    params["in_proj.w"] = p((f, d))
    params["in_proj.b"] = p((d,), "zeros")
    params["pos"] = p((config.max_frames, d))
    params["mask_emb"] = p((1, d))
    for l in range(L):
        pre = f"block{l}."
        params[pre + "ln1.g"] = p((d,), "ones")
        params[pre + "ln1.b"] = p((d,), "zeros")
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + f"attn.{name}"] = p((d, d))
            params[pre + f"attn.{name}b"] = p((d,), "zeros")
        params[pre + "ln2.g"] = p((d,), "ones")
        params[pre + "ln2.b"] = p((d,), "zeros")
        params[pre + "ffn.w1"] = p((d, ffn))
        params[pre + "ffn.b1"] = p((ffn,), "zeros")
        params[pre + "ffn.w2"] = p((ffn, d))
        params[pre + "ffn.b2"] = p((d,), "zeros")
    params["final_ln.g"] = p((d,), "ones")
    params["final_ln.b"] = p((d,), "zeros")
    return EncoderModel(config, params)


def _attention(x: Tensor, pp: dict[str, Tensor], pre: str, num_heads: int) -> Tensor:
    d = x.data.shape[1]
    dh = d // num_heads
    q = ad.add(ad.matmul(x, pp[pre + "attn.wq"]), pp[pre + "attn.wqb"])
    k = ad.add(ad.matmul(x, pp[pre + "attn.wk"]), pp[pre + "attn.wkb"])
    v = ad.add(ad.matmul(x, pp[pre + "attn.wv"]), pp[pre + "attn.wvb"])
    heads = []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        heads.append(ad.sdpa(ad.col_slice(q, lo, hi),
                             ad.col_slice(k, lo, hi),
                             ad.col_slice(v, lo, hi)))
    out = ad.concat_cols(heads)
    return ad.add(ad.matmul(out, pp[pre + "attn.wo"]), pp[pre + "attn.wob"])


def encode(model: EncoderModel, frames: np.ndarray, mask_set) -> list[Tensor]:
    """Run the encoder; returns L+1 activation tensors, each T x d.

    `mask_set` is a MaskSet or any sequence of frame indices; masked rows of
    the projected input are replaced by the mask embedding before positions
    are added.
    """
    cfg = model.config
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    if frames.ndim != 2 or frames.shape[1] != cfg.input_dim:
        raise ad.ShapeError(
            f"encode: frames shape {frames.shape} does not match input_dim {cfg.input_dim}"
        )
    if T > cfg.max_frames:
        raise ValueError(f"encode: T={T} exceeds max_frames={cfg.max_frames}")
    mask_idx = np.asarray(getattr(mask_set, "indices", mask_set), dtype=np.int64)
    if mask_idx.size and (mask_idx.min() < 0 or mask_idx.max() >= T):
        raise ValueError(f"encode: mask index out of range for T={T}")

    pp = model.params
    proj = ad.add(ad.matmul(Tensor(frames), pp["in_proj.w"]), pp["in_proj.b"])

    keep = np.ones((T, 1))
    keep[mask_idx] = 0.0
    x = ad.add(ad.mul(proj, Tensor(keep)),
               ad.mul(pp["mask_emb"], Tensor(1.0 - keep)))
    x = ad.add(x, ad.embedding(pp["pos"], np.arange(T)))

    acts = [x]
    for l in range(cfg.num_layers):
        pre = f"block{l}."
        y = ad.layer_norm(x, pp[pre + "ln1.g"], pp[pre + "ln1.b"])
        h = ad.add(x, _attention(y, pp, pre, cfg.num_heads))
        z = ad.layer_norm(h, pp[pre + "ln2.g"], pp[pre + "ln2.b"])
        ff = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(z, pp[pre + "ffn.w1"]),
                                             pp[pre + "ffn.b1"])),
                              pp[pre + "ffn.w2"]),
                    pp[pre + "ffn.b2"])
        x = ad.add(h, ff)
        if l == cfg.num_layers - 1:
            x = ad.layer_norm(x, pp["final_ln.g"], pp["final_ln.b"])
        acts.append(x)
    return acts
