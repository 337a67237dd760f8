"""Multi-position masked-prediction objective.

A placement plan pins one cross-entropy term per (layer, codebook size)
pair; the training loss is the unweighted sum of all terms, each computed
over masked frames only. Depth fractions map to layer indices by
round-half-up with clamping to [1, L]; deeper placements always carry
smaller codebooks. Heads are plain linear projections (d x K plus bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class PlacementError(ValueError):
    pass


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def loc_to_layer(loc: float, L: int) -> int:
    """Map a depth fraction in (0,1] to a layer index in 1..L."""
    if not 0.0 < loc <= 1.0:
        raise PlacementError(f"loc must be in (0,1], got {loc}")
    if L < 2:
        raise PlacementError(f"L must be >= 2, got {L}")
    return min(max(_round_half_up(loc * L), 1), L)


@dataclass(frozen=True)
class Placement:
    loc: float
    layer: int
    codebook_size: int


@dataclass(frozen=True)
class PlacementPlan:
    placements: tuple[Placement, ...]
    mode: str  # "single" | "triple"

    def __post_init__(self):
        if self.mode == "single":
            if len(self.placements) != 1 or self.placements[0].loc != 1.0:
                raise PlacementError("single mode requires exactly one placement at loc 1.0")
        elif self.mode == "triple":
            if len(self.placements) != 3:
                raise PlacementError("triple mode requires exactly three placements")
        else:
            raise PlacementError(f"unknown mode {self.mode!r}")
        layers = [p.layer for p in self.placements]
        sizes = [p.codebook_size for p in self.placements]
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise PlacementError(f"placement layers must strictly increase, got {layers}")
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise PlacementError(f"codebook sizes must strictly decrease with depth, got {sizes}")

    def sizes(self) -> list[int]:
        return [p.codebook_size for p in self.placements]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "placements": [
                {"loc": p.loc, "layer": p.layer, "codebook_size": p.codebook_size}
                for p in self.placements
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "PlacementPlan":
        return PlacementPlan(
            placements=tuple(
                Placement(p["loc"], p["layer"], p["codebook_size"])
                for p in d["placements"]
            ),
            mode=d["mode"],
        )


def plan_single(L: int, size: int) -> PlacementPlan:
    """One loss at the final layer (the baseline setup)."""
    return PlacementPlan(
        placements=(Placement(loc=1.0, layer=L, codebook_size=size),),
        mode="single",
    )


def plan_triple(loc_big: float, L: int, sizes) -> PlacementPlan:
    """Three losses: biggest codebook at loc_big, smallest at the final layer,
    the middle codebook equidistant between the two."""
    k_big, k_mid, k_small = sizes
    if not (k_big > k_mid > k_small):
        raise PlacementError(f"sizes must be strictly descending, got {sizes}")
    if loc_big >= 1.0:
        raise PlacementError(f"the big-codebook loc must be < 1.0, got {loc_big}")
    a = loc_to_layer(loc_big, L)
    mid = _round_half_up((a + L) / 2.0)
    if not (a < mid < L):
        raise PlacementError(
            f"placement collision: layers ({a}, {mid}, {L}) are not distinct for "
            f"loc={loc_big}, L={L}"
        )
    return PlacementPlan(
        placements=(
            Placement(loc=loc_big, layer=a, codebook_size=k_big),
            Placement(loc=mid / L, layer=mid, codebook_size=k_mid),
            Placement(loc=1.0, layer=L, codebook_size=k_small),
        ),
        mode="triple",
    )


def init_heads(plan: PlacementPlan, model_dim: int, seed: int) -> dict[str, Tensor]:
    """One linear head (d x K weight + K bias) per placement."""
    rng = np.random.default_rng(seed)
    heads: dict[str, Tensor] = {}
    for p in plan.placements:
        pre = f"head_k{p.codebook_size}."
        heads[pre + "w"] = Tensor(rng.normal(0.0, 0.02, size=(model_dim, p.codebook_size)),
                                  requires_grad=True)
        heads[pre + "b"] = Tensor(np.zeros(p.codebook_size), requires_grad=True)
    return heads


def masked_ce(activations: Tensor, head_w: Tensor, head_b: Tensor,
              labels, mask_set) -> Tensor:
    """Mean cross-entropy over masked frames only."""
    idx = np.asarray(getattr(mask_set, "indices", mask_set), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("masked_ce: mask set is empty")
    labels = np.asarray(labels, dtype=np.int64)
    k = head_w.data.shape[1]
    if labels.size and labels.max() >= k:
        raise ValueError(f"masked_ce: label {labels.max()} out of range for K={k}")
    rows = ad.gather_rows(activations, idx)
    logits = ad.add(ad.matmul(rows, head_w), head_b)
    return ad.cross_entropy(logits, labels[idx])


def total_loss(plan: PlacementPlan, layer_activations, heads: dict[str, Tensor],
               labels_by_size: dict[int, np.ndarray], mask_set):
    """Sum of per-placement masked cross-entropies.

    Returns (scalar loss tensor, breakdown dict keyed 'K{size}@L{layer}').
    """
    total = None
    breakdown = {}
    for p in plan.placements:
        pre = f"head_k{p.codebook_size}."
        term = masked_ce(layer_activations[p.layer], heads[pre + "w"], heads[pre + "b"],
                         labels_by_size[p.codebook_size], mask_set)
        breakdown[f"K{p.codebook_size}@L{p.layer}"] = term.item()
        total = term if total is None else ad.add(total, term)
    return total, breakdown
