"""Span-mask sampling over frame indices.

Each frame is independently chosen as a span start with probability `p`;
a start at i masks frames i..i+l-1 (truncated at the sequence end). Spans
may overlap; the union is deduplicated. Defaults p=0.08, l=10 follow the
usual masked-prediction recipe and are both configurable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateMaskError(RuntimeError):
    """Mask stayed empty after the resample budget was exhausted."""


@dataclass(frozen=True)
class MaskPolicy:
    start_prob: float = 0.08
    span_length: int = 10
    require_nonempty: bool = True

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ValueError(f"start_prob must be in [0,1], got {self.start_prob}")
        if self.span_length < 1:
            raise ValueError(f"span_length must be >= 1, got {self.span_length}")


@dataclass(frozen=True)
class MaskSet:
    indices: np.ndarray  # sorted, deduplicated, int64

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or (idx.size > 1 and not np.all(np.diff(idx) > 0)):
            raise ValueError("mask indices must be a strictly increasing 1-D array")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return self.indices.size


EMPTY_MASK = MaskSet(indices=np.empty(0, dtype=np.int64))


def sample_mask(T: int, policy: MaskPolicy, rng: np.random.Generator) -> MaskSet:
    """Sample a span mask for a sequence of T frames."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    attempts = 100 if policy.require_nonempty else 1
    for _ in range(attempts):
        starts = np.flatnonzero(rng.random(T) < policy.start_prob)
        if starts.size:
            offsets = np.arange(policy.span_length)
            idx = np.unique((starts[:, None] + offsets[None, :]).ravel())
            idx = idx[idx < T]
        else:
            idx = np.empty(0, dtype=np.int64)
        if idx.size or not policy.require_nonempty:
            return MaskSet(indices=idx.astype(np.int64))
    raise DegenerateMaskError(
        f"no frame masked after {attempts} attempts (T={T}, p={policy.start_prob}, "
        f"l={policy.span_length})"
    )


def expected_masked_fraction(policy: MaskPolicy) -> float:
    """Closed-form probability that a frame (away from edges) ends up masked."""
    return 1.0 - (1.0 - policy.start_prob) ** policy.span_length
