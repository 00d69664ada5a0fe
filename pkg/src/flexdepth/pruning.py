"""Layer importance scores and the two self-pruning mechanisms.

Top-k selection: hard binary masks forward, with gradients estimated
through a relaxed k-hot vector (straight-through). Zero-out: sigmoid
gates with a sparsity penalty, periodically suppressing the smallest
scores while keeping them revivable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-12  # clamp for log(1 - kappa) inside the relaxed top-k rounds


def topk_indices(s: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties keep the lower index."""
    s = np.asarray(s, dtype=np.float64)
    if not 1 <= k <= s.size:
        raise ValueError(f"k must be in [1, {s.size}], got {k}")
    order = np.argsort(-s, kind="stable")
    return order[:k]


def hard_topk_mask(s: np.ndarray, k: int) -> np.ndarray:
    """Binary gate vector with exactly k ones at the top-k scores."""
    s = np.asarray(s, dtype=np.float64)
    mask = np.zeros(s.size)
    mask[topk_indices(s, k)] = 1.0
    return mask


def relaxed_topk(s: Tensor, k: int, temperature: float = 1.0) -> Tensor:
    """Relaxed k-hot vector: k rounds of tempered softmax with the winner
    of each round suppressed before the next. Entries are clamped into
    [0, 1]; the unclamped sum is exactly k.
    """
    L = s.values.size
    if not 1 <= k <= L:
        raise ValueError(f"k must be in [1, {L}], got {k}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    inv_t = 1.0 / temperature
    working = ad.scale(s, inv_t)
    alpha = None
    for _ in range(k):
        kappa = ad.softmax(working)
        alpha = kappa if alpha is None else ad.add(alpha, kappa)
        one_minus = ad.add_const(ad.scale(kappa, -1.0), 1.0)
        damp = ad.log(ad.maximum_const(one_minus, LOG_FLOOR))
        working = ad.add(working, ad.scale(damp, inv_t))
    return ad.minimum_const(ad.maximum_const(alpha, 0.0), 1.0)


def simple_topk_gate(s: Tensor, k: int, temperature: float = 1.0) -> Tensor:
    """Binary top-k gate forward; backward substitutes the relaxed k-hot
    vector, routing the mask gradient into the scores.
    """
    hard = hard_topk_mask(s.values, k)
    return ad.straight_through(hard, relaxed_topk(s, k, temperature))


@dataclass(frozen=True)
class ZeroOutState:
    """Currently suppressed layer indices and the size target they enforce."""

    suppressed: tuple[int, ...]
    k: int

    def keep_mask(self, num_layers: int) -> np.ndarray:
        mask = np.ones(num_layers)
        mask[list(self.suppressed)] = 0.0
        return mask


def zero_out_update(s: np.ndarray, k: int) -> ZeroOutState:
    """Suppress the L-k smallest scores. Recomputed fresh from the live
    scores, so previously suppressed layers revive when they rank back
    into the top k.
    """
    s = np.asarray(s, dtype=np.float64)
    keep = topk_indices(s, k)
    suppressed = sorted(set(range(s.size)) - set(int(i) for i in keep))
    return ZeroOutState(tuple(suppressed), k)


def zero_out_gate(s: Tensor, state: ZeroOutState) -> Tensor:
    """Sigmoid gates with suppressed coordinates pinned to exact zero."""
    return ad.mul(ad.sigmoid(s), state.keep_mask(s.values.size))


def sparsity_penalty(g: Tensor, k: int, gamma: float) -> Tensor:
    """gamma * |sum(g) - k| / L, pushing the total gate mass toward k."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    L = g.values.size
    return ad.scale(ad.abs_(ad.add_const(ad.sum_(g), -float(k))), gamma / L)


@dataclass(frozen=True)
class SubnetSpec:
    """Decreasing layer counts for the jointly trained size categories."""

    layer_counts: tuple[int, ...]

    def __post_init__(self):
        ks = self.layer_counts
        if len(ks) < 1 or any(k <= 0 for k in ks):
            raise ValueError(f"layer counts must be positive, got {ks}")
        if any(a <= b for a, b in zip(ks, ks[1:])):
            raise ValueError(f"layer counts must strictly decrease, got {ks}")

    @property
    def count(self) -> int:
        return len(self.layer_counts)

    @property
    def k_min(self) -> int:
        return self.layer_counts[-1]

    def validate_supernet(self, num_layers: int) -> None:
        if self.layer_counts[0] != num_layers:
            raise ValueError(
                f"largest size {self.layer_counts[0]} must equal the "
                f"supernet layer count {num_layers}")


def masks_from_scores(s: np.ndarray, spec: SubnetSpec) -> list[np.ndarray]:
    """One binary mask per size category; nested by the shared tie rule."""
    return [hard_topk_mask(s, k) for k in spec.layer_counts]
