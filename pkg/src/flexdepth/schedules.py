"""Pruning-size and learning-rate schedules."""

from __future__ import annotations

import math


def k_schedule(i: int, num_layers: int, k_min: int, iterations: int) -> int:
    """Target layer count for pruning iteration i of I.

    k = round(L - (L - k_min) * i / I), rounding half away from zero;
    the final iteration lands exactly on k_min.
    """
    if not 1 <= i <= iterations:
        raise ValueError(f"iteration {i} outside [1, {iterations}]")
    x = num_layers - (num_layers - k_min) * i / iterations
    return int(math.floor(x + 0.5))


def oclr_lr(step: int, total_steps: int, *,
            lr_peak: float = 4e-4, lr_floor: float = 4e-6,
            lr_final: float = 1e-7, warm_fraction: float = 0.45,
            decay_fraction: float = 0.45) -> float:
    """One-cycle policy: linear floor->peak, peak->floor, then floor->final."""
    warm = warm_fraction * total_steps
    decay = decay_fraction * total_steps
    tail = total_steps - warm - decay
    if step < warm:
        return lr_floor + (lr_peak - lr_floor) * step / warm
    if step < warm + decay:
        return lr_peak + (lr_floor - lr_peak) * (step - warm) / decay
    return lr_floor + (lr_final - lr_floor) * (step - warm - decay) / tail
