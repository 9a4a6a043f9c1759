"""Inference-efficiency metrics over per-sample exit layers."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def _check(exit_layers, n_layers):
    e = np.asarray(exit_layers, dtype=np.int64)
    if e.size == 0:
        raise ValueError("no exit layers")
    if e.min() < 1 or e.max() > n_layers:
        raise ValueError(f"exit layers must lie in [1, {n_layers}]")
    return e


def speedup(exit_layers: Sequence[int], n_layers: int) -> float:
    """Total layers over actually computed layers, aggregated over the set."""
    e = _check(exit_layers, n_layers)
    return float(n_layers * e.size) / float(e.sum())


def mean_speedup(exit_layers: Sequence[int], n_layers: int) -> float:
    """Per-sample mean of N / exit (secondary reading of speedup)."""
    e = _check(exit_layers, n_layers)
    return float(np.mean(n_layers / e))


def high_computation_threshold(n_layers: int) -> int:
    """Fewest layers that count as high computation: 11 of 12, 22 of 24, N-1 for small N."""
    return max(1, (11 * n_layers) // 12)


def high_computation_ratio(exit_layers: Sequence[int], n_layers: int) -> float:
    """Fraction of samples computing at least :func:`high_computation_threshold` layers."""
    e = _check(exit_layers, n_layers)
    return float(np.mean(e >= high_computation_threshold(n_layers)))


def gain_reduction(speedup_clean: float, speedup_adv: float) -> float:
    """Share of the clean speedup's excess over 1x removed by the attack.

    Not clamped: values outside [0, 1] mean the "attack" sped the model up
    (or overshot), and are reported as such.
    """
    if speedup_clean <= 1.0:
        raise ValueError("gain reduction is undefined for a clean speedup of 1x")
    return (speedup_clean - speedup_adv) / (speedup_clean - 1.0)
