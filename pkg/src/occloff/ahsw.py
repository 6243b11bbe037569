"""Adaptive hard sample weighting from decayed per-sample loss histories."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np


@dataclass
class SampleLossHistory:
    """Unweighted per-epoch losses of every sample, keyed by sample id."""

    losses: dict[int, list[float]] = field(default_factory=dict)

    def record(self, sample_id: int, loss: float):
        loss = float(loss)
        if not math.isfinite(loss) or loss < 0:
            raise ValueError(f"loss must be finite and nonnegative, got {loss}")
        self.losses.setdefault(int(sample_id), []).append(loss)

    def epochs_completed(self, sample_id: int) -> int:
        return len(self.losses.get(int(sample_id), []))

    def to_dict(self) -> dict:
        return {str(k): list(v) for k, v in self.losses.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SampleLossHistory":
        return cls({int(k): [float(x) for x in v] for k, v in d.items()})


@dataclass(frozen=True)
class AHSWConfig:
    warmup: int = 10
    sample_percent: float = 70.0
    amplification: float = 5.0
    decay: float = 0.5

    def __post_init__(self):
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not 0 < self.sample_percent <= 100:
            raise ValueError("sample_percent must be in (0, 100]")
        if not self.amplification > 1:
            raise ValueError("amplification must exceed 1")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")


def cumulative_loss(history: Sequence[float], gamma: float, n: int) -> float:
    """sum_{e=1}^{n-1} gamma^(n-1-e) * loss_e for epoch ``n``."""
    if n < 2:
        raise ValueError("cumulative loss is undefined for n < 2 (warm-up only)")
    if len(history) != n - 1:
        raise ValueError(f"history has {len(history)} entries, expected {n - 1}")
    return float(sum(gamma ** (n - 1 - e) * history[e - 1] for e in range(1, n)))


@dataclass(frozen=True)
class EpochPlan:
    participates: np.ndarray  # bool per sample, in the order of the input
    weights: np.ndarray

    @property
    def n_participants(self) -> int:
        return int(self.participates.sum())


def n_participants(sample_percent: float, n_samples: int) -> int:
    return min(n_samples, math.ceil(Fraction(str(sample_percent)) * n_samples / 100))


def plan_epoch(cumulatives, config: AHSWConfig, n: int, sample_ids=None) -> EpochPlan:
    """Participation flags and loss weights for epoch ``n`` (1-based).

    ``cumulatives`` is ignored during warm-up (n <= warmup) and may be None.
    Ties in the ranking go to the smaller sample id.
    """
    if n <= config.warmup:
        N = len(cumulatives) if cumulatives is not None else len(sample_ids)
        return EpochPlan(np.ones(N, dtype=bool), np.ones(N))
    c = np.asarray(cumulatives, dtype=np.float64)
    N = len(c)
    ids = np.arange(N) if sample_ids is None else np.asarray(sample_ids)
    order = np.lexsort((ids, -c))
    part = np.zeros(N, dtype=bool)
    part[order[:n_participants(config.sample_percent, N)]] = True
    lo, hi = c.min(), c.max()
    if hi == lo:
        w = np.ones(N)
    else:
        # clip: 1 + (lambda - 1) can round past lambda
        w = np.clip(1 + (config.amplification - 1) * (c - lo) / (hi - lo), 1.0, config.amplification)
    return EpochPlan(part, w)


def plan_from_history(history: SampleLossHistory, sample_ids: Sequence[int], config: AHSWConfig,
                      n: int) -> EpochPlan:
    if n <= config.warmup:
        return plan_epoch(None, config, n, sample_ids)
    cum = [cumulative_loss(history.losses[i][: n - 1], config.decay, n) for i in sample_ids]
    return plan_epoch(cum, config, n, sample_ids)
