from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsSeries:
    """Per-episode training metrics. Episode ``k`` (1-based) is row ``k - 1``."""

    returns: np.ndarray                      # (E, m) undiscounted
    lengths: np.ndarray                      # (E,)
    global_step: np.ndarray                  # (E,) step count when the episode ended
    q_delta: np.ndarray | None = None        # (E,) max |dQ| applied during the episode
    discounted: np.ndarray | None = None     # (E, m)
    extra: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, m: int) -> "MetricsSeries":
        return cls(np.zeros((0, m)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @property
    def num_episodes(self) -> int:
        return self.returns.shape[0]

    @property
    def num_objectives(self) -> int:
        return self.returns.shape[1]

    @property
    def episodes(self) -> np.ndarray:
        return np.arange(1, self.num_episodes + 1)
