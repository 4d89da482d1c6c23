"""Paired comparison of two result tables with a Wilcoxon signed-rank test."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.stats import wilcoxon


@dataclass
class PairedComparison:
    deltas: dict            # key -> b - a
    p_value: float | None   # None when fewer than two pairs

    @property
    def mean_delta(self) -> float:
        return float(np.mean(list(self.deltas.values())))

    @property
    def applicable(self) -> bool:
        return self.p_value is not None


def _table(m) -> Mapping:
    return m.accuracy if hasattr(m, "accuracy") else m


def paired_comparison(metrics_a, metrics_b) -> PairedComparison:
    """Per-key deltas (b - a) and a two-sided signed-rank p-value.

    Accepts :class:`Metrics` or plain ``{key: value}`` mappings, so pairs can
    be per-subset or per-seed.  Identical inputs give p = 1 by convention; a
    single pair gives ``p_value=None`` (not applicable).
    """
    a, b = _table(metrics_a), _table(metrics_b)
    if set(a) != set(b):
        raise ValueError(f"paired comparison needs the same keys: {sorted(set(a) ^ set(b))} differ")
    keys = list(a)
    deltas = {k: float(b[k]) - float(a[k]) for k in keys}
    if len(keys) < 2:
        return PairedComparison(deltas, None)
    d = np.array(list(deltas.values()))
    if np.all(d == 0):
        return PairedComparison(deltas, 1.0)
    return PairedComparison(deltas, float(wilcoxon(d, alternative="two-sided").pvalue))
