"""Monte-Carlo summaries of sampled masks (survival, independence, constancy)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from densedrop.dropout import Granularity, MaskRNG, mask_family, sample_mask, segments_from_widths
from densedrop.schedules import build_schedule
from densedrop.models import ModelConfig


@dataclass
class SurvivalRow:
    granularity: str
    prob: float
    units: int
    frequency: float
    sigma: float

    @property
    def z(self) -> float:
        return 0.0 if self.sigma == 0 else (self.frequency - self.prob) / self.sigma

    @property
    def ok(self) -> bool:
        if self.sigma == 0:
            return self.frequency == self.prob
        return abs(self.z) <= 3.0


def survival_frequency(granularity: Granularity, p: float, draws: int, rng: MaskRNG) -> SurvivalRow:
    """Survival frequency of ``draws`` independent Bernoulli units at probability ``p``."""
    # One channel and one segment: every granularity then yields one unit per sample.
    shape = (draws, 1, 2, 2) if granularity is not Granularity.UNIT else (draws // 4 or 1, 1, 2, 2)
    mask = sample_mask(shape, segments_from_widths([1]), [p], granularity, rng, dtype=np.float64)
    kept = mask.factors.reshape(-1) > 0
    n = kept.size
    return SurvivalRow(granularity.value, p, n, float(kept.mean()), float(np.sqrt(p * (1 - p) / n)))


def consumer_correlation(granularity: Granularity, p: float, draws: int, rng: MaskRNG) -> float:
    """Pearson correlation between two consumers' masks over the same source units."""
    shape = (draws, 1, 1, 1)
    spec = (shape, segments_from_widths([1]), [p])
    a, b = mask_family([spec, spec], granularity, rng)
    x, y = a.factors.reshape(-1).astype(np.float64), b.factors.reshape(-1).astype(np.float64)
    if x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def constancy_violations(mask) -> int:
    """Count (sample, unit) blocks that are not constant for the mask's granularity."""
    vals = np.asarray(mask.values)
    if mask.granularity is Granularity.UNIT:
        return 0
    bad = int((vals != vals[:, :, :1, :1]).any(axis=(2, 3)).sum())
    if mask.granularity is Granularity.LAYER:
        for seg in mask.segments:
            block = vals[:, seg.start : seg.stop]
            bad += int((block != block[:, :1]).any(axis=(1, 2, 3)).sum())
    return bad


def mask_report(config: ModelConfig, draws: int, seed: int = 0) -> List[str]:
    """Survival and independence estimates for every distinct probability of ``config``'s schedule."""
    rng = MaskRNG(seed)
    sched = build_schedule(config.schedule, config.layers_per_block, config.uniform_p)
    probs = sorted({round(p, 12) for _, _, p in sched.entries()})
    lines = [f"# mask statistics: granularity={config.granularity.value} schedule={config.schedule.value} draws={draws}"]
    lines.append("p        units     frequency  sigma      z       corr(j,j')  status")
    for k, p in enumerate(probs):
        row = survival_frequency(config.granularity, p, draws, rng.stream(0, k))
        rho = consumer_correlation(config.granularity, p, draws, rng.stream(1, k))
        status = "ok" if row.ok and abs(rho) < 0.01 else "FAIL"
        lines.append(
            f"{p:<8.4f} {row.units:<9d} {row.frequency:<10.5f} {row.sigma:<10.6f} {row.z:+7.2f} {rho:+11.5f}  {status}"
        )
    n = config.layers_per_block
    k = config.growth_rate
    widths = [2 * k] + [k] * n
    mask = sample_mask((8, sum(widths), 4, 4), segments_from_widths(widths), sched.consumer_probs(n + 1),
                       config.granularity, rng.stream(2))
    bad = constancy_violations(mask)
    lines.append(f"constancy violations ({config.granularity.value}): {bad}  {'ok' if bad == 0 else 'FAIL'}")
    return lines
