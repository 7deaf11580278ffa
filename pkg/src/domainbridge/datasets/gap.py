"""Channel-statistics proxy for the appearance gap between image sets.

Each set is summarised by per-channel pixel mean and std; two sets are
compared with the symmetrized KL divergence between the fitted univariate
Gaussians, averaged over channels. This is a coarse diagnostic only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from domainbridge.datasets.records import DatasetManifest

STD_FLOOR = 1e-6


@dataclass
class DomainGapReport:
    mean_1: np.ndarray
    std_1: np.ndarray
    mean_2: np.ndarray
    std_2: np.ndarray
    kl_proxy: float
    per_channel: np.ndarray
    degenerate: bool = False
    pairwise: dict[tuple[str, str], float] = field(default_factory=dict)


def gaussian_kl_sym(mu1, sigma1, mu2, sigma2):
    """KL(N1 || N2) + KL(N2 || N1) for univariate Gaussians (broadcasts)."""
    v1 = np.square(sigma1)
    v2 = np.square(sigma2)
    d2 = np.square(np.asarray(mu1) - np.asarray(mu2))
    return 0.5 * (v1 / v2 + v2 / v1 - 2.0) + 0.5 * d2 * (1.0 / v1 + 1.0 / v2)


def channel_stats(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    # running sums in float64, one image at a time
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for s in manifest.samples:
        px = s.load_image().reshape(-1, 3).astype(np.float64)
        total += px.sum(axis=0)
        total_sq += np.square(px).sum(axis=0)
        count += px.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - np.square(mean), 0.0)
    return mean, np.sqrt(var)


def domain_gap_estimate(S1: DatasetManifest, S2: DatasetManifest) -> DomainGapReport:
    if not len(S1) or not len(S2):
        raise ValueError("both image sets must be non-empty")
    m1, s1 = channel_stats(S1)
    m2, s2 = channel_stats(S2)
    degenerate = bool((s1 < STD_FLOOR).any() or (s2 < STD_FLOOR).any())
    s1c, s2c = np.maximum(s1, STD_FLOOR), np.maximum(s2, STD_FLOOR)
    per_channel = gaussian_kl_sym(m1, s1c, m2, s2c)
    return DomainGapReport(m1, s1, m2, s2, float(per_channel.mean()), per_channel, degenerate)


def pairwise_gap_table(sets: dict[str, DatasetManifest]) -> dict[tuple[str, str], float]:
    """kl_proxy for every ordered pair of named sets."""
    stats = {k: channel_stats(v) for k, v in sets.items()}
    table = {}
    for a, (ma, sa) in stats.items():
        for b, (mb, sb) in stats.items():
            kl = gaussian_kl_sym(ma, np.maximum(sa, STD_FLOOR), mb, np.maximum(sb, STD_FLOOR))
            table[(a, b)] = float(np.mean(kl))
    return table
