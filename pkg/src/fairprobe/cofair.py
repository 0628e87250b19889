"""Contextualized fairness: where a score sits in a system's iGARBE distribution.

The distribution is a Gaussian KDE over single-assignment iGARBE scores, and
CoFair is its CDF. For a Gaussian kernel the CDF has the closed form
``mean_i Phi((s - x_i) / h)``; Phi comes from ``scipy.special.ndtr``, which is
accurate to double precision over the whole real line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np
from scipy.special import ndtr

# bandwidth multiplier applied on top of Scott's rule
BANDWIDTH_ADJUST = 0.5
# results more than 10 % worse than baseline FNMR are unrepresentative
FNMR_TOLERANCE = 1.1

_LO = np.nextafter(0.0, 1.0)
_HI = np.nextafter(1.0, 0.0)


class DegenerateDistribution(ValueError):
    pass


@dataclass(frozen=True)
class FairnessDistribution:
    samples: tuple
    bandwidth: float

    def __post_init__(self):
        if len(self.samples) == 0:
            raise DegenerateDistribution("distribution needs at least one sample")
        if not self.bandwidth > 0:
            raise DegenerateDistribution(f"bandwidth must be positive, got {self.bandwidth}")

    def density(self, points) -> np.ndarray:
        x = np.asarray(self.samples, dtype=np.float64)
        t = np.atleast_1d(np.asarray(points, dtype=np.float64))
        z = (t[:, None] - x[None, :]) / self.bandwidth
        return np.exp(-0.5 * z * z).sum(axis=1) / (x.size * self.bandwidth * np.sqrt(2 * np.pi))

    def to_json(self) -> str:
        return json.dumps({"samples": list(self.samples), "bandwidth": self.bandwidth}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FairnessDistribution":
        d = json.loads(text)
        return cls(tuple(float(v) for v in d["samples"]), float(d["bandwidth"]))


def scott_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    return float(x.std(ddof=1) * x.size ** (-1.0 / 5.0))


def fit_distribution(audit_results: Iterable[Tuple[float, float]],
                     baseline_fnmr: float) -> FairnessDistribution:
    """Fit the KDE from ``(igarbe, fnmr_total)`` pairs.

    Only results with ``fnmr_total <= 1.1 * baseline_fnmr`` are kept.
    """
    cutoff = FNMR_TOLERANCE * baseline_fnmr
    kept = [float(ig) for ig, fnmr in audit_results if fnmr <= cutoff]
    if len(kept) < 2:
        raise DegenerateDistribution(
            f"only {len(kept)} result(s) within FNMR cutoff {cutoff:.6g}; need at least 2"
        )
    h = BANDWIDTH_ADJUST * scott_bandwidth(kept)
    if h == 0.0:
        raise DegenerateDistribution("retained iGARBE scores have zero variance")
    return FairnessDistribution(tuple(kept), h)


def cofair(dist: FairnessDistribution, s):
    """Probability that a score drawn from ``dist`` does not exceed ``s``.

    Accepts a scalar or an array. Values are clamped into the open unit
    interval.
    """
    x = np.asarray(dist.samples, dtype=np.float64)
    q = np.asarray(s, dtype=np.float64)
    z = (q[..., None] - x) / dist.bandwidth
    p = np.clip(ndtr(z).mean(axis=-1), _LO, _HI)
    return float(p) if p.ndim == 0 else p


def density_curve(dist: FairnessDistribution, step: float = 0.001):
    """``(score, density)`` on ``[0, 1]``."""
    n = int(round(1.0 / step))
    grid = np.arange(n + 1) * step
    return grid, dist.density(grid)


def write_density_csv(dist: FairnessDistribution, path, step: float = 0.001) -> None:
    grid, dens = density_curve(dist, step)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("score,density\n")
        for g, d in zip(grid, dens):
            fh.write(f"{g:.3f},{d:.10g}\n")
