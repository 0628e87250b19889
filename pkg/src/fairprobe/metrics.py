"""Verification error rates at a fixed FMR and Gini-based group fairness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EPS = 2.0 ** -52


@dataclass(frozen=True)
class OperatingPoint:
    fmr_target: float = 1e-3
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.fmr_target < 1.0:
            raise ValueError(f"fmr_target must be in (0, 1), got {self.fmr_target}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class GroupRates:
    group: str
    fmr: float
    fnmr: float

    def __post_init__(self):
        for v in (self.fmr, self.fnmr):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"rates must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class EvalResult:
    """Metrics of one equalized evaluation, averaged over the repetitions.

    ``per_group`` holds the mean FMR/FNMR of each gender at the per-repetition
    shared threshold. ``fnmr_total`` is the pooled FNMR of the first
    repetition; ``fnmr_total_mean`` averages it over all repetitions.
    """

    per_group: tuple
    fnmr_total: float
    igarbe_mean: float
    igarbe_std: float
    fnmr_total_mean: float
    retained_genuine: int
    threshold_mean: float
    repetitions: int

    def rates(self, group: str) -> GroupRates:
        for r in self.per_group:
            if r.group == group:
                return r
        raise KeyError(group)

    def to_dict(self) -> dict:
        male, female = self.rates("male"), self.rates("female")
        return {
            "igarbe_mean": self.igarbe_mean,
            "igarbe_std": self.igarbe_std,
            "fnmr_total_mean": self.fnmr_total_mean,
            "fnmr_male": male.fnmr,
            "fnmr_female": female.fnmr,
            "fmr_male": male.fmr,
            "fmr_female": female.fmr,
            "threshold_mean": self.threshold_mean,
            "retained_genuine": self.retained_genuine,
            "repetitions": self.repetitions,
            "fnmr_total": self.fnmr_total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(
            per_group=(
                GroupRates("male", d["fmr_male"], d["fnmr_male"]),
                GroupRates("female", d["fmr_female"], d["fnmr_female"]),
            ),
            fnmr_total=d.get("fnmr_total", d["fnmr_total_mean"]),
            igarbe_mean=d["igarbe_mean"],
            igarbe_std=d["igarbe_std"],
            fnmr_total_mean=d["fnmr_total_mean"],
            retained_genuine=int(d["retained_genuine"]),
            threshold_mean=d["threshold_mean"],
            repetitions=int(d["repetitions"]),
        )


def threshold_at_fmr(impostor_scores, fmr_target: float) -> float:
    """Smallest observed score whose acceptance rate does not exceed the target.

    Acceptance is ``score >= threshold``. When even the maximum score is
    accepted too often (all tied, or fewer than one allowed false match),
    the threshold is placed just above the maximum so that FMR is 0.
    """
    s = np.asarray(impostor_scores, dtype=np.float64).ravel()
    n = s.size
    if n == 0:
        raise ValueError("threshold_at_fmr needs at least one impostor score")
    if not 0.0 < fmr_target < 1.0:
        raise ValueError(f"fmr_target must be in (0, 1), got {fmr_target}")
    # largest number of accepted impostors k with k / n <= target
    k = int(np.floor(fmr_target * n))
    while k + 1 <= n and (k + 1) / n <= fmr_target:
        k += 1
    while k > 0 and k / n > fmr_target:
        k -= 1
    top_max = float(s.max())
    if k == 0:
        return top_max + EPS * abs(top_max) + EPS
    if k >= n:
        return float(s.min())
    top = np.partition(s, n - k - 1)[n - k - 1:]
    cut = top[0]  # (k+1)-th largest
    above = top[top > cut]
    if above.size == 0:
        return top_max + EPS * abs(top_max) + EPS
    return float(above.min())


def error_rates(genuine_scores, impostor_scores, threshold: float):
    """Return ``(fmr, fnmr)`` at ``threshold`` with the accept rule ``score >= threshold``."""
    gen = np.asarray(genuine_scores, dtype=np.float64).ravel()
    imp = np.asarray(impostor_scores, dtype=np.float64).ravel()
    if np.isnan(threshold):
        raise ValueError("threshold must not be NaN")
    if gen.size == 0:
        raise ValueError("FNMR is undefined without genuine scores")
    fnmr = np.count_nonzero(gen < threshold) / gen.size
    fmr = np.count_nonzero(imp >= threshold) / imp.size if imp.size else 0.0
    return float(fmr), float(fnmr)


def gini(values: Sequence[float]) -> float:
    """Sample-size corrected Gini coefficient (double-sum form).

    Returns 0 when all values are zero.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise ValueError("sample-size corrected Gini undefined for fewer than 2 values")
    mean = x.mean()
    if mean == 0.0:
        return 0.0
    total = np.abs(x[:, None] - x[None, :]).sum()
    return float((n / (n - 1)) * total / (2.0 * n * n * mean))


def garbe(group_rates: Sequence[GroupRates], alpha: float = 0.5) -> float:
    if len(group_rates) < 2:
        raise ValueError("GARBE needs at least two groups")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    a = gini([r.fmr for r in group_rates])
    b = gini([r.fnmr for r in group_rates])
    return alpha * a + (1.0 - alpha) * b


def igarbe(group_rates: Sequence[GroupRates], alpha: float = 0.5) -> float:
    return 1.0 - garbe(group_rates, alpha)


@dataclass
class Repetition:
    """Scores of one sampled repetition, keyed by group name."""

    genuine: dict = field(default_factory=dict)
    impostor: dict = field(default_factory=dict)


def evaluate_groups(repetitions: Sequence[Repetition], op: OperatingPoint = OperatingPoint(),
                    retained_genuine: int = 0) -> EvalResult:
    """Shared-threshold per-group rates and iGARBE over all repetitions.

    In each repetition the threshold is taken from the pooled impostor scores
    of all groups; group rates are read at that single threshold.
    """
    if not repetitions:
        raise ValueError("at least one repetition is required")
    groups = None
    igs, totals, taus = [], [], []
    per_group = {}
    for r, rep in enumerate(repetitions):
        names = sorted(rep.genuine, key=lambda g: (g != "male", g))
        if groups is None:
            groups = names
        elif names != groups or sorted(rep.impostor) != sorted(groups):
            raise ValueError(f"repetition {r}: inconsistent groups")
        for g in groups:
            if len(rep.genuine.get(g, ())) == 0:
                raise ValueError(f"repetition {r}: empty genuine set for {g}")
            if len(rep.impostor.get(g, ())) == 0:
                raise ValueError(f"repetition {r}: empty impostor set for {g}")
        pooled_imp = np.concatenate([np.asarray(rep.impostor[g], np.float64) for g in groups])
        pooled_gen = np.concatenate([np.asarray(rep.genuine[g], np.float64) for g in groups])
        tau = threshold_at_fmr(pooled_imp, op.fmr_target)
        rates = []
        for g in groups:
            fmr, fnmr = error_rates(rep.genuine[g], rep.impostor[g], tau)
            rates.append(GroupRates(g, fmr, fnmr))
            per_group.setdefault(g, []).append((fmr, fnmr))
        _, total = error_rates(pooled_gen, pooled_imp, tau)
        igs.append(igarbe(rates, op.alpha))
        totals.append(total)
        taus.append(tau)
    ddof = 1 if len(igs) > 1 else 0
    mean_rates = tuple(
        GroupRates(g, float(np.mean([v[0] for v in per_group[g]])),
                   float(np.mean([v[1] for v in per_group[g]])))
        for g in groups
    )
    return EvalResult(
        per_group=mean_rates,
        fnmr_total=float(totals[0]),
        igarbe_mean=float(np.mean(igs)),
        igarbe_std=float(np.std(igs, ddof=ddof)),
        fnmr_total_mean=float(np.mean(totals)),
        retained_genuine=int(retained_genuine),
        threshold_mean=float(np.mean(taus)),
        repetitions=len(igs),
    )
