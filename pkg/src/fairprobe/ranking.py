"""Relevance of a candidate assignment for the combination search.

Three sigmoid-shaped factors are averaged: genuine-sample retention, change in
total FNMR against the baseline, and change in iGARBE against the baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

LN4 = math.log(4.0)


@dataclass(frozen=True)
class RankingParams:
    mu: float = 1.3865
    lam: float = 4.0
    omega: float = 4.0
    fmr: float = 1e-3

    def __post_init__(self):
        for name in ("mu", "lam", "omega", "fmr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class RankScore:
    r_total: float
    r_s: float
    r_p: float
    r_f: float

    def to_dict(self) -> dict:
        return {"r_total": self.r_total, "r_s": self.r_s, "r_p": self.r_p, "r_f": self.r_f}


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def retention_score(n_genuine: float, fmr: float, mu: float) -> float:
    # exactly sigmoid(-ln 4) = 0.2 at n_genuine = 1 / fmr
    return sigmoid(-fmr * n_genuine * (LN4 - mu) - mu)


def performance_score(fnmr_i: float, fnmr_0: float, lam: float) -> float:
    return sigmoid(lam * (fnmr_0 - fnmr_i))


def fairness_score(f_i: float, f_0: float, omega: float) -> float:
    return sigmoid(omega * (f_i - f_0))


def rank(n_i: float, fnmr_i: float, fnmr_0: float, f_i: float, f_0: float,
         params: RankingParams = RankingParams()) -> RankScore:
    if n_i < 0:
        raise ValueError("genuine count must be non-negative")
    r_s = retention_score(n_i, params.fmr, params.mu)
    r_p = performance_score(fnmr_i, fnmr_0, params.lam)
    r_f = fairness_score(f_i, f_0, params.omega)
    return RankScore((r_s + r_p + r_f) / 3.0, r_s, r_p, r_f)
