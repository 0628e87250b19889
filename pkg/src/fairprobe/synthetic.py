"""Seeded synthetic annotations and comparison scores with planted gender bias.

Ternary attributes come from thresholding a latent multivariate normal. Part
of each template's latent vector is shared by all templates of the identity
(``identity_persistence``), so genuine pairs tend to agree on attributes.
Genuine and impostor scores are normal draws clipped to [-1, 1]; a planted
rule lowers the genuine mean of one gender's pairs in which either partner
carries a given attribute label.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from fairprobe.decorrelation import ClusterModel
from fairprobe.domain import (
    FEMALE, GENDER_CODES, GENDERS, GENUINE, IMPOSTOR, MALE,
    AnnotationTable, ComparisonStore, DataError, genuine_pairs, impostor_pairs,
)
from fairprobe.equalize import Assignment


@dataclass(frozen=True)
class CorrelatedGroup:
    attributes: tuple
    rho: float
    signs: Optional[tuple] = None  # per-attribute sign, default all +1


@dataclass(frozen=True)
class PlantedRule:
    attribute: str
    label: int
    gender: str  # "M" or "F"
    shift: float


@dataclass(frozen=True)
class SyntheticConfig:
    n_identities_per_gender: int = 100
    images_per_identity: int = 20
    n_attributes: int = 8
    attribute_names: Optional[tuple] = None
    positive_rate: float = 0.45
    unclear_rate: float = 0.1
    # overrides: {attribute: {"M"|"F": positive rate}}
    gender_positive_rate: Dict[str, Dict[str, float]] = field(default_factory=dict)
    identity_persistence: float = 0.9
    correlated_groups: tuple = ()
    planted_rules: tuple = ()
    genuine_mean: float = 0.6
    genuine_std: float = 0.12
    impostor_mean: float = 0.0
    impostor_std: float = 0.1
    impostor_factor: float = 2.0
    seed: int = 0

    def __post_init__(self):
        names = self.names
        if len(set(names)) != len(names):
            raise ValueError("attribute names must be unique")
        if self.n_identities_per_gender < 2 or self.images_per_identity < 2:
            raise ValueError("need at least 2 identities per gender and 2 images per identity")
        for r in (self.positive_rate, self.unclear_rate, self.identity_persistence):
            if not 0.0 <= r <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if self.positive_rate + self.unclear_rate >= 1.0:
            raise ValueError("positive_rate + unclear_rate must be < 1")
        if not self.genuine_mean > self.impostor_mean:
            raise ValueError("genuine_mean must exceed impostor_mean")
        if self.genuine_std <= 0 or self.impostor_std <= 0:
            raise ValueError("score standard deviations must be positive")
        for rule in self.planted_rules:
            if rule.attribute not in names:
                raise ValueError(f"planted rule on unknown attribute {rule.attribute!r}")
            if rule.label not in (-1, 0, 1) or rule.gender not in GENDER_CODES:
                raise ValueError("planted rule needs label in {-1,0,1} and gender M/F")
            if not 0.0 < rule.shift < 1.0:
                raise ValueError("planted shift must be in (0, 1)")
        for grp in self.correlated_groups:
            unknown = set(grp.attributes) - set(names)
            if unknown:
                raise ValueError(f"correlated group references unknown {sorted(unknown)}")
            if not -1.0 <= grp.rho <= 1.0:
                raise ValueError("group rho must be in [-1, 1]")

    @property
    def names(self) -> tuple:
        if self.attribute_names is not None:
            return tuple(self.attribute_names)
        return tuple(f"attr_{k:02d}" for k in range(self.n_attributes))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        d["correlated_groups"] = tuple(
            CorrelatedGroup(tuple(g["attributes"]), float(g["rho"]),
                            tuple(g["signs"]) if g.get("signs") else None)
            for g in d.get("correlated_groups", ())
        )
        d["planted_rules"] = tuple(PlantedRule(**r) for r in d.get("planted_rules", ()))
        if d.get("attribute_names") is not None:
            d["attribute_names"] = tuple(d["attribute_names"])
            d.setdefault("n_attributes", len(d["attribute_names"]))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attribute_names"] = list(self.names)
        return d


def latent_covariance(config: SyntheticConfig) -> np.ndarray:
    names = config.names
    index = {n: i for i, n in enumerate(names)}
    cov = np.eye(len(names))
    for grp in config.correlated_groups:
        signs = grp.signs or (1,) * len(grp.attributes)
        for i, a in enumerate(grp.attributes):
            for j, b in enumerate(grp.attributes):
                if i != j:
                    cov[index[a], index[b]] = grp.rho * signs[i] * signs[j]
    return cov


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DataError("requested correlation structure is not positive definite") from None


def cut_points(positive: float, unclear: float):
    """Latent thresholds ``(lo, hi)``: below lo is -1, above hi is +1."""
    negative = 1.0 - positive - unclear
    return float(ndtri(negative)), float(ndtri(1.0 - positive))


def ternarize(latent: np.ndarray, lo, hi) -> np.ndarray:
    out = np.zeros(latent.shape, dtype=np.int8)
    out[latent < lo] = -1
    out[latent > hi] = 1
    return out


def _positive_rates(config: SyntheticConfig, gender_code: str) -> np.ndarray:
    rates = np.full(len(config.names), config.positive_rate)
    for name, per_gender in config.gender_positive_rate.items():
        if gender_code in per_gender:
            rates[config.names.index(name)] = per_gender[gender_code]
    return rates


def generate(config: SyntheticConfig):
    """Return ``(AnnotationTable, ComparisonStore)`` for ``config``."""
    names = config.names
    k = len(names)
    chol = _cholesky(latent_covariance(config))
    n_id, m = config.n_identities_per_gender, config.images_per_identity
    streams = np.random.SeedSequence(config.seed).spawn(2 * len(GENDERS) + 1)

    labels, gender, codes, identities = [], [], [], []
    for g, code in ((MALE, "M"), (FEMALE, "F")):
        rng = np.random.default_rng(streams[g])
        shared = rng.standard_normal((n_id, k)) @ chol.T
        own = rng.standard_normal((n_id * m, k)) @ chol.T
        p = config.identity_persistence
        latent = np.sqrt(p) * np.repeat(shared, m, axis=0) + np.sqrt(1.0 - p) * own
        pos = _positive_rates(config, code)
        lo = np.empty(k)
        hi = np.empty(k)
        for a in range(k):
            lo[a], hi[a] = cut_points(pos[a], config.unclear_rate)
        labels.append(ternarize(latent, lo, hi))
        gender.append(np.full(n_id * m, g, np.uint8))
        base = len(identities)
        codes.append(base + np.repeat(np.arange(n_id), m))
        identities.extend(f"{code.lower()}{i:05d}" for i in range(n_id))
    table = AnnotationTable(
        attribute_names=names,
        identities=tuple(identities),
        identity_codes=np.concatenate(codes),
        gender=np.concatenate(gender),
        labels=np.concatenate(labels),
    )

    cols = {k_: [] for k_ in ("a", "b", "score", "kind", "gender")}
    for g in GENDERS:
        rng = np.random.default_rng(streams[len(GENDERS) + g])
        members = np.flatnonzero(table.gender == g)
        ga, gb = genuine_pairs(members, table.identity_codes)
        gs = rng.normal(config.genuine_mean, config.genuine_std, ga.size)
        gender_code = "M" if g == MALE else "F"
        for rule in config.planted_rules:
            if rule.gender != gender_code:
                continue
            col = table.labels[:, names.index(rule.attribute)]
            hit = (col[ga] == rule.label) | (col[gb] == rule.label)
            gs[hit] -= rule.shift
        count = int(np.floor(config.impostor_factor * ga.size))
        ia, ib = impostor_pairs(members, table.identity_codes, count, rng)
        is_ = rng.normal(config.impostor_mean, config.impostor_std, ia.size)
        for a, b, s, kind in ((ga, gb, gs, GENUINE), (ia, ib, is_, IMPOSTOR)):
            cols["a"].append(a)
            cols["b"].append(b)
            cols["score"].append(np.clip(s, -1.0, 1.0))
            cols["kind"].append(np.full(a.size, kind, np.uint8))
            cols["gender"].append(np.full(a.size, g, np.uint8))
    store = ComparisonStore(*(np.concatenate(cols[c]) for c in ("a", "b", "score", "kind", "gender")))
    return table, store


def expected_recovery(config: SyntheticConfig,
                      model: Optional[ClusterModel] = None) -> frozenset:
    """Assignments whose equalization removes the planted shifts.

    Both labels of the affected attribute (or of the cluster that absorbed it)
    make the attribute shared across genders.
    """
    if not config.planted_rules:
        raise ValueError("config has no planted rules")
    out = set()
    for rule in config.planted_rules:
        name = rule.attribute
        if model is not None:
            idx = model.attribute_names.index(rule.attribute)
            name = next(c.name for c in model.clusters if idx in c.members)
        out.add(Assignment(name, 1))
        out.add(Assignment(name, -1))
    return frozenset(out)
