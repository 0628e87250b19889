"""Equalization: filter comparisons by an assignment combination, then draw
gender-balanced sample sets and evaluate them.

Filtering keeps a comparison only when both partner templates satisfy every
assignment. Sampling draws ``gamma`` disjoint genuine sets and ``gamma``
impostor sets per gender, all of equal size across genders, honouring a fixed
genuine-to-impostor ratio.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, Optional

import numpy as np

from fairprobe.decorrelation import Cluster, ClusterModel
from fairprobe.domain import (
    FEMALE, GENDER_NAMES, GENDERS, GENUINE, IMPOSTOR, MALE,
    AnnotationTable, ComparisonStore,
)
from fairprobe.metrics import EvalResult, OperatingPoint, Repetition, evaluate_groups


@dataclass(frozen=True, order=True)
class Assignment:
    cluster: str
    label: int

    def __post_init__(self):
        if self.label not in (1, -1):
            raise ValueError(f"assignment label must be +1 or -1, got {self.label}")
        if not self.cluster or any(ch in self.cluster for ch in ";="):
            raise ValueError(f"cluster name {self.cluster!r} cannot be encoded")

    def encode(self) -> str:
        return f"{self.cluster}={'+1' if self.label > 0 else '-1'}"


class Combination(frozenset):
    """A set of assignments, at most one per cluster. Empty means no filter."""

    def __new__(cls, assignments: Iterable[Assignment] = ()):
        self = super().__new__(cls, assignments)
        clusters = [a.cluster for a in self]
        if len(set(clusters)) != len(clusters):
            raise ValueError("a combination may assign each cluster at most once")
        return self

    @property
    def clusters(self) -> frozenset:
        return frozenset(a.cluster for a in self)

    def sorted(self):
        return sorted(self, key=lambda a: (a.cluster, -a.label))

    def encode(self) -> str:
        """Canonical text form, e.g. ``Bangs=-1;Eyewear=+1``; empty string for the baseline."""
        return ";".join(a.encode() for a in self.sorted())

    @classmethod
    def decode(cls, text: str) -> "Combination":
        if not text:
            return cls()
        out = []
        for part in text.split(";"):
            name, _, lab = part.rpartition("=")
            if lab not in ("+1", "-1") or not name:
                raise ValueError(f"bad assignment encoding {part!r}")
            out.append(Assignment(name, int(lab)))
        return cls(out)

    def extend(self, assignment: Assignment) -> "Combination":
        return Combination(set(self) | {assignment})

    def __repr__(self):
        return f"Combination({self.encode()!r})"


@dataclass(frozen=True)
class SamplingParams:
    rho_s: float = 0.2
    gamma: int = 3
    lambda_g: Optional[int] = None  # None: 1 / FMR

    def __post_init__(self):
        if not 0.0 < self.rho_s <= 1.0:
            raise ValueError(f"rho_s must be in (0, 1], got {self.rho_s}")
        if self.gamma < 1:
            raise ValueError("gamma must be at least 1")
        if self.lambda_g is not None and self.lambda_g < 1:
            raise ValueError("lambda_g must be at least 1")

    def resolved_lambda_g(self, fmr: float) -> int:
        return self.lambda_g if self.lambda_g is not None else int(round(1.0 / fmr))


def _ratio(rho_s: float) -> Fraction:
    return Fraction(rho_s).limit_denominator(10 ** 6)


@dataclass(frozen=True)
class SampleSizes:
    c_g: int
    c_i: int
    keep_all_impostors: bool


def plan_sizes(genuine_counts: Dict[int, int], impostor_counts: Dict[int, int],
               rho_s: float, lambda_g: int, gamma: int) -> Optional[SampleSizes]:
    """Per-set sample sizes, or ``None`` if the lower bounds cannot be met.

    The ratio guard compares ``c_g_disjoint / rho_s`` (impostors needed to
    keep every genuine sample) with the available impostors.
    """
    rho = _ratio(rho_s)
    c_g_plus = min(genuine_counts.values())
    c_i_plus = min(impostor_counts.values())
    c_g_disjoint = c_g_plus // gamma
    lambda_i = math.floor(lambda_g / rho)
    if c_g_disjoint < lambda_g or c_i_plus < lambda_i:
        return None
    if c_g_disjoint / rho > c_i_plus:
        return SampleSizes(math.floor(c_i_plus * rho), c_i_plus, True)
    return SampleSizes(c_g_disjoint, math.floor(c_g_disjoint / rho), False)


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Independent stream for ``(seed, *parts)``; order of evaluation is irrelevant."""
    text = "\x1f".join(str(p) for p in (seed, *parts))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


@dataclass(frozen=True)
class SampleSets:
    """Indices into the per-gender filtered genuine/impostor arrays."""

    genuine: Dict[int, tuple]
    impostor: Dict[int, tuple]
    c_g: int
    c_i: int


def sample(genuine_sizes: Dict[int, int], impostor_sizes: Dict[int, int],
           rho_s: float, lambda_g: int, gamma: int, seed: int,
           key: str = "") -> Optional[SampleSets]:
    """Draw equal-sized sample sets per gender, or ``None`` when too few samples remain.

    ``genuine_sizes``/``impostor_sizes`` map gender to the number of filtered
    comparisons of that kind. Returned indices refer to those filtered arrays.
    """
    sizes = plan_sizes(genuine_sizes, impostor_sizes, rho_s, lambda_g, gamma)
    if sizes is None:
        return None
    gen, imp = {}, {}
    for g in sorted(genuine_sizes):
        rng = derive_rng(seed, key, g, "genuine")
        drawn = rng.choice(genuine_sizes[g], size=gamma * sizes.c_g, replace=False)
        gen[g] = tuple(np.sort(drawn[k * sizes.c_g:(k + 1) * sizes.c_g]) for k in range(gamma))
        sets = []
        for k in range(gamma):
            rng = derive_rng(seed, key, g, "impostor", k)
            sets.append(np.sort(rng.choice(impostor_sizes[g], size=sizes.c_i, replace=False)))
        imp[g] = tuple(sets)
    return SampleSets(gen, imp, sizes.c_g, sizes.c_i)


# -- filtering ----------------------------------------------------------------

def required_labels(model: ClusterModel, combo: Combination) -> Dict[int, int]:
    """Raw label every constrained attribute must carry."""
    req = {}
    for a in combo:
        req.update(model.cluster(a.cluster).required_raw_labels(a.label))
    return req


def template_mask(table: AnnotationTable, requirements: Dict[int, int]) -> np.ndarray:
    """Templates whose labels match every requirement exactly (0 never matches)."""
    mask = np.ones(len(table), dtype=bool)
    for attr, lab in sorted(requirements.items()):
        mask &= table.labels[:, attr] == lab
    return mask


def semi_join(column: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Rows of ``column`` whose template id is in the boolean template selection."""
    return selected[column]


def filter_comparisons(store: ComparisonStore, table: AnnotationTable,
                       model: ClusterModel, combo: Combination) -> ComparisonStore:
    """Comparisons in which both partners satisfy ``combo``."""
    if not combo:
        return store
    selected = template_mask(table, required_labels(model, combo))
    rows_a = semi_join(store.idx_a, selected)
    rows_b = semi_join(store.idx_b, selected)
    return store.subset(rows_a & rows_b)


class SplitStore:
    """Comparisons split by gender and kind, ready for repeated equalization."""

    def __init__(self, store: ComparisonStore, table: AnnotationTable):
        store.validate(table)
        self.table = table
        self.fingerprint = store.fingerprint
        self.parts = {}
        for g in GENDERS:
            for kind in (GENUINE, IMPOSTOR):
                sel = (store.gender == g) & (store.kind == kind)
                self.parts[g, kind] = (store.idx_a[sel], store.idx_b[sel], store.score[sel])

    def masks(self, selected: Optional[np.ndarray]):
        out = {}
        for key, (a, b, _) in self.parts.items():
            out[key] = None if selected is None else (selected[a] & selected[b])
        return out

    def counts(self, selected: Optional[np.ndarray]) -> Dict[tuple, int]:
        out = {}
        for key, (a, b, _) in self.parts.items():
            out[key] = a.size if selected is None else int(np.count_nonzero(selected[a] & selected[b]))
        return out

    def selection(self, model: ClusterModel, combo: Combination) -> Optional[np.ndarray]:
        if not combo:
            return None
        return template_mask(self.table, required_labels(model, combo))


@dataclass(frozen=True)
class Insufficient:
    """Sampling bounds were not met for a combination."""

    retained_genuine: int
    reason: str = "not enough samples for both genders"

    def to_dict(self) -> dict:
        return {"insufficient": True, "retained_genuine": self.retained_genuine,
                "reason": self.reason}


def equalize(combo: Combination, data: SplitStore, model: ClusterModel,
             op: OperatingPoint = OperatingPoint(), params: SamplingParams = SamplingParams(),
             seed: int = 0):
    """Filter, sample and evaluate one combination.

    Returns an :class:`EvalResult`, or :class:`Insufficient` when the sampling
    bounds cannot be met.
    """
    selected = data.selection(model, combo)
    masks = data.masks(selected)
    scores = {}
    for key, (_, _, s) in data.parts.items():
        scores[key] = s if masks[key] is None else s[masks[key]]
    retained = scores[MALE, GENUINE].size + scores[FEMALE, GENUINE].size
    lambda_g = params.resolved_lambda_g(op.fmr_target)
    sets = sample(
        {g: scores[g, GENUINE].size for g in GENDERS},
        {g: scores[g, IMPOSTOR].size for g in GENDERS},
        params.rho_s, lambda_g, params.gamma, seed, key=combo.encode(),
    )
    if sets is None:
        return Insufficient(retained)
    reps = []
    for k in range(params.gamma):
        rep = Repetition()
        for g in GENDERS:
            name = GENDER_NAMES[g]
            rep.genuine[name] = scores[g, GENUINE][sets.genuine[g][k]]
            rep.impostor[name] = scores[g, IMPOSTOR][sets.impostor[g][k]]
        reps.append(rep)
    return evaluate_groups(reps, op, retained_genuine=retained)


class SamplingProbe:
    """Tells whether a cluster label leaves enough samples for both genders."""

    def __init__(self, data: SplitStore, op: OperatingPoint = OperatingPoint(),
                 params: SamplingParams = SamplingParams()):
        self.data = data
        self.params = params
        self.lambda_g = params.resolved_lambda_g(op.fmr_target)

    def __call__(self, cluster: Cluster, label: int) -> bool:
        selected = template_mask(self.data.table, cluster.required_raw_labels(label))
        counts = self.data.counts(selected)
        sizes = plan_sizes(
            {g: counts[g, GENUINE] for g in GENDERS},
            {g: counts[g, IMPOSTOR] for g in GENDERS},
            self.params.rho_s, self.lambda_g, self.params.gamma,
        )
        return sizes is not None
