"""Correlated-attribute clustering and sign harmonization of clusters.

Attributes are merged greedily by mean absolute Pearson correlation (average
linkage). After every merge the new cluster is harmonized: members that
correlate negatively with a reference member are inverted, which flips their
non-zero labels, prefixes their name with ``"Not "`` and flips the sign of
their rows/columns in the correlation matrix.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fairprobe.domain import AnnotationTable, DataError, InsufficientSamples

log = logging.getLogger(__name__)

NOT_PREFIX = "Not "


class HarmonizationError(ValueError):
    """A cluster cannot be sign-normalized to all non-negative correlations."""


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    names: tuple
    r: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=np.float64)
        r.flags.writeable = False
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "names", tuple(self.names))

    def flipped(self, idx: Sequence[int], names: Sequence[str]) -> "CorrelationMatrix":
        sign = np.ones(len(self.names))
        sign[list(idx)] = -1.0
        r = self.r * sign[:, None] * sign[None, :]
        return CorrelationMatrix(tuple(names), r)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["attribute", *self.names])
            for name, row in zip(self.names, self.r):
                w.writerow([name, *(f"{v:.12g}" for v in row)])


def pearson_matrix(table: AnnotationTable) -> CorrelationMatrix:
    """Pearson correlation of all attribute pairs over the raw ternary labels."""
    x = table.labels.astype(np.float64)
    if x.shape[0] < 2:
        raise DataError("Pearson correlation needs at least 2 templates")
    xc = x - x.mean(axis=0)
    ss = np.einsum("ij,ij->j", xc, xc)
    const = np.flatnonzero(ss == 0)
    if const.size:
        raise DataError(f"attribute {table.attribute_names[const[0]]!r} is constant")
    norm = np.sqrt(ss)
    r = (xc.T @ xc) / np.outer(norm, norm)
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return CorrelationMatrix(table.attribute_names, r)


def cluster_correlation(a: Sequence[int], b: Sequence[int], m: CorrelationMatrix) -> float:
    """Mean absolute correlation over all cross pairs of two disjoint clusters."""
    a, b = sorted(a), sorted(b)
    if set(a) & set(b):
        raise ValueError("clusters must be disjoint")
    if not a or not b:
        raise ValueError("clusters must be non-empty")
    return float(np.abs(m.r[np.ix_(a, b)]).mean())


def clustering_step(clusters: Sequence[Tuple[int, ...]], m: CorrelationMatrix,
                    base_names: Optional[Sequence[str]] = None):
    """Merge the two most correlated clusters.

    Returns ``(new_clusters, (a, b))``. Ties on the correlation are broken by
    the lexicographically smallest pair of sorted member-name tuples.
    """
    if len(clusters) < 2:
        raise ValueError("clustering needs at least two clusters")
    names = tuple(base_names) if base_names is not None else m.names
    keyed = [(tuple(sorted(names[i] for i in c)), tuple(sorted(c))) for c in clusters]
    best = None
    for i in range(len(keyed)):
        for j in range(i + 1, len(keyed)):
            v = cluster_correlation(keyed[i][1], keyed[j][1], m)
            tie = tuple(sorted((keyed[i][0], keyed[j][0])))
            if best is None or v > best[0] or (v == best[0] and tie < best[1]):
                best = (v, tie, i, j)
    _, _, i, j = best
    a, b = keyed[i][1], keyed[j][1]
    merged = tuple(sorted(a + b))
    rest = [tuple(sorted(c)) for k, c in enumerate(clusters) if k not in (i, j)]
    out = sorted(rest + [merged], key=min)
    return out, (a, b)


def display_name(base: str, inverted: bool) -> str:
    return NOT_PREFIX + base if inverted else base


@dataclass(frozen=True)
class Cluster:
    members: tuple
    inverted: tuple
    name: str
    consistent: bool = True

    def required_raw_labels(self, label: int) -> Dict[int, int]:
        """Raw (un-harmonized) label each member attribute must carry."""
        return {a: (-label if inv else label) for a, inv in zip(self.members, self.inverted)}


@dataclass
class ClusterModel:
    attribute_names: tuple
    clusters: tuple
    iteration: int
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        seen = sorted(a for c in self.clusters for a in c.members)
        if seen != list(range(len(self.attribute_names))):
            raise ValueError("clusters must partition the attribute set")
        names = [c.name for c in self.clusters]
        if len(set(names)) != len(names):
            raise ValueError("cluster names must be unique")

    def cluster(self, name: str) -> Cluster:
        for c in self.clusters:
            if c.name == name:
                return c
        raise KeyError(f"unknown cluster {name!r}")

    @property
    def inversion(self) -> np.ndarray:
        inv = np.zeros(len(self.attribute_names), dtype=bool)
        for c in self.clusters:
            for a, f in zip(c.members, c.inverted):
                inv[a] = f
        return inv

    def harmonized_names(self) -> tuple:
        inv = self.inversion
        return tuple(display_name(n, bool(f)) for n, f in zip(self.attribute_names, inv))

    def harmonized_labels(self, table: AnnotationTable) -> np.ndarray:
        if table.attribute_names != self.attribute_names:
            raise ValueError("table attributes do not match the cluster model")
        sign = np.where(self.inversion, -1, 1).astype(np.int8)
        return table.labels * sign

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "attributes": list(self.attribute_names),
            "clusters": [
                {
                    "name": c.name,
                    "consistent": c.consistent,
                    "members": [
                        {"attribute": self.attribute_names[a], "inverted": bool(f)}
                        for a, f in zip(c.members, c.inverted)
                    ],
                }
                for c in self.clusters
            ],
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        names = tuple(d["attributes"])
        index = {n: i for i, n in enumerate(names)}
        clusters = []
        for c in d["clusters"]:
            members = tuple(index[m["attribute"]] for m in c["members"])
            inverted = tuple(bool(m["inverted"]) for m in c["members"])
            clusters.append(Cluster(members, inverted, c["name"], c.get("consistent", True)))
        return cls(names, tuple(clusters), int(d["iteration"]), list(d.get("diagnostics", [])))

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        return cls.from_dict(json.loads(text))

    @classmethod
    def singletons(cls, attribute_names: Sequence[str]) -> "ClusterModel":
        clusters = tuple(Cluster((i,), (False,), n) for i, n in enumerate(attribute_names))
        return cls(tuple(attribute_names), clusters, 0)


def harmonize(cluster: Cluster, table: AnnotationTable, m: CorrelationMatrix,
              base_names: Optional[Sequence[str]] = None):
    """Sign-normalize ``cluster`` so all of its pairwise correlations are >= 0.

    ``table`` and ``m`` are the current (already partly harmonized) label
    table and correlation matrix. Returns ``(cluster, table, m)``; the inputs
    are left untouched. Raises :class:`HarmonizationError` if some pair stays
    negative after inverting against the reference member.
    """
    members = list(cluster.members)
    if len(members) < 2:
        raise ValueError("harmonization needs a cluster with at least two members")
    base = tuple(base_names) if base_names is not None else table.attribute_names
    sub = m.r[np.ix_(members, members)]
    iu = np.triu_indices(len(members), 1)
    lo = int(np.argmin(sub[iu]))
    if sub[iu][lo] >= 0:
        return cluster, table, m
    p, q = members[iu[0][lo]], members[iu[1][lo]]
    ref = min((p, q), key=lambda a: base[a])
    flip = [a for a in members if a != ref and m.r[ref, a] < 0]

    cur_inv = dict(zip(cluster.members, cluster.inverted))
    new_inv = {a: (not cur_inv[a]) if a in flip else cur_inv[a] for a in members}
    new_names = list(table.attribute_names)
    for a in flip:
        new_names[a] = display_name(base[a], new_inv[a])
    m2 = m.flipped(flip, new_names)

    sub2 = m2.r[np.ix_(members, members)]
    bad = [(members[i], members[j]) for i, j in zip(*iu) if sub2[i, j] < 0]
    if bad:
        a, b = bad[0]
        raise HarmonizationError(
            f"cluster {cluster.name!r}: {new_names[a]!r} and {new_names[b]!r} stay "
            f"negatively correlated (r={m2.r[a, b]:.4f}) after harmonization"
        )
    labels = table.labels.copy()
    if flip:
        labels[:, flip] *= -1
    table2 = table.with_labels(labels, new_names)
    cluster2 = Cluster(
        cluster.members, tuple(new_inv[a] for a in cluster.members), cluster.name,
        cluster.consistent,
    )
    return cluster2, table2, m2


def _cluster_name(members, inverted, base, aliases: Mapping[str, Sequence[str]]) -> str:
    if len(members) == 1:
        return base[members[0]]
    key = frozenset(base[a] for a in members)
    for alias, group in aliases.items():
        if frozenset(group) == key:
            return alias
    return " + ".join(display_name(base[a], f) for a, f in zip(members, inverted))


def inter_cluster_stats(clusters: Sequence[Tuple[int, ...]], m: CorrelationMatrix):
    """Mean/std of |r| over attribute pairs in different clusters, and the maximum
    cluster-to-cluster mean |r|. NaN when only one cluster is left."""
    if len(clusters) < 2:
        return float("nan"), float("nan"), float("nan")
    label = np.empty(len(m.names), dtype=np.int64)
    for k, c in enumerate(clusters):
        label[list(c)] = k
    iu = np.triu_indices(len(m.names), 1)
    cross = label[iu[0]] != label[iu[1]]
    vals = np.abs(m.r[iu])[cross]
    best = max(
        cluster_correlation(clusters[i], clusters[j], m)
        for i in range(len(clusters)) for j in range(i + 1, len(clusters))
    )
    return float(vals.mean()), float(vals.std()), float(best)


Probe = Callable[[Cluster, int], bool]


def _run(table: AnnotationTable, iterations: int, probe: Optional[Probe],
         aliases: Mapping[str, Sequence[str]]):
    """Yield ``(iteration, clusters, diagnostics_row)`` for 0..iterations."""
    base = table.attribute_names
    k = len(base)
    m = pearson_matrix(table)
    cur_table = table
    inv = {a: False for a in range(k)}
    consistent = {}
    groups: List[Tuple[int, ...]] = [(a,) for a in range(k)]
    cache: Dict[tuple, bool] = {}

    def make(group):
        return Cluster(
            group, tuple(inv[a] for a in group),
            _cluster_name(group, [inv[a] for a in group], base, aliases),
            consistent.get(group, True),
        )

    def admits_label(c: Cluster) -> bool:
        if not c.consistent:
            return False
        key = (c.members, c.inverted)
        if key not in cache:
            cache[key] = any(probe(c, lab) for lab in (1, -1))
        return cache[key]

    for it in range(iterations + 1):
        merged = None
        if it > 0:
            groups, (a, b) = clustering_step(groups, m, base)
            merged = tuple(sorted(a + b))
            c = make(merged)
            try:
                c2, cur_table, m = harmonize(c, cur_table, m, base)
                for a_, f in zip(c2.members, c2.inverted):
                    inv[a_] = f
                consistent[merged] = True
            except HarmonizationError as exc:
                log.warning("iteration %d: %s", it, exc)
                consistent[merged] = False
        clusters = tuple(make(g) for g in groups)
        mean_r, std_r, max_r = inter_cluster_stats(groups, m)
        row = {
            "iteration": it,
            "n_clusters": len(groups),
            "mean_abs_r": mean_r,
            "std_abs_r": std_r,
            "max_abs_r": max_r,
            "merged": None if merged is None else [base[a] for a in merged],
            "harmonized": all(c.consistent for c in clusters),
        }
        if probe is not None:
            row["valid"] = all(admits_label(c) for c in clusters)
        yield it, clusters, row


def cluster_attributes(table: AnnotationTable, imax: int,
                       aliases: Optional[Mapping[str, Sequence[str]]] = None,
                       probe: Optional[Probe] = None) -> ClusterModel:
    """Run exactly ``imax`` merge iterations and return the harmonized model."""
    k = table.n_attributes
    if not 0 <= imax <= k - 1:
        raise ValueError(f"imax must be in [0, {k - 1}], got {imax}")
    diagnostics = []
    clusters = None
    for it, clusters, row in _run(table, imax, probe, aliases or {}):
        diagnostics.append(row)
    return ClusterModel(table.attribute_names, clusters, imax, diagnostics)


def select_imax(table: AnnotationTable, probe: Probe,
                aliases: Optional[Mapping[str, Sequence[str]]] = None) -> ClusterModel:
    """Cluster through every iteration and keep the last one that stays samplable.

    An iteration is valid when every cluster admits a +1 or -1 assignment for
    which ``probe`` reports enough samples. All K iterations are recorded in
    ``diagnostics``.
    """
    k = table.n_attributes
    diagnostics = []
    snapshots = {}
    for it, clusters, row in _run(table, k - 1, probe, aliases or {}):
        diagnostics.append(row)
        if row["valid"]:
            snapshots = {"it": it, "clusters": clusters}
    if not diagnostics[0]["valid"]:
        raise InsufficientSamples("no valid label assignment for some attribute even without clustering")
    return ClusterModel(table.attribute_names, snapshots["clusters"], snapshots["it"], diagnostics)
