"""Greedy breadth-first search for fairness-increasing assignment combinations.

Every node at depth ``d`` is extended with the ``n`` highest-ranked
assignments whose combination with the node's branch beats the baseline
iGARBE. Candidate evaluations are cached per canonical combination, so the
same set reached along different branches is equalized only once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from fairprobe.cofair import FairnessDistribution, cofair
from fairprobe.decorrelation import ClusterModel
from fairprobe.domain import DataError, InsufficientSamples
from fairprobe.equalize import (
    Assignment, Combination, Insufficient, SamplingParams, SplitStore, equalize,
)
from fairprobe.metrics import EvalResult, OperatingPoint
from fairprobe.ranking import RankingParams, RankScore, rank

log = logging.getLogger(__name__)

GATE_BASELINE = "baseline"
GATE_PARENT = "parent"


@dataclass(frozen=True)
class SearchConfig:
    d_max: int = 3
    n: int = 3
    op: OperatingPoint = OperatingPoint()
    sampling: SamplingParams = SamplingParams()
    ranking: RankingParams = RankingParams()
    seed: int = 0
    gate: str = GATE_BASELINE
    threads: int = 1

    def __post_init__(self):
        if self.d_max < 0:
            raise ValueError("d_max must be >= 0")
        if self.n < 1:
            raise ValueError("branching factor n must be >= 1")
        if self.gate not in (GATE_BASELINE, GATE_PARENT):
            raise ValueError(f"gate must be {GATE_BASELINE!r} or {GATE_PARENT!r}")

    def settings_digest(self) -> str:
        """Digest of everything besides the data that determines an evaluation."""
        text = json.dumps(
            [self.seed, self.op.fmr_target, self.op.alpha, self.sampling.rho_s,
             self.sampling.gamma, self.sampling.resolved_lambda_g(self.op.fmr_target)]
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _result_from_dict(d: dict):
    if d.get("insufficient"):
        return Insufficient(int(d["retained_genuine"]), d.get("reason", ""))
    return EvalResult.from_dict(d)


class EvalCache:
    """Thread-safe map from combination to evaluation, optionally backed by JSON lines."""

    def __init__(self, path: Optional[Path] = None):
        self._data: Dict[tuple, object] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path else None
        self.hits = 0
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        key = (rec["combination"], rec["fingerprint"], rec["settings"])
                        self._data[key] = _result_from_dict(rec["result"])

    def get(self, key):
        with self._lock:
            hit = self._data.get(key)
            if hit is not None:
                self.hits += 1
            return hit

    def put_many(self, items):
        """Store ``(key, result)`` pairs; persisted in the given order."""
        lines = []
        with self._lock:
            for key, result in items:
                if key in self._data:
                    continue
                self._data[key] = result
                lines.append(json.dumps({
                    "combination": key[0], "fingerprint": key[1], "settings": key[2],
                    "result": result.to_dict(),
                }))
        if self.path and lines:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")

    def __len__(self):
        return len(self._data)


class Evaluator:
    """Equalizes combinations for one dataset, model and configuration."""

    def __init__(self, data: SplitStore, model: ClusterModel, config: SearchConfig,
                 cache: Optional[EvalCache] = None):
        self.data = data
        self.model = model
        self.config = config
        self.cache = cache
        self.evaluations = 0
        self._settings = config.settings_digest()

    def key(self, combo: Combination) -> tuple:
        return (combo.encode(), self.data.fingerprint, self._settings)

    def _compute(self, combo: Combination):
        self.evaluations += 1
        c = self.config
        return equalize(combo, self.data, self.model, c.op, c.sampling, c.seed)

    def evaluate_many(self, combos: List[Combination]) -> Dict[str, object]:
        """Evaluate distinct combinations, in parallel when configured."""
        out, todo = {}, []
        for combo in combos:
            enc = combo.encode()
            if enc in out:
                continue
            hit = self.cache.get(self.key(combo)) if self.cache else None
            if hit is not None:
                out[enc] = hit
            else:
                out[enc] = None
                todo.append(combo)
        if todo:
            if self.config.threads > 1 and len(todo) > 1:
                with ThreadPoolExecutor(self.config.threads) as pool:
                    results = list(pool.map(self._compute, todo))
            else:
                results = [self._compute(c) for c in todo]
            for combo, res in zip(todo, results):
                out[combo.encode()] = res
            if self.cache is not None:
                self.cache.put_many([(self.key(c), r) for c, r in zip(todo, results)])
        return out

    def evaluate(self, combo: Combination):
        return self.evaluate_many([combo])[combo.encode()]


@dataclass
class SearchNode:
    assignment: Optional[Assignment]
    combination: Combination
    depth: int
    result: object = None
    rank: Optional[RankScore] = None
    children: List["SearchNode"] = field(default_factory=list)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def to_dict(self) -> dict:
        d = {
            "assignment": None if self.assignment is None else self.assignment.encode(),
            "combination": self.combination.encode(),
            "depth": self.depth,
            "result": None if self.result is None else self.result.to_dict(),
            "rank": None if self.rank is None else self.rank.to_dict(),
            "children": [c.to_dict() for c in self.children],
        }
        return d


@dataclass
class SearchTree:
    root: SearchNode
    baseline: EvalResult
    config: SearchConfig
    evaluator: Optional[Evaluator] = None

    def nodes(self):
        return [n for n in self.root.walk() if n.assignment is not None]

    def to_json(self) -> str:
        return json.dumps(self.root.to_dict(), indent=1)


def baseline(data: SplitStore, model: ClusterModel, config: SearchConfig,
             evaluator: Optional[Evaluator] = None) -> EvalResult:
    """Equalize the empty combination (sampling only)."""
    ev = evaluator or Evaluator(data, model, config)
    res = ev.evaluate(Combination())
    if isinstance(res, Insufficient):
        raise InsufficientBaseline(
            f"baseline retains only {res.retained_genuine} genuine comparisons; "
            "sampling bounds cannot be met"
        )
    return res


class InsufficientBaseline(InsufficientSamples):
    pass


def candidate_assignments(model: ClusterModel) -> List[Assignment]:
    return [Assignment(c.name, lab) for c in model.clusters for lab in (1, -1)]


def _passes_gate(res, threshold: float) -> bool:
    return isinstance(res, EvalResult) and res.igarbe_mean > threshold


def expand_node(node: SearchNode, candidates: List[Assignment], config: SearchConfig,
                evaluator: Evaluator, base: EvalResult,
                evaluated: Optional[Dict[str, object]] = None) -> List[SearchNode]:
    """Attach the top-``n`` fairness-increasing extensions of ``node``."""
    usable = [a for a in candidates if a.cluster not in node.combination.clusters]
    combos = [node.combination.extend(a) for a in usable]
    if evaluated is None:
        evaluated = evaluator.evaluate_many(combos)
    gate = base.igarbe_mean
    if config.gate == GATE_PARENT and isinstance(node.result, EvalResult):
        gate = node.result.igarbe_mean
    scored = []
    for a, combo in zip(usable, combos):
        res = evaluated[combo.encode()]
        if not _passes_gate(res, gate):
            continue
        score = rank(res.retained_genuine, res.fnmr_total_mean, base.fnmr_total_mean,
                     res.igarbe_mean, base.igarbe_mean, config.ranking)
        scored.append((score, combo.encode(), a, combo, res))
    scored.sort(key=lambda t: (-t[0].r_total, t[1]))
    node.children = [
        SearchNode(a, combo, node.depth + 1, res, score)
        for score, _, a, combo, res in scored[:config.n]
    ]
    return node.children


def run_search(data: SplitStore, model: ClusterModel, config: SearchConfig,
               cache: Optional[EvalCache] = None,
               base: Optional[EvalResult] = None) -> SearchTree:
    """Breadth-first expansion of all nodes at depths ``0..d_max``."""
    evaluator = Evaluator(data, model, config, cache if cache is not None else EvalCache())
    if base is None:
        base = baseline(data, model, config, evaluator)
    root = SearchNode(None, Combination(), 0, base)
    candidates = candidate_assignments(model)
    frontier = [root]
    for depth in range(config.d_max + 1):
        if not frontier:
            break
        combos = []
        for node in frontier:
            combos.extend(
                node.combination.extend(a) for a in candidates
                if a.cluster not in node.combination.clusters
            )
        evaluated = evaluator.evaluate_many(combos)
        log.info("depth %d: %d nodes, %d distinct candidates", depth, len(frontier), len(evaluated))
        nxt = []
        for node in frontier:
            nxt.extend(expand_node(node, candidates, config, evaluator, base, evaluated))
        frontier = nxt
    return SearchTree(root, base, config, evaluator)


REPORT_COLUMNS = [
    "combination", "n_assignments", "fnmr_male", "fnmr_female", "fnmr_total",
    "igarbe", "igarbe_std", "cofair", "genuine_samples",
    "fmr_male", "fmr_female", "threshold",
]
RANK_COLUMNS = ["r_total", "r_s", "r_p", "r_f"]


def result_row(combo: Combination, res: EvalResult,
               dist: Optional[FairnessDistribution] = None,
               score: Optional[RankScore] = None) -> dict:
    """One report row: the metric columns of the result tables."""
    male, female = res.rates("male"), res.rates("female")
    row = {
        "combination": combo.encode(),
        "n_assignments": len(combo),
        "fnmr_male": male.fnmr,
        "fnmr_female": female.fnmr,
        "fnmr_total": res.fnmr_total_mean,
        "igarbe": res.igarbe_mean,
        "igarbe_std": res.igarbe_std,
        "cofair": None if dist is None else cofair(dist, res.igarbe_mean),
        "genuine_samples": res.retained_genuine,
        "fmr_male": male.fmr,
        "fmr_female": female.fmr,
        "threshold": res.threshold_mean,
    }
    if score is not None:
        row.update(score.to_dict())
    return row


def top_combinations(tree: SearchTree, k: int = 10,
                     dist: Optional[FairnessDistribution] = None) -> List[dict]:
    """Distinct combinations of the tree, best iGARBE first."""
    seen = {}
    for node in tree.nodes():
        enc = node.combination.encode()
        if enc not in seen:
            seen[enc] = node
    ordered = sorted(
        seen.values(),
        key=lambda n: (-n.result.igarbe_mean, len(n.combination), n.combination.encode()),
    )
    return [result_row(n.combination, n.result, dist, n.rank) for n in ordered[:k]]


STRONG_SHARE = 0.9


def assignment_distribution(data: SplitStore, model: ClusterModel,
                            combo: Combination) -> List[dict]:
    """Label frequencies of the unconstrained attributes among filter survivors.

    Survivors are templates taking part in at least one comparison retained
    by the filter. A label held by at least 90 % of survivors is flagged as
    strongly correlated with the combination.
    """
    selected = data.selection(model, combo)
    masks = data.masks(selected)
    used = np.zeros(len(data.table), dtype=bool)
    for key, (a, b, _) in data.parts.items():
        m = masks[key]
        used[a if m is None else a[m]] = True
        used[b if m is None else b[m]] = True
    if not used.any():
        raise DataError(f"no comparisons survive filtering for {combo.encode()!r}")
    labels = model.harmonized_labels(data.table)[used]
    names = model.harmonized_names()
    excluded = set()
    for a in combo:
        excluded.update(model.cluster(a.cluster).members)
    rows = []
    total = labels.shape[0]
    for attr in range(labels.shape[1]):
        if attr in excluded:
            continue
        col = labels[:, attr]
        for lab in (-1, 0, 1):
            share = float(np.count_nonzero(col == lab)) / total
            rows.append({
                "attribute": names[attr], "label": lab, "share": share,
                "strong": share >= STRONG_SHARE,
            })
    return rows
