"""Command-line entry point: ``fairprobe <command> [options]``.

Settings come from an optional JSON config file and a handful of flag
overrides; flags win over the file, the file wins over built-in defaults.
Every command writes its reports (and figures) into the output directory.

Exit codes: 0 success, 1 internal error, 2 invalid input or config,
3 insufficient samples.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from fairprobe import reports
from fairprobe.cofair import DegenerateDistribution, FairnessDistribution, cofair, fit_distribution
from fairprobe.decorrelation import (
    ClusterModel, HarmonizationError, cluster_attributes, pearson_matrix, select_imax,
)
from fairprobe.domain import (
    AnnotationTable, ComparisonPolicy, DataError, InsufficientSamples, attach_embeddings,
    generate_comparisons, load_annotations, load_comparisons, save_annotations, save_comparisons,
)
from fairprobe.equalize import Combination, SamplingParams, SamplingProbe, SplitStore
from fairprobe.metrics import EvalResult, OperatingPoint
from fairprobe.ranking import RankingParams
from fairprobe.search import (
    RANK_COLUMNS, REPORT_COLUMNS, EvalCache, Evaluator, SearchConfig, assignment_distribution,
    baseline, candidate_assignments, result_row, run_search, top_combinations,
)
from fairprobe.synthetic import SyntheticConfig, generate

log = logging.getLogger("fairprobe")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2
EXIT_INSUFFICIENT = 3

SEED_ENV = "FAIRPROBE_SEED"

DEFAULTS = {
    "annotations": None,
    "comparisons": None,
    "embeddings": None,
    "out": "fairprobe-out",
    "seed": 0,
    "fmr": 1e-3,
    "alpha": 0.5,
    "rho_s": 0.2,
    "gamma": 3,
    "lambda_g": None,
    "mu": 1.3865,
    "lambda": 4.0,
    "omega": 4.0,
    "n": 3,
    "d_max": 3,
    "gate": "baseline",
    "top_k": 10,
    "imax": "auto",
    "model": None,
    "aliases": {},
    "threads": None,
    "cache": True,
    "synthetic": {},
    "comparison_policy": {},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict
    explicit: frozenset  # keys set by the file or a flag

    def __getitem__(self, key):
        return self.values[key]

    @property
    def out(self) -> Path:
        return Path(self.values["out"])

    def path(self, key: str, default_name: str) -> Path:
        v = self.values[key]
        return Path(v) if v else self.out / default_name

    @property
    def op(self) -> OperatingPoint:
        return OperatingPoint(self["fmr"], self["alpha"])

    @property
    def sampling(self) -> SamplingParams:
        return SamplingParams(self["rho_s"], self["gamma"], self["lambda_g"])

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            d_max=self["d_max"], n=self["n"], op=self.op, sampling=self.sampling,
            ranking=RankingParams(self["mu"], self["lambda"], self["omega"], self["fmr"]),
            seed=self["seed"], gate=self["gate"], threads=self["threads"],
        )


def _check(values: dict) -> None:
    def positive_int(key, minimum=1):
        v = values[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            raise ConfigError(f"{key} must be an integer >= {minimum}, got {v!r}")

    if not 0.0 < float(values["fmr"]) < 1.0:
        raise ConfigError(f"fmr must be in (0, 1), got {values['fmr']!r}")
    if not 0.0 <= float(values["alpha"]) <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {values['alpha']!r}")
    if not 0.0 < float(values["rho_s"]) <= 1.0:
        raise ConfigError(f"rho_s must be in (0, 1], got {values['rho_s']!r}")
    positive_int("gamma")
    positive_int("n")
    positive_int("d_max", 0)
    positive_int("top_k")
    positive_int("threads")
    if values["lambda_g"] is not None:
        positive_int("lambda_g")
    positive_int("seed", 0)
    imax = values["imax"]
    if imax != "auto":
        if isinstance(imax, str) and imax.isdigit():
            values["imax"] = imax = int(imax)
        if not isinstance(imax, int) or isinstance(imax, bool) or imax < 0:
            raise ConfigError(f"imax must be 'auto' or a non-negative integer, got {imax!r}")
    if not isinstance(values["aliases"], dict):
        raise ConfigError("aliases must map a cluster name to its member attributes")


def resolve_config(args) -> RunConfig:
    """Merge defaults, the JSON config file and command-line flags."""
    values = dict(DEFAULTS)
    explicit = set()
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_values = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        unknown = sorted(set(file_values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {', '.join(unknown)}")
        values.update(file_values)
        explicit.update(file_values)
    if "seed" not in explicit and os.environ.get(SEED_ENV):
        try:
            values["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    flags = {
        "seed": args.seed, "fmr": args.fmr, "d_max": args.d_max, "n": args.branching,
        "imax": args.imax, "out": args.out, "threads": args.threads,
        "annotations": args.annotations, "comparisons": args.comparisons,
    }
    for key, v in flags.items():
        if v is not None:
            values[key] = v
            explicit.add(key)
    if args.no_cache:
        values["cache"] = False
    if values["threads"] is None:
        values["threads"] = os.cpu_count() or 1
    _check(values)
    return RunConfig(values, frozenset(explicit))


# data loading ---------------------------------------------------------------

def load_table(cfg: RunConfig) -> AnnotationTable:
    path = cfg.path("annotations", "annotations.csv")
    if not path.exists():
        raise ConfigError(f"annotation file not found: {path}")
    return load_annotations(path)


def load_data(cfg: RunConfig, table: AnnotationTable) -> SplitStore:
    path = cfg.path("comparisons", "comparisons.fpcm")
    if path.exists():
        store = load_comparisons(path, table)
    elif cfg["embeddings"]:
        # derive the comparison set from templates and keep it for later commands
        table = attach_embeddings(table, cfg["embeddings"])
        policy = ComparisonPolicy(**{"seed": cfg["seed"], **cfg["comparison_policy"]})
        store = generate_comparisons(table, policy)
        cfg.out.mkdir(parents=True, exist_ok=True)
        save_comparisons(store, path, sidecar=True)
        log.info("generated %d comparisons into %s", len(store.score), path)
    else:
        raise ConfigError(f"comparison file not found: {path}")
    return SplitStore(store, table)


def resolve_model(cfg: RunConfig, table: AnnotationTable, data: SplitStore) -> ClusterModel:
    """Config model path, else a model left by ``decorrelate``, else cluster now."""
    if cfg["model"]:
        path = Path(cfg["model"])
    elif "imax" not in cfg.explicit and (cfg.out / "cluster_model.json").exists():
        path = cfg.out / "cluster_model.json"
    else:
        return build_model(cfg, table, data)
    try:
        model = ClusterModel.from_json(path.read_text(encoding="utf-8"))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed cluster model ({exc})") from None
    if model.attribute_names != table.attribute_names:
        raise ConfigError(f"{path}: attributes do not match the annotation file")
    return model


def build_model(cfg: RunConfig, table: AnnotationTable, data: Optional[SplitStore]) -> ClusterModel:
    probe = SamplingProbe(data, cfg.op, cfg.sampling) if data is not None else None
    if cfg["imax"] == "auto":
        if probe is None:
            raise ConfigError("automatic imax selection needs a comparison file")
        return select_imax(table, probe, cfg["aliases"])
    try:
        return cluster_attributes(table, cfg["imax"], cfg["aliases"], probe)
    except ValueError as exc:
        if isinstance(exc, (DataError, HarmonizationError)):
            raise
        raise ConfigError(str(exc)) from None


def make_cache(cfg: RunConfig) -> Optional[EvalCache]:
    if not cfg["cache"]:
        return None
    return EvalCache(cfg.out / "eval_cache.jsonl")


def audit(evaluator: Evaluator, model: ClusterModel):
    """Baseline plus every single assignment that meets the sampling bounds."""
    base = baseline(evaluator.data, model, evaluator.config, evaluator)
    singles = [Combination([a]) for a in candidate_assignments(model)]
    results = evaluator.evaluate_many(singles)
    kept, skipped = [], []
    for combo in singles:
        res = results[combo.encode()]
        if isinstance(res, EvalResult):
            kept.append((combo, res))
        else:
            skipped.append(combo.encode())
    return base, kept, skipped


def fit(base: EvalResult, kept) -> Optional[FairnessDistribution]:
    try:
        return fit_distribution([(r.igarbe_mean, r.fnmr_total_mean) for _, r in kept],
                                base.fnmr_total_mean)
    except DegenerateDistribution as exc:
        log.warning("no fairness distribution: %s", exc)
        return None


# commands -------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    params = dict(cfg["synthetic"])
    if "seed" in cfg.explicit or "seed" not in params:
        params["seed"] = cfg["seed"]
    try:
        syn = SyntheticConfig.from_dict(params)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid synthetic config: {exc}") from None
    table, store = generate(syn)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_annotations(table, cfg.out / "annotations.csv")
    save_comparisons(store, cfg.out / "comparisons.fpcm", sidecar=True)
    reports.write_json(syn.to_dict(), cfg.out / "synthetic_config.json")
    print(f"templates={len(table)} comparisons={len(store.score)} fingerprint={store.fingerprint}")
    return EXIT_OK


def cmd_correlate(cfg: RunConfig, args) -> int:
    from fairprobe import plotting

    table = load_table(cfg)
    m = pearson_matrix(table)
    cfg.out.mkdir(parents=True, exist_ok=True)
    m.write_csv(cfg.out / "correlation.csv")
    plotting.plot_correlation(m, cfg.out / "correlation.png")
    return EXIT_OK


def cmd_decorrelate(cfg: RunConfig, args) -> int:
    from fairprobe import plotting

    table = load_table(cfg)
    path = cfg.path("comparisons", "comparisons.fpcm")
    data = load_data(cfg, table) if (path.exists() or cfg["embeddings"]) else None
    model = build_model(cfg, table, data)
    cfg.out.mkdir(parents=True, exist_ok=True)
    reports.write_json(model.to_dict(), cfg.out / "cluster_model.json")
    cols = ["iteration", "n_clusters", "mean_abs_r", "std_abs_r", "max_abs_r", "merged", "harmonized"]
    if model.diagnostics and "valid" in model.diagnostics[0]:
        cols.append("valid")
    reports.write_csv(model.diagnostics, cols, cfg.out / "clustering_diagnostics.csv")
    plotting.plot_clustering(model.diagnostics, model.iteration, cfg.out / "clustering.png")
    print(f"imax={model.iteration} clusters={len(model.clusters)}")
    return EXIT_OK


AUDIT_COLUMNS = ["cluster", "label"] + REPORT_COLUMNS


def cmd_audit_singles(cfg: RunConfig, args) -> int:
    from fairprobe import plotting
    from fairprobe.cofair import write_density_csv

    table = load_table(cfg)
    data = load_data(cfg, table)
    model = resolve_model(cfg, table, data)
    cfg.out.mkdir(parents=True, exist_ok=True)
    evaluator = Evaluator(data, model, cfg.search_config(), make_cache(cfg))
    base, kept, skipped = audit(evaluator, model)
    dist = fit(base, kept)

    rows = [{"cluster": "", "label": "", **result_row(Combination(), base, dist)}]
    for combo, res in kept:
        (a,) = tuple(combo)
        rows.append({"cluster": a.cluster, "label": a.label, **result_row(combo, res, dist)})
    reports.write_csv(rows, AUDIT_COLUMNS, cfg.out / "audit_singles.csv")
    reports.write_json({"rows": rows, "skipped": skipped}, cfg.out / "audit_singles.json")
    if dist is not None:
        (cfg.out / "fairness_distribution.json").write_text(dist.to_json() + "\n", encoding="utf-8")
        write_density_csv(dist, cfg.out / "fairness_density.csv")
        plotting.plot_density(dist, cfg.out / "fairness_density.png",
                              marks={"baseline": base.igarbe_mean})
    print(f"baseline igarbe={base.igarbe_mean:.6f} audited={len(kept)} skipped={len(skipped)}")
    return EXIT_OK


def cmd_search(cfg: RunConfig, args) -> int:
    from fairprobe import plotting

    table = load_table(cfg)
    data = load_data(cfg, table)
    model = resolve_model(cfg, table, data)
    cfg.out.mkdir(parents=True, exist_ok=True)
    sc = cfg.search_config()
    cache = make_cache(cfg) or EvalCache()
    evaluator = Evaluator(data, model, sc, cache)
    base, kept, _ = audit(evaluator, model)
    dist = fit(base, kept)
    tree = run_search(data, model, sc, cache, base)

    rows = [result_row(Combination(), base, dist)]
    rows += top_combinations(tree, cfg["top_k"], dist)
    columns = REPORT_COLUMNS + RANK_COLUMNS
    reports.write_csv(rows, columns, cfg.out / "search_report.csv")
    reports.write_json(rows, cfg.out / "search_report.json")
    reports.write_json(tree.root.to_dict(), cfg.out / "search_tree.json")

    if len(rows) > 1:
        best = Combination.decode(rows[1]["combination"])
        dist_rows = assignment_distribution(data, model, best)
        reports.write_csv(dist_rows, ["attribute", "label", "share", "strong"],
                          cfg.out / "assignment_distribution.csv")
        plotting.plot_assignment_distribution(dist_rows, cfg.out / "assignment_distribution.png",
                                              title=rows[1]["combination"])
        print(f"top={rows[1]['combination']} igarbe={rows[1]['igarbe']:.6f}")
    else:
        print("no combination beats the baseline")
    return EXIT_OK


def cmd_cofair(cfg: RunConfig, args) -> int:
    path = Path(args.distribution) if args.distribution else cfg.out / "fairness_distribution.json"
    if not path.exists():
        raise ConfigError(f"distribution file not found: {path}")
    try:
        dist = FairnessDistribution.from_json(path.read_text(encoding="utf-8"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed distribution ({exc})") from None
    print("score,cofair")
    for s in args.scores:
        print(f"{s!r},{cofair(dist, s)!r}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "correlate": cmd_correlate,
    "decorrelate": cmd_decorrelate,
    "audit-singles": cmd_audit_singles,
    "search": cmd_search,
    "cofair": cmd_cofair,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--fmr", type=float, help="operating point FMR")
    common.add_argument("--d-max", dest="d_max", type=int, help="maximum search depth")
    common.add_argument("--branching", type=int, help="children kept per search node")
    common.add_argument("--imax", help="merge iterations, or 'auto'")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--annotations", help="annotation CSV (default: <out>/annotations.csv)")
    common.add_argument("--comparisons", help="comparison file (default: <out>/comparisons.fpcm)")
    common.add_argument("--no-cache", action="store_true", help="do not use the evaluation cache")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fairprobe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "cofair":
            sp.add_argument("scores", nargs="+", type=float, help="iGARBE scores")
            sp.add_argument("--distribution", help="fairness distribution JSON")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which matches our invalid-input code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except InsufficientSamples as exc:
        print(f"fairprobe: insufficient samples: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except (ConfigError, DataError, HarmonizationError, FileNotFoundError) as exc:
        print(f"fairprobe: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"fairprobe: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
