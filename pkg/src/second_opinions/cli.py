"""Command-line front end.

Subcommands: ``synth`` (generate a synthetic panel with planted groups),
``train`` (fit one GNB per expert), ``partition`` (learn the group
structure), ``infer`` (answer counterfactual queries), ``eval`` (score a
predictor on held-out data), ``bench`` (the recovery-vs-data-size grid).

Every stochastic stage derives its random substream from the single
``--seed`` plus a stage name, so reruns — at any ``--threads`` — are
byte-identical.  Flags override ``--config`` (a JSON object keyed by flag
dest names), which overrides built-in defaults.  Progress goes to stderr;
machine-readable results go to files and stdout.  Exit codes: 0 success,
1 runtime failure, 2 usage or input-validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import data as data_mod
from .errors import SecondOpinionsError
from .evaluation import (
    CounterfactualPredictor,
    MarginalArgmaxPredictor,
    PREDICTOR_NAMES,
    ProductArgmaxPredictor,
    adjusted_rand_index,
    cnb_models_from_panel,
    edge_ratio,
    evaluate,
    write_report_files,
)
from .models import load_models, save_models, train_gnb
from .partitioning import (
    compute_edge_weights,
    detect_violations,
    objective,
    partition_with_restarts,
    write_violations_csv,
)
from .rng import substream
from .scm import counterfactual_distribution
from .types import CounterfactualQuery, Partition

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "T": 1000,
    "t_weights": 1000,
    "restarts": 10,
    "alpha": 1.0,
    "smoothing": 1e-9,
    "slack": 1.0,
    "threads": 1,
}


class UsageError(Exception):
    """Bad flags, malformed/missing inputs, unknown ids: exit code 2."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _resolve(args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags."""
    merged = dict(DEFAULTS)
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        merged.update(loaded)
    for key in vars(args):
        value = getattr(args, key)
        if key not in ("func", "config") and value is not None:
            merged[key] = value
    for key in ("seed", "T", "t_weights", "restarts", "threads"):
        try:
            merged[key] = int(merged[key])
        except (TypeError, ValueError):
            raise UsageError(f"{key} must be an integer, got {merged[key]!r}") from None
    for key in ("T", "t_weights", "restarts"):
        if merged[key] < 1:
            raise UsageError(f"{key} must be >= 1, got {merged[key]}")
    if merged["threads"] < 1:
        raise UsageError(f"threads must be >= 1, got {merged['threads']}")
    return merged


def _require_out_dir(cfg: Mapping) -> Path:
    out = cfg.get("out_dir")
    if out is None:
        raise UsageError("--out-dir is required")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: Mapping, key: str, flag: str) -> data_mod.PanelDataset:
    path = cfg.get(key)
    if path is None:
        raise UsageError(f"{flag} is required")
    try:
        return data_mod.load_dataset(Path(path))
    except SecondOpinionsError as exc:
        raise UsageError(f"{flag}: {exc}") from exc


def _load_models(cfg: Mapping) -> dict:
    path = cfg.get("models")
    if path is None:
        raise UsageError("--models is required")
    try:
        return load_models(Path(path))
    except SecondOpinionsError as exc:
        raise UsageError(f"--models: {exc}") from exc


def _load_partition(cfg: Mapping) -> Partition:
    path = cfg.get("partition")
    if path is None:
        raise UsageError("--partition is required")
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return Partition.from_jsonable(doc)
    except OSError as exc:
        raise UsageError(f"--partition: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"--partition: invalid JSON ({exc})") from exc
    except SecondOpinionsError as exc:
        raise UsageError(f"--partition: {exc}") from exc


def _parse_group_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise UsageError(f"--group-sizes must be comma-separated integers, got {text!r}") from None
    return sizes


def _synthetic_config(cfg: Mapping) -> data_mod.SyntheticConfig:
    kwargs = {}
    for key in ("n_experts", "k", "d", "n_train", "n_test"):
        if cfg.get(key) is not None:
            kwargs[key] = int(cfg[key])
    if cfg.get("group_sizes") is not None:
        gs = cfg["group_sizes"]
        kwargs["group_sizes"] = _parse_group_sizes(gs) if isinstance(gs, str) else tuple(int(x) for x in gs)
    if cfg.get("sparsity") is not None:
        kwargs["sparsity"] = float(cfg["sparsity"])
    kwargs["seed"] = int(cfg["seed"])
    try:
        return data_mod.SyntheticConfig(**kwargs)
    except SecondOpinionsError as exc:
        raise UsageError(str(exc)) from exc


# --- subcommands --------------------------------------------------------------


def cmd_synth(cfg: Mapping) -> int:
    out = _require_out_dir(cfg)
    config = _synthetic_config(cfg)
    _log(f"generating synthetic panel: {config.n_experts} experts, "
         f"n_train={config.n_train}, n_test={config.n_test}, sparsity={config.sparsity}")
    train, test, truth, models = data_mod.generate_synthetic(config)
    data_mod.save_dataset(train, out / "train.jsonl")
    data_mod.save_dataset(test, out / "test.jsonl")
    (out / "truth_partition.json").write_text(
        json.dumps(truth.to_jsonable(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    save_models(models, out / "truth_models")
    _log(f"wrote train.jsonl ({train.n} samples), test.jsonl ({test.n} samples), "
         f"truth_partition.json, truth_models/ to {out}")
    return 0


def cmd_train(cfg: Mapping) -> int:
    out = _require_out_dir(cfg)
    train = _load_dataset(cfg, "train", "--train")
    smoothing = float(cfg["smoothing"])
    models = {}
    for h in train.experts:
        samples = [
            (s.features, s.predictions[h]) for s in train.samples if h in s.predictions
        ]
        models[h] = train_gnb(samples, train.k, smoothing=smoothing)
    save_models(models, out)
    _log(f"trained {len(models)} GNB models -> {out}")
    return 0


def cmd_partition(cfg: Mapping) -> int:
    out = _require_out_dir(cfg)
    train = _load_dataset(cfg, "train", "--train")
    models = _load_models(cfg)
    missing = [h for h in train.experts if h not in models]
    if missing:
        raise UsageError(f"no model for experts {missing[:5]}")
    seed = cfg["seed"]

    t0 = time.perf_counter()
    records, permissible = detect_violations(train, models, slack=float(cfg["slack"]))
    _log(f"violations: {len(records)} across {train.n} samples; "
         f"{len(permissible)} permissible edges ({time.perf_counter() - t0:.1f}s)")
    write_violations_csv(records, out / "violations.csv")

    t0 = time.perf_counter()
    graph = compute_edge_weights(
        permissible, train, models, cfg["t_weights"],
        substream(seed, "partition", "weights"), threads=cfg["threads"],
    )
    _log(f"edge weights done ({time.perf_counter() - t0:.1f}s)")
    if not graph.edges():
        _log("warning: no permissible edges; every expert becomes a singleton group")
    partition = partition_with_restarts(graph, cfg["restarts"], substream(seed, "partition", "greedy"))
    (out / "partition.json").write_text(
        json.dumps(partition.to_jsonable(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    stats = {
        "n_vertices": graph.n_vertices,
        "n_permissible_edges": len(graph.edges()),
        "n_violations": len(records),
        "n_groups": len(partition.groups),
        "n_singletons": sum(1 for g in partition.groups if len(g) == 1),
        "objective": objective(partition, graph),
        "all_singletons": all(len(g) == 1 for g in partition.groups),
    }
    (out / "graph_stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _log(f"partition: {stats['n_groups']} groups ({stats['n_singletons']} singletons), "
         f"objective {stats['objective']:.4f}")
    return 0


def cmd_infer(cfg: Mapping) -> int:
    models = _load_models(cfg)
    partition = _load_partition(cfg)
    observed_expert = cfg.get("observed_expert")
    observed_label = cfg.get("observed_label")
    if observed_expert is None or observed_label is None:
        raise UsageError("--observed-expert and --observed-label are required")
    if observed_expert not in partition or observed_expert not in models:
        raise UsageError(f"unknown expert {observed_expert!r}")

    if cfg.get("features") is not None:
        text = str(cfg["features"])
        try:
            raw = json.loads(text) if text.strip().startswith("[") else [float(p) for p in text.split(",")]
            features = np.asarray(raw, dtype=np.float64)
        except (ValueError, json.JSONDecodeError) as exc:
            raise UsageError(f"--features: {exc}") from exc
        feature_ref = "inline"
    elif cfg.get("dataset") is not None and cfg.get("sample_id") is not None:
        dataset = _load_dataset(cfg, "dataset", "--dataset")
        match = [s for s in dataset.samples if s.sample_id == cfg["sample_id"]]
        if not match:
            raise UsageError(f"sample id {cfg['sample_id']!r} not found in dataset")
        features = match[0].features
        feature_ref = str(cfg["sample_id"])
    else:
        raise UsageError("provide --features or both --dataset and --sample-id")

    target = cfg.get("target") or "all"
    if target == "all":
        targets = [h for h in sorted(partition.experts) if h != observed_expert]
        unmodeled = [h for h in targets if h not in models]
        if unmodeled:
            raise UsageError(f"no model for experts {unmodeled[:5]}")
    else:
        if target not in partition or target not in models:
            raise UsageError(f"unknown target expert {target!r}")
        if target == observed_expert:
            raise UsageError("target must differ from the observed expert")
        targets = [target]

    k = models[observed_expert].k
    if not 0 <= int(observed_label) < k:
        raise UsageError(f"--observed-label must lie in [0, {k})")

    results = []
    for h in targets:
        query = CounterfactualQuery(
            features=features,
            observed_expert=observed_expert,
            observed_label=int(observed_label),
            target_expert=h,
        )
        estimate = counterfactual_distribution(
            query, partition, models, cfg["T"], substream(cfg["seed"], "infer", h)
        )
        results.append(
            {
                "target": h,
                "probs": estimate.dist.probs.tolist(),
                "argmax": estimate.argmax_label(),
                "num_samples": estimate.num_samples,
                "exact": estimate.exact,
            }
        )
    doc = {
        "observed_expert": observed_expert,
        "observed_label": int(observed_label),
        "features": feature_ref,
        "results": results,
    }
    print(json.dumps(doc, sort_keys=True, indent=2))
    return 0


def _build_predictor(name: str, cfg: Mapping, models, partition: Partition):
    if name == "gnb":
        return MarginalArgmaxPredictor(models)
    if name == "gnb_cnb":
        train = _load_dataset(cfg, "train", "--train (required for gnb_cnb)")
        cnb = cnb_models_from_panel(train, alpha=float(cfg["alpha"]))
        return ProductArgmaxPredictor(models, cnb)
    return CounterfactualPredictor(
        models=models, partition=partition, num_samples=cfg["T"],
        seed=cfg["seed"], tag="eval", threads=cfg["threads"],
    )


def cmd_eval(cfg: Mapping) -> int:
    out = _require_out_dir(cfg)
    test = _load_dataset(cfg, "test", "--test")
    models = _load_models(cfg)
    partition = _load_partition(cfg)
    name = cfg.get("predictor")
    if name not in PREDICTOR_NAMES:
        raise UsageError(f"--predictor must be one of {PREDICTOR_NAMES}, got {name!r}")
    missing = [h for h in test.experts if h not in models or h not in partition]
    if missing:
        raise UsageError(f"experts missing a model or partition entry: {missing[:5]}")
    predictor = _build_predictor(name, cfg, models, partition)
    t0 = time.perf_counter()
    report = evaluate(test, predictor, partition)
    _log(f"evaluated {report.n_predictions} pairs in {time.perf_counter() - t0:.1f}s")
    write_report_files(report, out)
    print(json.dumps(
        {
            "predictor": name,
            "overall_accuracy": report.overall_accuracy,
            "scenario_accuracies": report.scenario_accuracies,
            "n_predictions": report.n_predictions,
        },
        sort_keys=True,
    ))
    return 0


def _bench_grid(cfg: Mapping) -> tuple[list[int], list[float], int]:
    def parse_list(value, cast, flag):
        if value is None:
            raise UsageError(f"{flag} is required")
        if isinstance(value, (list, tuple)):
            return [cast(x) for x in value]
        try:
            return [cast(part) for part in str(value).split(",")]
        except ValueError:
            raise UsageError(f"{flag}: expected comma-separated values, got {value!r}") from None

    m_grid = parse_list(cfg.get("m_grid"), int, "--m-grid")
    s_grid = parse_list(cfg.get("s_grid"), float, "--s-grid")
    replicates = int(cfg.get("replicates") or 5)
    if replicates < 1 or any(m < 1 for m in m_grid) or any(not 0 < s < 1 for s in s_grid):
        raise UsageError("bench grid values out of range")
    return m_grid, s_grid, replicates


def run_bench_cell(cfg: Mapping, m: int, s: float, replicate: int) -> dict:
    """One synth -> partition -> eval pipeline; returns the grid.csv row."""
    cell_seed = int(substream(cfg["seed"], "bench", m, repr(float(s)), replicate).integers(2**63))
    config = _synthetic_config({**cfg, "n_train": m, "sparsity": s, "seed": cell_seed})
    train, test, truth, models = data_mod.generate_synthetic(config)
    _, permissible = detect_violations(train, models, slack=float(cfg["slack"]))
    graph = compute_edge_weights(
        permissible, train, models, cfg["t_weights"],
        substream(cell_seed, "bench", "weights"), threads=cfg["threads"],
    )
    recovered = partition_with_restarts(graph, cfg["restarts"], substream(cell_seed, "bench", "greedy"))
    ratio = edge_ratio(graph, truth)
    ari = adjusted_rand_index(recovered, truth)

    losses = {}
    for tag, part in (
        ("recovered", recovered),
        ("truth", truth),
        ("independent", Partition.singletons(truth.experts)),
    ):
        predictor = CounterfactualPredictor(
            models=models, partition=part, num_samples=cfg["T"],
            seed=cell_seed, tag=f"bench-{tag}", threads=cfg["threads"],
        )
        report = evaluate(test, predictor, part)
        losses[tag] = 1.0 - report.overall_accuracy
    return {
        "m": m,
        "s": float(s),
        "replicate": replicate,
        "ari": ari,
        "edge_ratio": ratio,
        "loss_recovered": losses["recovered"],
        "loss_truth": losses["truth"],
        "loss_independent": losses["independent"],
    }


def cmd_bench(cfg: Mapping) -> int:
    out = _require_out_dir(cfg)
    m_grid, s_grid, replicates = _bench_grid(cfg)
    rows = []
    for m in m_grid:
        for s in s_grid:
            for r in range(replicates):
                t0 = time.perf_counter()
                row = run_bench_cell(cfg, m, s, r)
                rows.append(row)
                _log(
                    f"bench m={m} s={s} replicate={r}: ari={row['ari']:.3f} "
                    f"edge_ratio={row['edge_ratio']:.3f} loss_recovered={row['loss_recovered']:.4f} "
                    f"loss_truth={row['loss_truth']:.4f} ({time.perf_counter() - t0:.1f}s)"
                )
    header = ["m", "s", "replicate", "ari", "edge_ratio", "loss_recovered", "loss_truth", "loss_independent"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(
                [str(row["m"]), repr(row["s"]), str(row["replicate"])]
                + [repr(float(row[c])) for c in header[3:]]
            )
        )
    (out / "grid.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _log(f"wrote {len(rows)} rows to {out / 'grid.csv'}")
    return 0


# --- argument parsing ---------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--config", type=str, default=None, help="JSON config file; flags override it")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default 1; results identical)")
    common.add_argument("--out-dir", dest="out_dir", type=str, default=None, help="output directory")
    common.add_argument("-T", dest="T", type=int, default=None, help="counterfactual samples per query (default 1000)")
    common.add_argument("--t-weights", dest="t_weights", type=int, default=None,
                        help="posterior samples per edge-weight estimate (default 1000)")
    common.add_argument("--restarts", type=int, default=None, help="greedy restarts (default 10)")
    common.add_argument("--alpha", type=float, default=None, help="CNB Laplace smoothing (default 1.0)")
    common.add_argument("--slack", type=float, default=None, help="violation-test slack multiplier (default 1.0)")
    common.add_argument("--smoothing", type=float, default=None, help="GNB variance smoothing (default 1e-9)")

    parser = argparse.ArgumentParser(
        prog="second-opinions",
        description="Counterfactual second opinions via a shared-noise expert model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic expert panel")
    p.add_argument("--n-experts", dest="n_experts", type=int, default=None)
    p.add_argument("--group-sizes", dest="group_sizes", type=str, default=None,
                   help="comma-separated planted group sizes (default 6,7,11,11,13)")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--n-train", dest="n_train", type=int, default=None)
    p.add_argument("--n-test", dest="n_test", type=int, default=None)
    p.add_argument("--sparsity", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="fit one GNB model per expert")
    p.add_argument("--train", type=str, default=None, help="training panel (.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("partition", parents=[common], help="learn the expert grouping")
    p.add_argument("--train", type=str, default=None, help="training panel (.jsonl)")
    p.add_argument("--models", type=str, default=None, help="model directory")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("infer", parents=[common], help="counterfactual second opinions for one observation")
    p.add_argument("--models", type=str, default=None)
    p.add_argument("--partition", type=str, default=None)
    p.add_argument("--observed-expert", dest="observed_expert", type=str, default=None)
    p.add_argument("--observed-label", dest="observed_label", type=int, default=None)
    p.add_argument("--target", type=str, default=None, help="target expert id, or 'all' (default)")
    p.add_argument("--features", type=str, default=None, help="comma-separated or JSON list of feature values")
    p.add_argument("--dataset", type=str, default=None, help="panel to pull features from (with --sample-id)")
    p.add_argument("--sample-id", dest="sample_id", type=str, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score a predictor on a held-out panel")
    p.add_argument("--test", type=str, default=None)
    p.add_argument("--train", type=str, default=None, help="training panel (needed by gnb_cnb)")
    p.add_argument("--models", type=str, default=None)
    p.add_argument("--partition", type=str, default=None)
    p.add_argument("--predictor", type=str, default=None, choices=list(PREDICTOR_NAMES))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="recovery benchmark over (m, s) grid")
    p.add_argument("--m-grid", dest="m_grid", type=str, default=None, help="comma-separated training sizes")
    p.add_argument("--s-grid", dest="s_grid", type=str, default=None, help="comma-separated sparsity levels")
    p.add_argument("--replicates", type=int, default=None, help="runs per cell (default 5)")
    p.add_argument("--n-experts", dest="n_experts", type=int, default=None)
    p.add_argument("--group-sizes", dest="group_sizes", type=str, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--n-test", dest="n_test", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        return args.func(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SecondOpinionsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
