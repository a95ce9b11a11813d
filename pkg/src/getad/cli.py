"""Command-line pipeline: synthesize data, build graphs, train, score, evaluate.

Exit codes: 0 on success, 2 for bad flags or config keys, 1 for runtime
failures (reported as a single line on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import anomaly_forge, anomaly_scores, eval_metrics
from .anomaly_forge import DetourSpec, build_eval_set, load_labeled, save_labeled
from .anomaly_scores import METRICS, Scorer
from .gradchecks import run_battery
from .road_graph import build_features, load_network, transition_stats, write_edges_csv
from .synth_world import GridSpec, generate_trajectories, grid_network
from .train_engine import TrainConfig, load_checkpoint, save_checkpoint, train
from .trajectory_store import Trajectory, filter_dataset, load_trajectories, save_trajectories

logger = logging.getLogger("getad.cli")


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` pairs; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}: line {lineno}: expected key = value")
            key, value = stripped.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def resolve_train_config(args) -> TrainConfig:
    try:
        raw: dict[str, str] = {}
        if getattr(args, "config", None):
            raw.update(parse_config_file(args.config))
        for item in getattr(args, "set", None) or []:
            if "=" not in item:
                raise ValueError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            raw[key.strip()] = value.strip()
        config = TrainConfig.from_strings(raw)
    except ValueError as exc:
        # Unknown or malformed keys are usage errors, same exit code as bad flags.
        print(f"getad: error: {exc}", file=sys.stderr)
        raise SystemExit(2) from None
    logger.info("resolved config: %s", json.dumps(config.to_dict(), sort_keys=True))
    return config


def _load_scorable(path) -> list[tuple[Trajectory, str | None]]:
    """Trajectory JSONL with or without labels."""
    rows: list[tuple[Trajectory, str | None]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                traj = Trajectory(id=str(obj["id"]),
                                  segments=[int(s) for s in obj["segments"]],
                                  agent=obj.get("agent"))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed record ({exc})") from None
            rows.append((traj, obj.get("label")))
    return rows


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = GridSpec(width=args.width, height=args.height, n_agents=args.agents,
                    trips_per_agent=args.trips, route_noise=args.route_noise,
                    seed=args.seed)
    network = grid_network(spec)
    train_trips = generate_trajectories(network, spec, trip_stream=0)
    eval_trips = generate_trajectories(network, spec, trip_stream=1,
                                       trips_per_agent=args.eval_trips)
    os.makedirs(args.out_dir, exist_ok=True)
    write_edges_csv(network, os.path.join(args.out_dir, "edges.csv"))
    save_trajectories(train_trips, os.path.join(args.out_dir, "train.jsonl"))
    save_trajectories(eval_trips, os.path.join(args.out_dir, "eval_normals.jsonl"))
    print(
        f"wrote {network.n_segments} segments, {len(train_trips)} training trips, "
        f"{len(eval_trips)} held-out trips to {args.out_dir}"
    )
    return 0


def cmd_build_graph(args) -> int:
    network = load_network(args.edges)
    summary = {
        "n_segments": network.n_segments,
        "n_adjacent_pairs": len(network.adjacency),
        "road_class_map": {name: code for code, name in enumerate(network.class_names)},
    }
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    print(json.dumps(summary))
    return 0


def cmd_stats(args) -> int:
    network = load_network(args.edges)
    trajectories = load_trajectories(args.trajs)
    stats = transition_stats(network, trajectories)
    features = build_features(network, stats, trajectories)
    pairs = sorted(stats.pair_counts)
    if args.out:
        np.savez(
            args.out,
            features=features.values,
            feature_columns=np.array([name for name, _ in features.column_spec]),
            transition_src=np.array([u for u, _ in pairs], dtype=np.int64),
            transition_dst=np.array([v for _, v in pairs], dtype=np.int64),
            transition_prob=np.array([stats.prob(u, v) for u, v in pairs]),
        )
    print(
        f"{network.n_segments} segments, {len(trajectories)} trajectories, "
        f"{len(pairs)} observed transitions, {features.values.shape[1]} feature columns"
    )
    return 0


def cmd_gen_anomalies(args) -> int:
    network = load_network(args.edges)
    normals = load_trajectories(args.normals)
    spec = DetourSpec(mode=args.mode, max_fraction=args.max_fraction,
                      max_retries=args.max_retries, rng_seed=args.seed)
    labeled = build_eval_set(network, normals, args.rate, spec,
                             np.random.default_rng(args.seed))
    save_labeled(labeled, args.out)
    print(
        f"wrote {len(labeled.items)} trajectories "
        f"({labeled.n_anomalous} anomalous) to {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    network = load_network(args.edges)
    dataset = load_trajectories(args.trajs)
    dataset = filter_dataset(
        dataset,
        min_segments=config.min_segments,
        min_agent_trajs=config.min_agent_trajs or None,
    )
    if not dataset:
        raise ValueError("no trajectories left after filtering")
    stats = transition_stats(network, dataset)
    features = build_features(network, stats, dataset)
    started = time.time()
    checkpoint = train(dataset, network, features, stats, config)
    save_checkpoint(checkpoint, args.out)
    print(
        f"trained on {len(dataset)} trajectories in {time.time() - started:.1f}s; "
        f"checkpoint written to {args.out}"
    )
    return 0


def cmd_score(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    scorer = Scorer(checkpoint)
    rows = []
    skipped = 0
    for traj, label in _load_scorable(args.trajs):
        try:
            rows.append(anomaly_scores.score_record(scorer, traj, label=label,
                                                    per_token=args.per_token))
        except ValueError as exc:
            skipped += 1
            logger.warning("skipping %s: %s", traj.id, exc)
    anomaly_scores.write_scores(rows, args.out)
    message = f"scored {len(rows)} trajectories to {args.out}"
    if skipped:
        message += f" ({skipped} skipped)"
    print(message)
    return 0


def cmd_eval(args) -> int:
    rows = anomaly_scores.read_scores(args.scores)
    if args.metric not in METRICS:
        raise ValueError(f"unknown metric {args.metric!r}")
    scores, labels = [], []
    for row in rows:
        if "label" not in row or row["label"] is None:
            raise ValueError(f"score row {row.get('id')!r} has no label")
        scores.append(float(row[args.metric]))
        labels.append(1 if row["label"] == anomaly_forge.LABEL_ANOMALOUS else 0)
    result = eval_metrics.evaluate(scores, labels, threshold=args.threshold)
    summary = eval_metrics.report(result, args.metric, args.out, curve_path=args.curve)
    print(json.dumps(summary))
    return 0


def cmd_gradcheck(args) -> int:
    started = time.time()
    reports = run_battery(eps=args.eps, tol=args.tol)
    failed = 0
    for report in reports:
        status = "ok" if report.passed else "FAIL"
        print(f"{status:4s} {report.name:20s} max rel err {report.max_rel_err:.3e}")
        failed += not report.passed
    print(f"{len(reports)} checks in {time.time() - started:.1f}s, {failed} failures")
    return 1 if failed else 0


_ABLATION_GRID = (
    # Positional encoding x structural supervision; every run keeps the
    # graph encoder so only the studied components vary.
    ("gpe+link", {"use_gpe": True, "use_rpe": False, "use_link_loss": True}),
    ("gpe", {"use_gpe": True, "use_rpe": False, "use_link_loss": False}),
    ("rpe+link", {"use_gpe": False, "use_rpe": True, "use_link_loss": True}),
    ("rpe", {"use_gpe": False, "use_rpe": True, "use_link_loss": False}),
)


def run_ablation(network, dataset, labeled, config: TrainConfig) -> list[dict]:
    """Train the encoding x link-loss grid and score each run three ways."""
    stats = transition_stats(network, dataset)
    features = build_features(network, stats, dataset)
    rows: list[dict] = []
    for name, overrides in _ABLATION_GRID:
        run_config = dataclasses.replace(config, **overrides)
        checkpoint = train(dataset, network, features, stats, run_config)
        scorer = Scorer(checkpoint)
        breakdowns = [
            (scorer.score_trajectory(item.trajectory), item.label)
            for item in labeled.items
        ]
        labels = [1 if label == anomaly_forge.LABEL_ANOMALOUS else 0 for _, label in breakdowns]
        for metric_name, metric in METRICS.items():
            values = [metric(bd) for bd, _ in breakdowns]
            result = eval_metrics.evaluate(values, labels)
            rows.append(
                {
                    "run": name,
                    "scoring": metric_name,
                    "pr_auc": result.pr_auc,
                    "f1": result.best_f1,
                    "threshold": result.best_threshold,
                }
            )
    return rows


def cmd_ablate(args) -> int:
    config = resolve_train_config(args)
    network = load_network(args.edges)
    dataset = filter_dataset(load_trajectories(args.trajs),
                             min_segments=config.min_segments,
                             min_agent_trajs=config.min_agent_trajs or None)
    labeled = load_labeled(args.eval)
    rows = run_ablation(network, dataset, labeled, config)
    with open(args.out, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    for row in rows:
        print(
            f"{row['run']:10s} {row['scoring']:10s} "
            f"pr_auc={row['pr_auc']:.3f} f1={row['f1']:.3f}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="getad",
        description="Trajectory anomaly detection on road networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a grid world with commuting agents")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--width", type=int, default=10)
    p.add_argument("--height", type=int, default=10)
    p.add_argument("--agents", type=int, default=20)
    p.add_argument("--trips", type=int, default=40)
    p.add_argument("--route-noise", type=float, default=0.05)
    p.add_argument("--eval-trips", type=int, default=10,
                   help="held-out trips per agent for evaluation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="load and summarize an edge CSV")
    p.add_argument("--edges", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("stats", help="transition statistics and segment features")
    p.add_argument("--edges", required=True)
    p.add_argument("--trajs", required=True)
    p.add_argument("--out", default=None, help="optional .npz output")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen-anomalies", help="convert normals into detour anomalies")
    p.add_argument("--edges", required=True)
    p.add_argument("--normals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["constrained", "unconstrained"], default="constrained")
    p.add_argument("--rate", type=float, default=0.05)
    p.add_argument("--max-fraction", type=float, default=0.2)
    p.add_argument("--max-retries", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_anomalies)

    p = sub.add_parser("train", help="train a detector and write a checkpoint")
    p.add_argument("--edges", required=True)
    p.add_argument("--trajs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score trajectories with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trajs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=sorted(METRICS), default="cw_nll",
                   help="metric highlighted downstream; all three are written")
    p.add_argument("--per-token", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="detection metrics from score records")
    p.add_argument("--scores", required=True)
    p.add_argument("--metric", choices=sorted(METRICS), default="cw_nll")
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None, help="optional PR-curve CSV")
    p.add_argument("--threshold", type=float, default=None,
                   help="fixed decision threshold instead of the F1 sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="encoding x link-loss grid, three scorings each")
    p.add_argument("--edges", required=True)
    p.add_argument("--trajs", required=True)
    p.add_argument("--eval", required=True, help="labeled evaluation JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    return parser


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # single machine-parsable line, exit 1
        print(f"getad: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
