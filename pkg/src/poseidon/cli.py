"""Command-line entry point: ``poseidon plan | train | bench | launch``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .bench import LOADBAL_COLUMNS, SCALING_COLUMNS, Scenario, run_load_balance, run_scaling, to_csv
from .coordinator import DEFAULT_BASE_PORT
from .engine import WorkerData, parse_dataset_arg
from .modelspec import ConfigError, load_cluster, load_model
from .planner import format_plan, plan
from .runtime import IterationMetrics, default_dataset, launch_node, train_distributed
from .syncer import MODES, routes_for_mode


def _env(name: str, default=None):
    return os.environ.get(name, default)


def _write_metrics(path: str, metrics: list[IterationMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(IterationMetrics.COLUMNS)
        for m in metrics:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in m.row()])


def cmd_plan(args) -> int:
    model, cluster = load_model(args.model), load_cluster(args.cluster)
    if args.plan_mode == "hybrid":
        p = plan(model, cluster)
    else:
        p, _ = routes_for_mode(model, cluster, args.plan_mode)
    sys.stdout.write(format_plan(p, args.format))
    return 0


def _iterations(model, cluster, data, epochs: int, seed: int) -> int:
    per_epoch = min(WorkerData(data, r, cluster.n_workers, model.batch_size, seed).per_epoch
                    for r in range(cluster.n_workers))
    return epochs * per_epoch


def cmd_train(args) -> int:
    model, cluster = load_model(args.model), load_cluster(args.cluster)
    data = (parse_dataset_arg(args.dataset, args.seed) if args.dataset
            else default_dataset(model, cluster.n_workers, args.seed))
    iterations = args.iterations or _iterations(model, cluster, data, args.epochs, args.seed)
    res = train_distributed(model, cluster, args.plan_mode, iterations=iterations, lr=args.lr, seed=args.seed,
                            data=data, backend=args.backend, pool_size=args.pool_size)
    if args.out:
        _write_metrics(args.out, res.metrics[0])
    print(f"{iterations} iterations, final loss {res.losses[-1]:.6f}")
    return 0


def cmd_bench(args) -> int:
    scn = Scenario.load(args.scenario)
    if args.kind == "scaling":
        text = to_csv(run_scaling(scn), SCALING_COLUMNS)
    else:
        text = to_csv(run_load_balance(scn), LOADBAL_COLUMNS)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_launch(args) -> int:
    missing = [n for n in ("model", "cluster", "rank") if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"launch needs {', '.join('--' + m for m in missing)} (or the POSEIDON_* variables)")
    model, cluster = load_model(args.model), load_cluster(args.cluster)
    rank = int(args.rank)
    if args.role == "coordinator":
        if rank != 0:
            raise ConfigError("the coordinator is worker rank 0")
        node = cluster.node_of_worker(0)
    elif args.role == "worker":
        node = cluster.node_of_worker(rank)
    else:
        node = cluster.node_of_server(rank)
    data = parse_dataset_arg(args.dataset, args.seed) if args.dataset else default_dataset(
        model, cluster.n_workers, args.seed)
    cfg = {"iterations": args.iterations or _iterations(model, cluster, data, args.epochs, args.seed),
           "lr": args.lr, "seed": args.seed, "dataset": args.dataset, "timeout": args.timeout}
    res = launch_node(model, cluster, node, base_port=int(args.base_port), mode=args.plan_mode,
                      train_cfg=cfg if node == 0 else None, timeout=args.timeout)
    if res is not None:
        if args.out:
            _write_metrics(args.out, res.metrics[0])
        print(f"node {node}: {len(res.losses)} iterations, final local loss {res.losses[-1]:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poseidon", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print the per-layer communication plan")
    p.add_argument("--model", required=True)
    p.add_argument("--cluster", required=True)
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--plan-mode", choices=MODES, default="hybrid")
    p.set_defaults(func=cmd_plan)

    def training_flags(q):
        q.add_argument("--plan-mode", choices=MODES, default="hybrid")
        q.add_argument("--epochs", type=int, default=1)
        q.add_argument("--iterations", type=int, default=None, help="overrides --epochs")
        q.add_argument("--lr", type=float, default=0.1)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--dataset", default=None, help="synthetic:<n>:<dim>:<classes>")
        q.add_argument("--out", default=None, help="metrics CSV")

    t = sub.add_parser("train", help="train with every node in this process")
    t.add_argument("--model", required=True)
    t.add_argument("--cluster", required=True)
    training_flags(t)
    t.add_argument("--backend", choices=("tcp", "sim"), default="tcp")
    t.add_argument("--pool-size", type=int, default=4)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="simulated scaling or load-balance experiment")
    b.add_argument("kind", choices=("scaling", "loadbal"))
    b.add_argument("--scenario", required=True)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    la = sub.add_parser("launch", help="run one node of a multi-process job")
    la.add_argument("--role", choices=("coordinator", "worker", "server"), default=_env("POSEIDON_ROLE", "worker"))
    la.add_argument("--rank", default=_env("POSEIDON_RANK"))
    la.add_argument("--model", default=_env("POSEIDON_MODEL"))
    la.add_argument("--cluster", default=_env("POSEIDON_CLUSTER"))
    la.add_argument("--base-port", default=_env("POSEIDON_BASE_PORT", str(DEFAULT_BASE_PORT)))
    la.add_argument("--timeout", type=float, default=60.0)
    training_flags(la)
    la.set_defaults(func=cmd_launch)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
