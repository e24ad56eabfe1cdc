"""Command-line front end: run experiments, evaluate the fluid model, verify.

Exit codes for ``run``: 0 converged, 2 diverged (budget expired before the
smallest requested epsilon), 3 crashed (NaN/Inf loss), 1 configuration or
I/O error.  Configuration problems are reported before any worker starts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import dynamics as dyn
from .data import Dataset, load_mnist_idx, synthetic_blobs
from .harness import (
    EXIT_CRASH,
    EXIT_DIVERGE,
    EXIT_USAGE,
    run_experiment,
    sweep,
)
from .nn import Network, cnn_spec, mlp_spec, tiny_spec
from .optimizers import OptimizerConfig, STATUS_CONVERGED, STATUS_CRASH
from .verify import run_verification


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


def _parse_persistence(value: str) -> Optional[int]:
    if value.lower() in ("inf", "unbounded"):
        return None
    try:
        parsed = int(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("persistence must be an int or 'inf'") from exc
    if parsed < 0:
        raise argparse.ArgumentTypeError("persistence must be >= 0")
    return parsed


def _parse_epsilons(value: str) -> tuple[float, ...]:
    try:
        eps = tuple(float(tok) for tok in value.split(",") if tok)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad epsilon list {value!r}") from exc
    if not eps:
        raise argparse.ArgumentTypeError("epsilon list must not be empty")
    return eps


def _parse_dataset(spec: str, seed: int) -> Dataset:
    kind, _, rest = spec.partition(":")
    if kind == "blobs":
        params = {"classes": 3, "dims": 8, "per_class": 200, "spread": 0.3, "seed": seed}
        if rest:
            for token in rest.split(","):
                key, _, value = token.partition("=")
                if key not in params:
                    raise ValueError(f"unknown blobs parameter {key!r}")
                params[key] = float(value) if key == "spread" else int(value)
        return synthetic_blobs(**params)  # type: ignore[arg-type]
    if kind == "mnist":
        tokens = rest.split(",") if rest else []
        paths = [t for t in tokens if "=" not in t]
        if len(paths) != 2:
            raise ValueError(
                "mnist dataset needs images and labels paths: "
                "mnist:IMAGES,LABELS[,limit=N]"
            )
        limit = 10_000
        for token in tokens:
            if token.startswith("limit="):
                limit = int(token.split("=", 1)[1])
        ds = load_mnist_idx(paths[0], paths[1])
        if limit and limit < len(ds):
            ds = Dataset(ds.images[:limit], ds.labels[:limit], ds.image_shape)
        return ds
    raise ValueError(f"unknown dataset kind {kind!r} (use blobs:... or mnist:...)")


def _build_network(arch: str, dataset: Dataset) -> Network:
    if arch == "mlp":
        net = Network(mlp_spec())
        if dataset.images.shape[1] != 784:
            raise ValueError("mlp architecture expects 784 input features")
        return net
    if arch == "cnn":
        if dataset.image_shape != (1, 28, 28):
            raise ValueError("cnn architecture expects 1x28x28 image data")
        return Network(cnn_spec())
    if arch == "tiny":
        return Network(tiny_spec(dataset.images.shape[1], dataset.classes))
    raise ValueError(f"unknown architecture {arch!r}")


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        dataset = _parse_dataset(args.dataset, args.seed)
        network = _build_network(args.arch, dataset)
        configs = [
            OptimizerConfig(
                algo=args.algo,
                m=args.threads,
                eta=args.step_size,
                persistence=args.persistence,
                batch_size=args.batch_size,
                seed=args.seed + i,
                time_budget=args.time_budget,
                epsilon_list=args.epsilon,
                max_updates=args.max_updates,
                eval_every=args.eval_every,
                eval_size=args.eval_size,
                pin_cores=args.pin_cores,
            )
            for i in range(args.repeats)
        ]
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out_dir)
    if len(configs) == 1:
        report = run_experiment(
            configs[0], network, dataset, out_dir=out_dir, append=args.append
        )
        print(
            f"{report.run_id}: {report.status} f0={report.f0:.4f} "
            f"published={report.published}"
        )
        for eps in report.epsilons:
            t = report.eps_time_ns[eps]
            reached = f"{t / 1e9:.3f}s" if t is not None else "not reached"
            print(f"  eps={eps:g}: {reached}")
        print(f"wrote summary/updates/progress/memory CSVs to {out_dir}")
        return report.exit_code()

    reports, summaries = sweep(configs, network, dataset, out_dir=out_dir)
    for rep in reports:
        print(f"{rep.run_id}: {rep.status}")
    for s in summaries:
        print(
            f"setting {s.key.algo} m={s.key.m}: {s.converged}/{s.runs} converged, "
            f"{s.diverged} diverged, {s.crashed} crashed"
        )
    print(f"wrote per-run CSVs and sweep.csv to {out_dir}")
    if any(r.status == STATUS_CRASH for r in reports):
        return EXIT_CRASH
    if all(r.status == STATUS_CONVERGED for r in reports):
        return 0
    return EXIT_DIVERGE


def _cmd_dynamics(args: argparse.Namespace) -> int:
    try:
        params = dyn.DynamicsParams(
            m=args.m,
            t_c=args.tc,
            t_u=args.tu,
            gamma=args.gamma,
            n0=args.n0,
            horizon=args.steps,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    trajectory = dyn.n_t_recurrence(params)
    closed = None
    if params.gamma == 0.0:
        closed = dyn.n_t_closed(params, np.arange(params.horizon + 1)).value
    n_star = dyn.fixed_point(params)
    print(
        f"fixed point n*={n_star:.6f}, stability factor "
        f"{dyn.stability_factor(params):+.4f} "
        f"({'stable' if dyn.is_stable(params) else 'UNSTABLE'})"
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traj_path = out_dir / "dynamics.csv"
    with open(traj_path, "w", encoding="utf-8") as f:
        f.write("step,n_recurrence,n_closed\n")
        for step, value in enumerate(trajectory):
            closed_s = repr(float(closed[step])) if closed is not None else ""
            f.write(f"{step},{float(value)!r},{closed_s}\n")
    print(f"wrote {traj_path}")

    if args.simulate != "none":
        sim = dyn.simulate_events(
            params, seed=args.seed, service=args.simulate, n_events=args.events
        )
        sim_path = out_dir / "dynamics_sim.csv"
        with open(sim_path, "w", encoding="utf-8") as f:
            f.write("time,occupancy\n")
            for t, n in zip(sim.times, sim.occupancy):
                f.write(f"{float(t)!r},{int(n)}\n")
        print(
            f"simulated {args.events} events: time-average occupancy "
            f"{sim.time_average:.4f} (fixed point {n_star:.4f})"
        )
        print(f"wrote {sim_path}")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    checks = run_verification(fast=args.fast)
    for check in checks:
        print(check.line())
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leashed",
        description="Parallel SGD benchmark engine with staleness and memory telemetry",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one training run (or a sweep of repeats)")
    p_run.add_argument("--algo", choices=("seq", "async", "hogwild", "leashed"), required=True)
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--step-size", type=float, default=0.005)
    p_run.add_argument("--batch-size", type=int, default=32)
    p_run.add_argument("--persistence", type=_parse_persistence, default=None,
                       help="max failed publish attempts before dropping a gradient; int or 'inf'")
    p_run.add_argument("--epsilon", type=_parse_epsilons, default=(0.5,),
                       help="comma-separated loss thresholds as fractions of the initial loss")
    p_run.add_argument("--arch", choices=("mlp", "cnn", "tiny"), default="tiny")
    p_run.add_argument("--dataset", default="blobs:",
                       help="blobs:classes=3,dims=8,per_class=200,spread=0.3 or mnist:IMAGES,LABELS[,limit=N]")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--time-budget", type=float, default=120.0)
    p_run.add_argument("--out-dir", default="runs")
    p_run.add_argument("--pin-cores", type=_parse_bool, default=False)
    p_run.add_argument("--repeats", type=int, default=1,
                       help="repeat the run with consecutive seeds and aggregate")
    p_run.add_argument("--append", action="store_true",
                       help="append to existing CSVs in --out-dir instead of overwriting")
    p_run.add_argument("--max-updates", type=int, default=None)
    p_run.add_argument("--eval-every", type=float, default=0.25)
    p_run.add_argument("--eval-size", type=int, default=1000)
    p_run.set_defaults(func=_cmd_run)

    p_dyn = sub.add_parser("dynamics", help="evaluate the retry-loop occupancy model")
    p_dyn.add_argument("--m", type=int, required=True)
    p_dyn.add_argument("--tc", type=float, required=True)
    p_dyn.add_argument("--tu", type=float, required=True)
    p_dyn.add_argument("--gamma", type=float, default=0.0)
    p_dyn.add_argument("--n0", type=float, default=0.0)
    p_dyn.add_argument("--steps", type=int, default=100)
    p_dyn.add_argument("--simulate", choices=("none", "det", "exp"), default="none")
    p_dyn.add_argument("--events", type=int, default=100_000)
    p_dyn.add_argument("--seed", type=int, default=0)
    p_dyn.add_argument("--out-dir", default="runs")
    p_dyn.set_defaults(func=_cmd_dynamics)

    p_verify = sub.add_parser("verify", help="run the concurrency stress/invariant suite")
    p_verify.add_argument("--fast", action="store_true", help="smaller scale for quick checks")
    p_verify.set_defaults(func=_cmd_verify)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
