"""Command line entry point: ``cachesched <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bounds import BoundCalculator, g_max
from .learning import estimate_errors, init_learner, learn, learning_events, write_trace
from .oracle import DiscreteInstance, bellman_residual, solve_exact
from .sim import ExperimentConfig, emit_plot_data, episode_seed, load_experiment, prepare, run_episode, run_sweep
from .stats import estimate_region_statistics, sample_channels
from .tables import build_tables, horizon_for


def _seed(args, cfg: ExperimentConfig) -> int:
    """--seed, then $CACHESCHED_SEED, then the config's own seed."""
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CACHESCHED_SEED")
    return int(env) if env else cfg.seed


def _experiment(args) -> ExperimentConfig:
    cfg = load_experiment(args.config) if args.config else ExperimentConfig()
    over = {"seed": _seed(args, cfg)}
    if args.epsilon is not None:
        over["epsilon"] = args.epsilon
    if getattr(args, "policies", None):
        over["policies"] = tuple(args.policies.split(","))
    if getattr(args, "episodes", None):
        over["episodes"] = args.episodes
    return dataclasses.replace(cfg, **over)


def _out(args, name: str) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def cmd_tables(args) -> int:
    cfg = _experiment(args)
    t0 = time.perf_counter()
    sc = prepare(dataclasses.replace(cfg, bounds=False))
    path = _out(args, "tables.npz")
    sc.tables.save(path)
    print(json.dumps({"horizon": sc.horizon, "seconds": time.perf_counter() - t0, "path": str(path)}))
    return 0


def cmd_episode(args) -> int:
    cfg = _experiment(args)
    sc = prepare(dataclasses.replace(cfg, bounds=False))
    out = {}
    for name in cfg.policies:
        m = run_episode(sc, name, episode_seed(cfg.seed, args.episode), log=args.log)
        out[name] = {"total_cost": m.total_cost, "hitting_rate": m.hitting_rate,
                     "n_requests": m.n_requests}
        if args.log:
            path = _out(args, f"episode_{name}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["stage", "file", "target", "power", "symbols", "cost"],
                                   lineterminator="\n")
                w.writeheader()
                w.writerows(m.log)
    print(json.dumps(out, indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    res = run_sweep(cfg)
    csv_path, manifest = emit_plot_data(res.rows, _out(args, "sweep.csv"), cfg)
    print(f"wrote {csv_path} and {manifest}")
    return 0


def _oracle_instance(args) -> DiscreteInstance:
    return DiscreteInstance.simplified(L=args.lifetime, beta=args.beta)


def cmd_oracle(args) -> int:
    inst = _oracle_instance(args)
    t0 = time.perf_counter()
    sol = solve_exact(inst)
    elapsed = time.perf_counter() - t0
    path = _out(args, "oracle_values.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "state", "value"])
        for k in range(1, sol.values.shape[0] - 1):
            for i, b in enumerate(sol.states):
                w.writerow([k, repr(b), repr(float(sol.values[k, i]))])
    print(json.dumps({"states": len(sol.states), "seconds": elapsed,
                      "bellman_residual": bellman_residual(sol), "path": str(path)}))
    return 0


def cmd_bounds(args) -> int:
    """Bounds and approximate values for every (k, B) of the oracle instance,
    with the exact value alongside."""
    inst = _oracle_instance(args)
    sol = solve_exact(inst)
    smp = sol.samples
    horizon = horizon_for(inst.library, args.epsilon if args.epsilon is not None else 1e-6)
    tab = build_tables(estimate_region_statistics(smp), inst.library, horizon, inst.model.capacities)
    gm, _ = g_max(inst.model, inst.params,
                  shadowing=(10.0 ** (np.asarray(inst.shadow_db) / 10.0), inst.shadow_prob))
    bc = BoundCalculator(smp, inst.library, horizon, tab.q, gm)
    path = _out(args, "bounds.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "state", "lower_1", "lower_2", "lower", "approx", "upper", "exact"])
        for k in range(1, horizon + 1):
            for i, b in enumerate(sol.states):
                l1, l2 = bc.lower_bound_1(b, k), bc.lower_bound_2(b, k)
                w.writerow([k, repr(b)] + [repr(float(v)) for v in (
                    l1, l2, max(l1, l2), tab.j_total(b, k), bc.upper_bound(b, k, tab), sol.values[k, i])])
    print(f"wrote {path}")
    return 0


def cmd_learn(args) -> int:
    cfg = _experiment(args)
    cfg = dataclasses.replace(cfg, user_layout="three_region") if not args.config else cfg
    model, lib = cfg.model(), cfg.library()
    prior_lib = dataclasses.replace(lib, popularity=(1.0 / lib.n_files,) * lib.n_files)
    prior_model = dataclasses.replace(model, user_regions=())
    rng = np.random.default_rng(cfg.seed)
    horizon = horizon_for(lib, cfg.epsilon)
    learner = init_learner(prior_model, prior_lib, horizon, n_cells=args.cells,
                           threshold=args.threshold, n_samples=cfg.stat_samples, rng=rng)
    truth = {"p": lib.p, "mu": estimate_region_statistics(sample_channels(model, lib, cfg.stat_samples, rng)).mu}
    events = learning_events(model, lib, args.events, args.cells, rng)
    checkpoints = np.unique(np.geomspace(args.batch, args.events, 12).astype(int))
    learn(learner, events, batch=args.batch, truth=truth, checkpoints=checkpoints)
    path = _out(args, "learning_trace.csv")
    write_trace(learner.trace, path)
    print(json.dumps({"t": learner.t, **estimate_errors(learner, truth), "trace": str(path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cachesched", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (ExperimentConfig fields)")
    common.add_argument("--seed", type=int, default=None,
                        help="root seed (default: $CACHESCHED_SEED, else the config seed)")
    common.add_argument("--epsilon", type=float, default=None, help="horizon truncation level")
    common.add_argument("--output", default="out", help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tables", parents=[common], help="build and save value tables")
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("episode", parents=[common], help="simulate one lifetime per policy")
    p.add_argument("--policies", help="comma separated policy names")
    p.add_argument("--episode", type=int, default=0, help="episode index within the seed")
    p.add_argument("--log", action="store_true", help="write per-stage CSV logs")
    p.set_defaults(func=cmd_episode)

    p = sub.add_parser("sweep", parents=[common], help="Monte Carlo sweep to CSV + manifest")
    p.add_argument("--policies", help="comma separated policy names")
    p.add_argument("--episodes", type=int, help="episodes per point")
    p.set_defaults(func=cmd_sweep)

    for name, func, text in (("oracle", cmd_oracle, "solve the small instance exactly"),
                             ("bounds", cmd_bounds, "bounds table on the small instance")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--lifetime", type=int, default=200, help="L of the small instance")
        p.add_argument("--beta", type=float, default=0.1, help="per-frame request probability")
        p.set_defaults(func=func)

    p = sub.add_parser("learn", parents=[common], help="run the online estimators")
    p.add_argument("--events", type=int, default=100_000)
    p.add_argument("--batch", type=int, default=200)
    p.add_argument("--cells", type=int, default=1, help="cells sharing popularity counts")
    p.add_argument("--threshold", type=float, default=0.0, help="table refresh threshold")
    p.set_defaults(func=cmd_learn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
