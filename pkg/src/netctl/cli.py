"""Command-line entry point: ``netctl graph|collect|fit|predict|mpc|experiment``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from netctl import experiments, gemf, koopman, lifting, mpc, netgraph
from netctl.errors import NetctlError


def _params(args, n):
    return gemf.EpidemicParams.homogeneous(n, args.beta0, args.delta)


def _add_rates(p):
    p.add_argument("--beta0", type=float, default=1.0, help="passive infection rate")
    p.add_argument("--delta", type=float, default=2.0, help="recovery rate")


def cmd_graph(args):
    g = netgraph.generate(args.model, args.n, args.degree, seed=args.seed,
                          rewire_p=args.rewire_p)
    netgraph.save_graph(g, args.out)
    print(json.dumps({"n": g.n, "edges": g.num_edges, "mean_degree": g.mean_degree(),
                      "spectral_radius": netgraph.spectral_radius(g)}))


def cmd_collect(args):
    g = netgraph.load_graph(args.graph)
    params = _params(args, g.n)
    X, _ = gemf.draw_snapshot_inputs(g.n, args.n_traj, args.u_low, args.u_high, args.seed)
    d = lifting.build_dictionary(lifting.kmeans_centers(X, args.k_rbf, seed=args.kmeans_seed))
    ds = gemf.collect_dataset(g, params, d, args.n_traj, args.n_sim, args.T, args.u_low,
                              args.u_high, args.seed)
    out = Path(args.out)
    ds.save(out)
    d.save(out / "dictionary.json")
    print(json.dumps({"m": ds.m, "N": ds.N, "dict_id": ds.dict_id, "sigma": d.sigma}))


def cmd_fit(args):
    data = gemf.SnapshotDataset.load(args.data)
    d = lifting.Dictionary.load(args.dictionary or Path(args.data) / "dictionary.json")
    if args.variant == "full":
        model, report = koopman.fit_full(data, d)
    else:
        model, report = koopman.fit_reduced(data, d, args.r)
    model.save(args.out)
    rep = report.to_dict()
    print(json.dumps({k: rep[k] for k in ("residual_AB", "residual_C", "rank_regressor",
                                          "rank_successor")}))


def _initial_state(args, n):
    if args.x0:
        return np.loadtxt(args.x0, delimiter=",").astype(np.uint8).reshape(n)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x90]))
    return mpc.initial_infection(n, args.initial_fraction, rng)


def cmd_predict(args):
    model = koopman.KoopmanModel.load(args.model)
    n = model.dictionary.n
    x0 = _initial_state(args, n)
    U = np.full((args.steps, n), args.u)
    X = koopman.predict_expected(model, x0.astype(float), U, args.steps, clip=args.clip)
    w = sys.stdout
    if args.per_node:
        w.write("t," + ",".join(f"x{i}" for i in range(n)) + "\n")
        w.write("0.0," + ",".join(repr(float(v)) for v in x0) + "\n")
        for k, row in enumerate(X, start=1):
            w.write(f"{k * model.T!r}," + ",".join(repr(float(v)) for v in row) + "\n")
    else:
        w.write("t,infected_fraction\n")
        w.write(f"0.0,{float(x0.mean())!r}\n")
        for k, row in enumerate(X, start=1):
            w.write(f"{k * model.T!r},{float(row.mean())!r}\n")


def cmd_mpc(args):
    g = netgraph.load_graph(args.graph)
    params = _params(args, g.n)
    model = koopman.KoopmanModel.load(args.model)
    if args.scenario == "budget":
        spec = mpc.make_limited_budget_spec(g.n, args.beta0, args.u_T, args.p)
    else:
        spec = mpc.make_min_cost_spec(g.n, args.beta0, args.p)
    x0 = _initial_state(args, g.n)
    try:
        lg = mpc.mpc_closed_loop(g, params, model, spec, x0, args.steps, args.seed)
    except mpc.MpcAbort as exc:
        mpc.save_log(exc.log, args.out)
        raise
    mpc.save_log(lg, args.out)
    print(json.dumps({"final_fraction": lg.infected_fraction[-1],
                      "new_infections": lg.total_new_infections,
                      "max_kkt_residual": max(lg.kkt_residual)}))


def cmd_experiment(args):
    gemf.set_threads(args.threads)
    if args.preset:
        cfg = experiments.preset(args.preset, args.scale)
    else:
        cfg = experiments.ExperimentConfig()
    if args.config:
        cfg = experiments.ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()),
                                                     base=cfg)
    bundle = experiments.run_experiment(cfg, args.out, fmt=args.format)
    print(json.dumps({"out": str(args.out), "stages": bundle.stages}))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netctl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("graph", help="generate a random graph")
    p.add_argument("--model", choices=["er", "ws", "geo"], required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--degree", type=float, default=10.0, help="target average degree")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rewire-p", type=float, default=None, help="Watts-Strogatz rewiring")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("collect", help="simulate a snapshot dataset")
    p.add_argument("--graph", required=True)
    _add_rates(p)
    p.add_argument("--n-traj", type=int, default=5000)
    p.add_argument("--n-sim", type=int, default=10)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--u-low", type=float, default=0.0)
    p.add_argument("--u-high", type=float, default=1.0)
    p.add_argument("--k-rbf", type=int, default=200)
    p.add_argument("--kmeans-seed", type=int, default=0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("fit", help="fit a Koopman model")
    p.add_argument("--data", required=True)
    p.add_argument("--dictionary", default=None)
    p.add_argument("--variant", choices=["full", "reduced"], default="full")
    p.add_argument("--r", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="roll a model forward under constant input")
    p.add_argument("--model", required=True)
    p.add_argument("--x0", default=None, help="CSV file with a binary initial state")
    p.add_argument("--initial-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--u", type=float, default=0.5, help="control on every node")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--per-node", action="store_true")
    p.add_argument("--clip", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("mpc", help="run closed-loop MPC on the simulated plant")
    p.add_argument("--graph", required=True)
    p.add_argument("--model", required=True)
    _add_rates(p)
    p.add_argument("--scenario", choices=["budget", "mincost"], default="budget")
    p.add_argument("--u-T", type=float, default=70.0)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--x0", default=None)
    p.add_argument("--initial-fraction", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("experiment", help="run a preset or configured pipeline")
    p.add_argument("--preset", choices=experiments.PRESETS, default=None)
    p.add_argument("--scale", choices=experiments.SCALES, default="desk")
    p.add_argument("--config", default=None, help="JSON config, applied over the preset")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (NetctlError, OSError) as exc:
        print(f"netctl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
