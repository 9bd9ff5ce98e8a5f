"""Configuration-driven experiment pipelines and report emission.

A run goes graph -> dataset -> dictionary -> fit -> evaluate, then the
optional sweeps, prediction curves and closed-loop control stages. Every
random draw is keyed by a seed stored in the config, so identical configs
produce byte-identical output directories.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from netctl import gemf, koopman, lifting, meanfield, mpc, netgraph
from netctl.errors import NetctlError, ParameterError, ParseError

log = logging.getLogger(__name__)

PRESETS = ("fig3", "fig5", "fig7", "table1", "mpc-budget", "mpc-mincost")
SCALES = ("desk", "paper")


class StageError(NetctlError):
    """A pipeline stage failed; partial artifacts have been written."""

    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class NetworkSpec:
    model: str
    n: int = 100
    avg_degree: float = 10.0
    seed: int = 1
    rewire_p: float | None = None
    k_rbf: int = 200
    r: int = 5
    label: str = ""

    def __post_init__(self):
        if not self.label:
            self.label = self.model.upper()


@dataclass
class CurveSpec:
    initial_fraction: float = 0.1
    input: str = "constant"   # "constant" or "oscillatory"
    beta: float = 0.5          # infection rate for constant input
    period: float = 10.0       # oscillation period, in model steps
    horizon: int = 10
    n_runs: int = 500
    seed: int = 5


@dataclass
class MpcScenario:
    kind: str = "budget"       # "budget" or "mincost"
    u_T: float = 70.0
    p: int = 3
    steps: int = 20
    initial_fraction: float = 0.9
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    n_runs: int = 200
    run_seed: int = 1000
    variants: list = field(default_factory=lambda: ["full", "reduced"])


@dataclass
class ExperimentConfig:
    """Everything a run needs; all randomness is keyed by the seeds here.

    Training ranges are given as infection-rate intervals ``(beta_low,
    beta_high)``; the matching input range is ``[beta0 - beta_high, beta0 -
    beta_low]``.
    """

    preset: str = "custom"
    anchor: str = ""
    networks: list = field(default_factory=lambda: [NetworkSpec("er")])
    beta0: float = 1.0
    delta: float = 2.0
    n_traj: int = 5000
    n_sim: int = 10
    T: float = 1.0
    beta_ranges: list = field(default_factory=lambda: [[0.2, 0.7]])
    data_seed: int = 3
    kmeans_seed: int = 0
    sigma: object = "median-heuristic"
    n_test: int = 200
    n_ref: int = 100
    test_seed: int = 9
    eps: float = 1.0
    repeats: int = 1
    curve: CurveSpec | None = None
    sweep_k_rbf: list = field(default_factory=list)
    sweep_r: list = field(default_factory=list)
    sweep_beta: list = field(default_factory=list)
    mpc: MpcScenario | None = None
    reference: dict = field(default_factory=dict)
    save_datasets: bool = True

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ParameterError(msg)

        need(self.networks, "at least one network is required")
        for net in self.networks:
            need(net.model in ("er", "ws", "geo"), f"unknown graph model {net.model!r}")
            need(net.n >= 2, "networks need at least two nodes")
            need(0 < net.avg_degree <= net.n - 1, "avg_degree must lie in (0, n-1]")
            need(net.k_rbf >= 2, "k_rbf must be at least 2")
            need(1 <= net.r <= net.k_rbf + 1, "r must lie in [1, k_rbf + 1]")
        need(self.beta0 > 0 and self.delta > 0, "beta0 and delta must be positive")
        need(self.n_traj >= 1, f"n_traj must be at least 1, got {self.n_traj}")
        need(self.n_sim >= 1, f"n_sim must be at least 1, got {self.n_sim}")
        need(self.T > 0, "T must be positive")
        need(self.n_test >= 1 and self.n_ref >= 1, "n_test and n_ref must be positive")
        need(self.repeats >= 1, "repeats must be at least 1")
        need(self.eps > 0, "eps must be positive")
        need(self.beta_ranges, "at least one training range is required")
        for lo, hi in self.beta_ranges:
            need(0 <= lo <= hi <= self.beta0, f"range [{lo}, {hi}] must lie within [0, beta0]")
        for b in self.sweep_beta:
            need(0 <= b <= self.beta0, f"sweep beta {b} must lie within [0, beta0]")
        need(all(k >= 2 for k in self.sweep_k_rbf), "sweep_k_rbf entries must be >= 2")
        need(all(r >= 1 for r in self.sweep_r), "sweep_r entries must be >= 1")
        if self.curve is not None:
            c = self.curve
            need(c.input in ("constant", "oscillatory"), f"unknown curve input {c.input!r}")
            need(0 <= c.beta <= self.beta0, "curve beta must lie within [0, beta0]")
            need(0 <= c.initial_fraction <= 1, "initial_fraction must lie in [0, 1]")
            need(c.horizon >= 1 and c.n_runs >= 1, "curve horizon and n_runs must be positive")
        if self.mpc is not None:
            s = self.mpc
            need(s.kind in ("budget", "mincost"), f"unknown MPC scenario {s.kind!r}")
            need(s.p >= 1 and s.steps >= 1, "MPC horizon and steps must be positive")
            need(s.n_runs >= 0, "n_runs must be nonnegative")
            need(0 <= s.initial_fraction <= 1, "initial_fraction must lie in [0, 1]")
            need(set(s.variants) <= {"full", "reduced"} and s.variants, "bad MPC variants")
            if s.kind == "budget":
                need(0 < s.u_T <= self.beta0 * min(n.n for n in self.networks),
                     "u_T must lie in (0, sum(beta0)]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Build a config from JSON data, optionally overriding ``base``."""
        cfg = copy.deepcopy(base) if base is not None else cls()
        known = {f.name for f in fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ParseError(f"{key}: unknown config field")
            if key == "networks":
                value = [_build(NetworkSpec, v, f"networks[{i}]") for i, v in enumerate(value)]
            elif key == "curve" and value is not None:
                value = _build(CurveSpec, value, "curve", getattr(cfg, "curve"))
            elif key == "mpc" and value is not None:
                value = _build(MpcScenario, value, "mpc", getattr(cfg, "mpc"))
            setattr(cfg, key, value)
        return cfg


def _build(kind, data, where, base=None):
    if not isinstance(data, dict):
        raise ParseError(f"{where}: expected an object")
    known = {f.name for f in fields(kind)}
    for key in data:
        if key not in known:
            raise ParseError(f"{where}.{key}: unknown field")
    if base is not None:
        merged = asdict(base)
        merged.update(data)
        data = merged
    try:
        return kind(**data)
    except TypeError as exc:
        raise ParseError(f"{where}: {exc}") from exc


def _families():
    return [NetworkSpec("er", k_rbf=200, r=5), NetworkSpec("ws", rewire_p=0.1, k_rbf=200, r=5),
            NetworkSpec("geo", k_rbf=300, r=10)]


def preset(name: str, scale: str = "desk") -> ExperimentConfig:
    """Named configuration reproducing one figure or table."""
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if scale not in SCALES:
        raise ParameterError(f"unknown scale {scale!r}")
    full_scale = scale == "paper"
    cfg = ExperimentConfig(preset=name, n_traj=20000 if full_scale else 5000,
                           n_test=1000 if full_scale else 200)
    if name == "fig3":
        cfg.anchor = "Fig. 3-4: infected fraction under constant input"
        cfg.beta_ranges = [[0.5, 0.5]]
        cfg.curve = CurveSpec(n_runs=1000 if full_scale else 500)
    elif name == "fig5":
        cfg.anchor = "Fig. 5: errors versus RBF count, reduced order and R"
        cfg.networks = _families()
        cfg.beta_ranges = [[0.5, 0.5]]
        cfg.sweep_k_rbf = [50, 100, 150, 200, 250, 300]
        cfg.sweep_r = [1, 2, 3, 5, 7, 10, 15, 20]
        cfg.sweep_beta = [0.2, 0.3, 0.4, 0.5, 0.7, 1.0]
    elif name == "fig7":
        cfg.anchor = "Fig. 6-7: prediction under time-varying heterogeneous input"
        cfg.beta_ranges = [[0.2, 0.7], [0.0, 1.0]]
        cfg.curve = CurveSpec(input="oscillatory", horizon=20, n_runs=1000 if full_scale else 500)
    elif name == "table1":
        cfg.anchor = "Table 1: errors for heterogeneous inputs"
        cfg.networks = _families()
        cfg.beta_ranges = [[0.2, 0.7], [0.0, 1.0]]
        cfg.repeats = 5
        cfg.reference = {"ER": [11.55, 24.83, 26.48, 65.40], "GEO": [12.50, 28.65, 25.73, 59.65],
                         "WS": [11.39, 24.72, 26.04, 65.80],
                         "columns": ["0.2-0.7 full", "0.2-0.7 reduced", "0-1 full",
                                     "0-1 reduced"]}
    elif name == "mpc-budget":
        cfg.anchor = "Fig. 8-9, Table 2: limited-budget MPC"
        cfg.networks = _families()
        cfg.beta_ranges = [[0.0, 1.0]]
        cfg.mpc = MpcScenario(kind="budget", u_T=70.0, n_runs=1000 if full_scale else 200)
        cfg.reference = {"u_T": 70.0, "p": 3, "transitions": {
            "ER": [29.40, 33.55], "GEO": [92.60, 126.05], "WS": [64.27, 48.11]}}
    elif name == "mpc-mincost":
        cfg.anchor = "Fig. 10-12, Table 2: minimum-cost MPC"
        cfg.networks = _families()
        cfg.beta_ranges = [[0.0, 1.0]]
        cfg.mpc = MpcScenario(kind="mincost", n_runs=1000 if full_scale else 200)
        cfg.reference = {"Q": 1.0, "q": 0.5, "R": 0.3, "r": 0.1, "p": 3, "transitions": {
            "ER": [24.39, 35.10], "GEO": [30.51, 86.21], "WS": [33.80, 45.13]}}
    return cfg


@dataclass
class Table:
    columns: list
    rows: list = field(default_factory=list)

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError("row length does not match the columns")
        self.rows.append(list(values))


@dataclass
class ReportBundle:
    config: ExperimentConfig
    stages: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)   # relative path -> bytes
    models: dict = field(default_factory=dict)      # (label, variant) -> KoopmanModel
    graphs: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)        # (label, variant, seed) -> ClosedLoopLog

    @property
    def failed(self) -> bool:
        return any(s["status"] == "failed" for s in self.stages.values())


def _u_range(cfg, lo, hi):
    return cfg.beta0 - hi, cfg.beta0 - lo


def _range_tag(lo, hi):
    return f"beta{lo:g}-{hi:g}"


@dataclass
class _Fit:
    dictionary: lifting.Dictionary
    dataset: gemf.SnapshotDataset
    samples: np.ndarray
    full: koopman.KoopmanModel
    reduced: koopman.KoopmanModel


def _fit_models(g, params, cfg, net, u_low, u_high, seed, kmeans_seed, k_rbf=None, r=None,
                samples=None, X=None, U=None):
    k_rbf = net.k_rbf if k_rbf is None else k_rbf
    r = net.r if r is None else r
    if X is None:
        X, U = gemf.draw_snapshot_inputs(g.n, cfg.n_traj, u_low, u_high, seed)
    d = lifting.build_dictionary(lifting.kmeans_centers(X, k_rbf, seed=kmeans_seed), cfg.sigma)
    if samples is None:
        samples = gemf.simulate_successors(g, params, X, U, cfg.n_sim, cfg.T, seed)
    ds = gemf.SnapshotDataset(X=X.astype(float), U=U, EPsiY=gemf.average_lift(d, samples),
                              dict_id=d.dict_id, T=cfg.T, n_sim=cfg.n_sim, seed=seed)
    full, _ = koopman.fit_full(ds, d)
    reduced, _ = koopman.fit_reduced(ds, d, min(r, d.size))
    return _Fit(d, ds, samples, full, reduced)


def _test_set(g, params, cfg, lo, hi, seed):
    return koopman.make_test_set(g, params, cfg.n_test, _u_range(cfg, lo, hi), cfg.T,
                                 cfg.n_ref, seed)


def _score(model, ts, eps):
    return koopman.relative_error(model, test_set=ts, eps=eps)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=False) + "\n").encode()


def _stage_graph(b, cfg, params):
    for net in cfg.networks:
        g = netgraph.generate(net.model, net.n, net.avg_degree, seed=net.seed,
                              rewire_p=net.rewire_p)
        b.graphs[net.label] = g
        b.artifacts[f"artifacts/{net.label}/graph.json"] = _json_bytes(netgraph.graph_to_dict(g))
        b.summary.setdefault("networks", {})[net.label] = {
            "edges": g.num_edges, "mean_degree": g.mean_degree(),
            "spectral_radius": netgraph.spectral_radius(g),
            "R": meanfield.epidemic_threshold(g, params[net.label])[0]}


def _dataset_bytes(ds):
    out = {}
    for name, a in (("X.csv", ds.X), ("U.csv", ds.U), ("EPsiY.csv", ds.EPsiY)):
        buf = io.StringIO()
        np.savetxt(buf, a.T, fmt="%.17g", delimiter=",")
        out[name] = buf.getvalue().encode()
    out["manifest.json"] = _json_bytes({"n": ds.n, "m": ds.m, "N": ds.N, "dict_id": ds.dict_id,
                                        "T": ds.T, "n_sim": ds.n_sim, "seed": ds.seed})
    return out


def _stage_fit_evaluate(b, cfg, params):
    errs = Table(["network", "beta_low", "beta_high", "repeat", "err_full", "err_reduced",
                  "median_full", "median_reduced", "err_full_seeded", "err_reduced_seeded"])
    fits = {}
    for net in cfg.networks:
        g, p = b.graphs[net.label], params[net.label]
        for ri, (lo, hi) in enumerate(cfg.beta_ranges):
            u_low, u_high = _u_range(cfg, lo, hi)
            for rep in range(cfg.repeats):
                fit = _fit_models(g, p, cfg, net, u_low, u_high, cfg.data_seed + rep,
                                  cfg.kmeans_seed + rep)
                ts = _test_set(g, p, cfg, lo, hi, cfg.test_seed + rep)
                ef, er = _score(fit.full, ts, cfg.eps), _score(fit.reduced, ts, cfg.eps)
                # all-susceptible starts are absorbing; report the mean without them too
                seeded = ts.X0.sum(axis=0) > 0
                errs.add(net.label, lo, hi, rep, ef.mean, er.mean, ef.median, er.median,
                         float(ef.per_condition[seeded].mean()),
                         float(er.per_condition[seeded].mean()))
                if rep == 0:
                    fits[(net.label, ri)] = fit
                    _save_fit(b, cfg, net.label, ri, fit)
    b.tables["errors_by_range"] = errs
    return fits


def _save_fit(b, cfg, label, ri, fit):
    base = f"artifacts/{label}/{_range_tag(*cfg.beta_ranges[ri])}"
    b.artifacts[f"{base}/dictionary.json"] = _json_bytes(fit.dictionary.to_dict())
    for m in (fit.full, fit.reduced):
        b.artifacts[f"{base}/model_{m.variant}.json"] = _json_bytes(m.to_dict())
    if cfg.save_datasets:
        for name, data in _dataset_bytes(fit.dataset).items():
            b.artifacts[f"{base}/dataset/{name}"] = data
    if ri == 0:
        b.models[(label, "full")] = fit.full
        b.models[(label, "reduced")] = fit.reduced


def _stage_sweeps(b, cfg, params, fits):
    if cfg.sweep_k_rbf:
        t = Table(["k_rbf", "network", "err_full", "err_reduced"])
        for net in cfg.networks:
            g, p = b.graphs[net.label], params[net.label]
            lo, hi = cfg.beta_ranges[0]
            base = fits[(net.label, 0)]
            ts = _test_set(g, p, cfg, lo, hi, cfg.test_seed)
            for k in cfg.sweep_k_rbf:
                fit = _fit_models(g, p, cfg, net, None, None, cfg.data_seed, cfg.kmeans_seed,
                                  k_rbf=k, samples=base.samples, X=base.dataset.X.astype(np.uint8),
                                  U=base.dataset.U)
                t.add(k, net.label, _score(fit.full, ts, cfg.eps).mean,
                      _score(fit.reduced, ts, cfg.eps).mean)
        b.tables["errors_by_rbf"] = t
    if cfg.sweep_r:
        t = Table(["r", "network", "err_full", "err_reduced"])
        for net in cfg.networks:
            g, p = b.graphs[net.label], params[net.label]
            lo, hi = cfg.beta_ranges[0]
            base = fits[(net.label, 0)]
            ts = _test_set(g, p, cfg, lo, hi, cfg.test_seed)
            ef = _score(base.full, ts, cfg.eps).mean
            for r in cfg.sweep_r:
                if r > base.dictionary.size:
                    continue
                red, _ = koopman.fit_reduced(base.dataset, base.dictionary, r)
                t.add(r, net.label, ef, _score(red, ts, cfg.eps).mean)
        b.tables["errors_by_r"] = t
    if cfg.sweep_beta:
        t = Table(["beta", "R", "network", "err_full", "err_reduced"])
        for net in cfg.networks:
            g, p = b.graphs[net.label], params[net.label]
            lam1 = netgraph.spectral_radius(g)
            for beta in cfg.sweep_beta:
                u = cfg.beta0 - beta
                fit = _fit_models(g, p, cfg, net, u, u, cfg.data_seed, cfg.kmeans_seed)
                ts = _test_set(g, p, cfg, beta, beta, cfg.test_seed)
                t.add(beta, beta * lam1 / cfg.delta, net.label,
                      _score(fit.full, ts, cfg.eps).mean, _score(fit.reduced, ts, cfg.eps).mean)
        b.tables["errors_by_R"] = t


def input_schedule(cfg, curve, lo, hi, n) -> np.ndarray:
    """Per-period inputs (horizon x n) for a prediction curve."""
    if curve.input == "constant":
        return np.full((curve.horizon, n), cfg.beta0 - curve.beta)
    rng = np.random.default_rng(np.random.SeedSequence([curve.seed, 0x05c]))
    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    k = np.arange(curve.horizon)[:, None]
    mid, amp = 0.5 * (lo + hi), 0.5 * (hi - lo)
    beta = mid + amp * np.sin(2.0 * np.pi * k / curve.period + phase[None, :])
    return cfg.beta0 - np.clip(beta, lo, hi)


def _stage_curves(b, cfg, params, fits):
    c = cfg.curve
    pairs = [(net, ri) for net in cfg.networks for ri in range(len(cfg.beta_ranges))]
    for net, ri in pairs:
        g, p = b.graphs[net.label], params[net.label]
        lo, hi = cfg.beta_ranges[ri]
        fit = fits[(net.label, ri)]
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0x1f]))
        x0 = mpc.initial_infection(g.n, c.initial_fraction, rng)
        U = input_schedule(cfg, c, lo, hi, g.n)
        ref = gemf.ensemble_fraction_schedule(g, p, x0, U, cfg.T, c.n_runs, c.seed)
        x = x0.astype(float)
        mf = [x.mean()]
        for u in U:
            x = meanfield.simulate_meanfield(g, p, u, x, [cfg.T])[-1]
            mf.append(x.mean())
        kf = koopman.predict_expected(fit.full, x0.astype(float), U, c.horizon).mean(axis=1)
        kr = koopman.predict_expected(fit.reduced, x0.astype(float), U, c.horizon).mean(axis=1)
        t = Table(["t", "gemf", "meanfield", "koopman_full", "koopman_reduced"])
        for k in range(c.horizon + 1):
            t.add(k * cfg.T, ref[k], float(mf[k]), x0.mean() if k == 0 else float(kf[k - 1]),
                  x0.mean() if k == 0 else float(kr[k - 1]))
        name = "fraction_curves" if len(pairs) == 1 else \
            f"fraction_curves_{net.label}_{_range_tag(lo, hi)}"
        b.tables[name] = t
        if c.input == "oscillatory":
            b.tables[f"inputs_{net.label}_{_range_tag(lo, hi)}"] = Table(
                [f"u{i}" for i in range(g.n)], [list(map(float, u)) for u in U])


def _scenario_spec(cfg, s, n):
    if s.kind == "budget":
        return mpc.make_limited_budget_spec(n, cfg.beta0, s.u_T, s.p)
    return mpc.make_min_cost_spec(n, cfg.beta0, s.p)


def _initial(n, s, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x90]))
    return mpc.initial_infection(n, s.initial_fraction, rng)


def _stage_mpc(b, cfg, params):
    s = cfg.mpc
    curves = Table(["network", "controller", "seed", "t", "infected_fraction",
                    "new_infections_cum", "u_total"])
    trans = Table(["network", "controller", "runs", "mean_new_infections", "std_new_infections"])
    finals = Table(["network", "controller", "seed", "final_fraction", "total_new_infections"])
    kkt_max = 0.0
    first = cfg.networks[0].label
    for net in cfg.networks:
        g, p = b.graphs[net.label], params[net.label]
        spec = _scenario_spec(cfg, s, g.n)
        controllers = {v: b.models[(net.label, v)] for v in s.variants}
        if s.kind == "budget":
            controllers["uniform"] = mpc.uniform_allocation(g.n, s.u_T, p.beta0)

        def run(name, x0, seed):
            ctl = controllers[name]
            if name == "uniform":
                return mpc.fixed_input_run(g, p, ctl, x0, s.steps, seed, T=cfg.T)
            return mpc.mpc_closed_loop(g, p, ctl, spec, x0, s.steps, seed)

        for name in controllers:
            for seed in s.seeds:
                try:
                    lg = run(name, _initial(g.n, s, seed), seed)
                except mpc.MpcAbort as exc:
                    b.logs[(net.label, name, seed)] = exc.log
                    raise
                b.logs[(net.label, name, seed)] = lg
                if name != "uniform":
                    kkt_max = max(kkt_max, max(lg.kkt_residual))
                for k, t in enumerate(lg.t):
                    curves.add(net.label, name, seed, t, lg.infected_fraction[k],
                               lg.new_infections_cum[k], lg.u_total[k] if k < len(lg.u_total)
                               else "")
                finals.add(net.label, name, seed, lg.infected_fraction[-1],
                           lg.total_new_infections)
            if s.n_runs:
                counts = []
                for j in range(s.n_runs):
                    seed = s.run_seed + j
                    lg = run(name, _initial(g.n, s, seed), seed)
                    if name != "uniform":
                        kkt_max = max(kkt_max, max(lg.kkt_residual))
                    counts.append(lg.total_new_infections)
                counts = np.array(counts, dtype=float)
                trans.add(net.label, name, s.n_runs, float(counts.mean()), float(counts.std()))
        if net.label == first:
            lead = s.variants[0]
            lg = b.logs[(net.label, lead, s.seeds[0])]
            b.tables["mpc_log"] = Table(
                ["t", "infected_fraction", "new_infections_cum", "u_total", "qp_iters",
                 "kkt_residual"], [list(r.values()) for r in lg.rows()])
            b.tables["mpc_inputs"] = Table([f"u{i}" for i in range(g.n)],
                                           [list(map(float, u)) for u in lg.inputs])
            katz = netgraph.katz_centrality(g)
            t = Table(["node", "katz", "u_full", "u_reduced"])
            mean_u = {v: b.logs[(net.label, v, s.seeds[0])].input_matrix().mean(axis=0)
                      for v in s.variants}
            for i in range(g.n):
                t.add(i, float(katz[i]), *(float(mean_u[v][i]) if v in mean_u else ""
                                           for v in ("full", "reduced")))
            b.tables["control_vs_katz"] = t
            b.summary["katz_spearman"] = {
                v: float(spearmanr(katz, mean_u[v]).statistic) for v in s.variants}
    b.tables["mpc_curves"] = curves
    b.tables["mpc_finals"] = finals
    if s.n_runs:
        b.tables["transitions"] = trans
    b.summary["mpc_kkt_max"] = kkt_max


def run_experiment(cfg: ExperimentConfig, out=None, fmt: str = "csv") -> ReportBundle:
    """Execute every configured stage and, if ``out`` is given, write the report.

    A failing stage is recorded in the bundle, the partial report is written,
    and StageError is raised naming the stage.
    """
    cfg.validate()
    b = ReportBundle(config=cfg)
    b.summary["anchor"] = cfg.anchor
    if cfg.reference:
        b.summary["reference"] = cfg.reference
    params = {net.label: gemf.EpidemicParams.homogeneous(net.n, cfg.beta0, cfg.delta)
              for net in cfg.networks}
    state = {}

    def stage(name, fn):
        try:
            result = fn()
        except Exception as exc:
            b.stages[name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            log.error("stage %s failed: %s", name, exc)
            if out is not None:
                emit_report(b, out, fmt)
            raise StageError(name, str(exc)) from exc
        b.stages[name] = {"status": "ok"}
        return result

    stage("graph", lambda: _stage_graph(b, cfg, params))
    state["fits"] = stage("fit", lambda: _stage_fit_evaluate(b, cfg, params))
    if cfg.sweep_k_rbf or cfg.sweep_r or cfg.sweep_beta:
        stage("sweeps", lambda: _stage_sweeps(b, cfg, params, state["fits"]))
    if cfg.curve is not None:
        stage("curves", lambda: _stage_curves(b, cfg, params, state["fits"]))
    if cfg.mpc is not None:
        stage("mpc", lambda: _stage_mpc(b, cfg, params))
    if out is not None:
        emit_report(b, out, fmt)
    return b


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_bytes(table: Table) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue().encode()


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def emit_report(bundle: ReportBundle, out, fmt: str = "csv") -> dict:
    """Write tables, artifacts and ``manifest.json`` under ``out``.

    ``fmt="csv"`` writes one CSV per table next to ``report.json``;
    ``fmt="json"`` folds the tables into ``report.json``. Returns the manifest.
    """
    if fmt not in ("csv", "json"):
        raise ParameterError(f"unknown report format {fmt!r}")
    out = Path(out)
    files = dict(bundle.artifacts)
    report = {"preset": bundle.config.preset, "anchor": bundle.config.anchor,
              "stages": bundle.stages, "summary": bundle.summary}
    if fmt == "csv":
        for name, table in bundle.tables.items():
            files[f"{name}.csv"] = _csv_bytes(table)
    else:
        report["tables"] = {name: {"columns": t.columns,
                                   "rows": [[_plain(v) for v in row] for row in t.rows]}
                            for name, t in bundle.tables.items()}
    files["report.json"] = _json_bytes(report)
    for rel, data in files.items():
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    manifest = {
        "config": bundle.config.to_dict(),
        "stages": bundle.stages,
        "files": {rel: hashlib.sha256(files[rel]).hexdigest() for rel in sorted(files)},
    }
    (out / "manifest.json").write_bytes(_json_bytes(manifest))
    return manifest
