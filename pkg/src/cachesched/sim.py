"""Monte Carlo experiment harness: episodes, sweeps and plot-ready output."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import BoundCalculator, g_max
from .model import (CacheState, ConstraintViolation, FileLibrary, NetworkModel, model_from_dict,
                    sample_request_sequence, stage_cost, validate_decision)
from .scheduler import Policy, PolicyKind, dispatch, make_policy
from .stats import estimate_region_statistics, sample_channels
from .tables import ValueTables, build_tables, horizon_for

AXES = ("cache_ratio", "zipf_gamma", "mean_requests")
ALL_POLICIES = ("proposed", "baseline1", "baseline2", "baseline3")


@dataclass(frozen=True)
class ExperimentConfig:
    n_files: int = 10
    zipf_gamma: float = 1.2
    cache_ratio: float = 0.6  # M_c / M_F at every node
    lifetime_frames: int = 100_000
    mean_requests: float = 100.0  # beta L
    file_bits: float = 14e6
    user_layout: str = "uniform"  # or "three_region"
    epsilon: float = 1e-6
    episodes: int = 500
    policies: tuple = ALL_POLICIES
    sweep_axis: str | None = None
    sweep_values: tuple = ()
    seed: int = 0
    stat_samples: int = 400_000
    initial_cache: tuple | None = None  # per node, files cached at the start
    model_overrides: dict = field(default_factory=dict)
    bounds: bool = True

    def __post_init__(self):
        if self.episodes < 30:
            raise ValueError("need at least 30 episodes per point")
        if list(self.sweep_values) != sorted(self.sweep_values):
            raise ValueError("sweep values must be sorted")
        if self.sweep_axis is not None and self.sweep_axis not in AXES:
            raise ValueError(f"sweep axis must be one of {AXES}")
        if self.user_layout not in ("uniform", "three_region"):
            raise ValueError("user_layout must be 'uniform' or 'three_region'")
        for p in self.policies:
            PolicyKind.parse(p)
        if not 0 <= self.mean_requests <= self.lifetime_frames:
            raise ValueError("need 0 <= beta L <= L")

    @property
    def capacity(self) -> int:
        return max(0, int(round(self.cache_ratio * self.n_files)))

    def model(self) -> NetworkModel:
        over = dict(self.model_overrides)
        over.setdefault("capacities", self.capacity)
        over.setdefault("user_regions", "three_region" if self.user_layout == "three_region" else None)
        return model_from_dict(over)

    def library(self) -> FileLibrary:
        return FileLibrary.zipf(self.n_files, self.zipf_gamma, file_bits=self.file_bits,
                                lifetime_frames=self.lifetime_frames,
                                request_prob=self.mean_requests / self.lifetime_frames)

    def at(self, value) -> "ExperimentConfig":
        """The configuration of one sweep point."""
        if self.sweep_axis is None:
            return self
        return dataclasses.replace(self, **{self.sweep_axis: value, "sweep_axis": None,
                                            "sweep_values": ()})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["policies"] = list(self.policies)
        d["sweep_values"] = list(self.sweep_values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        for k in ("policies", "sweep_values"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("initial_cache") is not None:
            d["initial_cache"] = tuple(tuple(x) for x in d["initial_cache"])
        return cls(**d)


def load_experiment(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


@dataclass
class Scenario:
    """Everything an episode needs, built once per configuration."""

    config: ExperimentConfig
    model: NetworkModel
    library: FileLibrary
    tables: ValueTables
    horizon: int
    bounds: BoundCalculator | None = None

    @property
    def params(self):
        return self.model.cost_params(self.library)

    def initial_state(self) -> CacheState:
        m, lib = self.model, self.library
        if self.config.initial_cache is None:
            return CacheState.empty(m.n_nodes, lib.n_files, m.capacities)
        return CacheState.from_sets(self.config.initial_cache, lib.n_files, m.capacities)

    def policy(self, name) -> Policy:
        return make_policy(name, self.params, self.tables, self.model.capacities)


def prepare(config: ExperimentConfig, tables: ValueTables | None = None) -> Scenario:
    model, lib = config.model(), config.library()
    rng = np.random.default_rng([config.seed, 7])
    horizon = horizon_for(lib, config.epsilon)
    samples = sample_channels(model, lib, config.stat_samples, rng)
    if tables is None:
        tables = build_tables(estimate_region_statistics(samples), lib, horizon, model.capacities)
    bc = None
    if config.bounds:
        gm, _ = g_max(model, model.cost_params(lib), n=config.stat_samples, rng=rng)
        bc = BoundCalculator(samples, lib, tables.horizon, tables.q, gm)
    return Scenario(config, model, lib, tables, tables.horizon, bc)


@dataclass
class EpisodeMetrics:
    total_cost: float
    hitting_rate: float | None  # None when the lifetime saw no request
    n_requests: int
    log: list | None = None

    def __post_init__(self):
        if self.total_cost < 0:
            raise ValueError("negative total cost")
        if self.hitting_rate is not None and not 0.0 <= self.hitting_rate <= 1.0:
            raise ValueError("hitting rate outside [0, 1]")


def episode_seed(seed: int, episode: int) -> np.random.SeedSequence:
    """Request streams depend only on (seed, episode), so policies and sweep
    points that share the library see identical requests."""
    return np.random.SeedSequence([seed, episode])


def run_episode(scenario: Scenario, policy: Policy | str, seed, log: bool = False) -> EpisodeMetrics:
    """Simulate one lifetime; every decision passes the constraint validator."""
    if isinstance(policy, (str, PolicyKind)):
        policy = scenario.policy(policy)
    policy.reset()
    params = scenario.params
    requests = sample_request_sequence(scenario.model, scenario.library, np.random.default_rng(seed))
    state = scenario.initial_state()
    total = 0.0
    hits = 0
    rows = [] if log else None
    for req in requests:
        dec = dispatch(policy, req, state)
        cost = stage_cost(req, dec, state, params)
        try:
            nxt = validate_decision(req, dec, state, params)
        except ConstraintViolation as exc:
            raise ConstraintViolation(f"stage {req.stage}, file {req.file}: {exc}") from exc
        hits += not dec.transmit
        total += cost
        if log:
            rows.append({"stage": req.stage, "file": req.file,
                         "target": "" if dec.target is None else dec.target,
                         "power": dec.power, "symbols": dec.symbols, "cost": cost})
        state = nxt
    n = len(requests)
    return EpisodeMetrics(total, hits / n if n else None, n, rows)


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return math.nan, math.nan
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.nan
    return float(x.mean()), se


@dataclass
class SweepResult:
    rows: list
    costs: dict  # (point, policy) -> per-episode total cost
    hits: dict  # (point, policy) -> per-episode hitting rate (NaN when no request)
    config: ExperimentConfig


def run_point(scenario: Scenario, policies, episodes: int, seed: int):
    costs, hits = {}, {}
    for name in policies:
        pol = scenario.policy(name)
        c = np.empty(episodes)
        h = np.empty(episodes)
        for e in range(episodes):
            m = run_episode(scenario, pol, episode_seed(seed, e))
            c[e] = m.total_cost
            h[e] = np.nan if m.hitting_rate is None else m.hitting_rate
        costs[name], hits[name] = c, h
    return costs, hits


def run_sweep(config: ExperimentConfig) -> SweepResult:
    """Mean and standard error of cost and hitting rate for every (point,
    policy), with the bound overlays at the initial cache state."""
    points = list(config.sweep_values) if config.sweep_axis else [None]
    rows, costs, hits = [], {}, {}
    for value in points:
        cfg = config.at(value) if value is not None else config
        sc = prepare(cfg)
        c, h = run_point(sc, cfg.policies, cfg.episodes, cfg.seed)
        b0 = sc.initial_state()
        lower = upper = math.nan
        if sc.bounds is not None:
            lower = sc.bounds.lower_bound(b0, 1)
            upper = sc.bounds.upper_bound(b0, 1, sc.tables)
        for name in cfg.policies:
            mc, sc_ = _mean_se(c[name])
            hv = h[name][~np.isnan(h[name])]
            mh, sh = _mean_se(hv)
            rows.append({"axis": config.sweep_axis or "", "value": "" if value is None else value,
                         "policy": name, "episodes": cfg.episodes, "mean_cost": mc, "se_cost": sc_,
                         "mean_hitting_rate": mh, "se_hitting_rate": sh,
                         "lower_bound": lower, "upper_bound": upper})
            costs[(value, name)] = c[name]
            hits[(value, name)] = h[name]
    return SweepResult(rows, costs, hits, config)


COLUMNS = ("axis", "value", "policy", "episodes", "mean_cost", "se_cost", "mean_hitting_rate",
           "se_hitting_rate", "lower_bound", "upper_bound")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def emit_plot_data(rows, path, config: ExperimentConfig | None = None) -> tuple[Path, Path]:
    """Tidy CSV plus a JSON manifest (axes, units, seed, config) next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in COLUMNS})
    manifest = {
        "data": path.name,
        "columns": list(COLUMNS),
        "axes": {"x": config.sweep_axis if config else None,
                 "y": ["mean_cost", "mean_hitting_rate"]},
        "units": {"mean_cost": "weighted energy-plus-symbols (P + w) N",
                  "mean_hitting_rate": "fraction of requests", "cache_ratio": "M_c / M_F",
                  "zipf_gamma": "Zipf exponent", "mean_requests": "beta L"},
        "seed": config.seed if config else None,
        "config": config.to_dict() if config else None,
    }
    mpath = path.with_suffix(".json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path, mpath


def load_manifest(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("data", "columns", "axes", "units", "seed", "config"):
        if key not in doc:
            raise ValueError(f"manifest lacks {key!r}")
    return doc
