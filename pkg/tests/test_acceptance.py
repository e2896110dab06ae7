"""Acceptance criteria, one test per criterion (C8 is split per policy).

Each test prints a single ``C<n> PASS|FAIL ...`` line to the terminal before
asserting. Run with ``pytest tests/test_acceptance.py -v``.
"""
import dataclasses
import math
import time

import mpmath
import numpy as np
import pytest

from cachesched.bounds import BoundCalculator, g_max
from cachesched.learning import init_learner, learn, learning_events
from cachesched.model import ConstraintViolation, FileLibrary, NetworkModel, ring_layout
from cachesched.numerics import (LN2, CostKernelParams, lambert_w, min_delivery_cost, tail_mass,
                                 tail_prob)
from cachesched.oracle import DiscreteInstance, bellman_residual, policy_decider, rollout, solve_exact
from cachesched.scheduler import dispatch, make_policy
from cachesched.sim import ExperimentConfig, prepare, run_point, run_sweep
from cachesched.stats import estimate_region_statistics, sample_channels
from cachesched.tables import build_tables, horizon_for

pytestmark = pytest.mark.slow

BASELINES = ("baseline1", "baseline2", "baseline3")
VALIDATED = {"episodes": 0, "decisions": 0}


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def paired(a, b):
    """Mean and standard error of the paired difference a - b."""
    d = np.asarray(a) - np.asarray(b)
    d = d[~np.isnan(d)]
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d)))


# --- shared fixtures -------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle():
    inst = DiscreteInstance.simplified()
    t0 = time.perf_counter()
    sol = solve_exact(inst)
    oracle_seconds = time.perf_counter() - t0
    t0 = time.perf_counter()
    horizon = horizon_for(inst.library, 1e-6)
    tab = build_tables(estimate_region_statistics(sol.samples), inst.library, horizon,
                       inst.model.capacities)
    table_seconds = time.perf_counter() - t0
    return sol, tab, oracle_seconds, table_seconds


@pytest.fixture(scope="module")
def gamma_sweep():
    cfg = ExperimentConfig(sweep_axis="zipf_gamma", sweep_values=(0.8, 1.2))
    res = run_sweep(cfg)
    VALIDATED["episodes"] += sum(len(c) for c in res.costs.values())
    return res


@pytest.fixture(scope="module")
def ratio_sweep():
    cfg = ExperimentConfig(sweep_axis="cache_ratio", sweep_values=(0.2, 0.4, 0.6, 0.8))
    res = run_sweep(cfg)
    VALIDATED["episodes"] += sum(len(c) for c in res.costs.values())
    return res


# --- C1 ----------------------------------------------------------------------------

def test_c1_lambert_w(capsys):
    xs = np.concatenate([np.linspace(-1 / math.e, 0.0, 3_000),
                         np.geomspace(1e-300, 1e6, 7_000)])
    xs[0] = -math.exp(-1.0)
    t0 = time.perf_counter()
    ws = [lambert_w(float(x)) for x in xs]
    elapsed = time.perf_counter() - t0
    resid = max(abs(w * math.exp(w) - x) / max(1.0, abs(x)) for w, x in zip(ws, xs))
    special = max(abs(lambert_w(0.0)), abs(lambert_w(math.e) - 1.0),
                  abs(lambert_w(-math.exp(-1.0)) + 1.0))
    ok = resid <= 1e-12 and special <= 1e-12 and elapsed < 1.0
    report(capsys, "C1", ok, f"max scaled residual {resid:.2e}, special points {special:.1e}, "
           f"{len(xs)} points in {elapsed:.3f} s")


# --- C2 ----------------------------------------------------------------------------

def golden_section(f, lo, hi, tol=1e-11):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * max(1.0, abs(a) + abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return min(fc, fd, f(hi))


def golden_cost(th, p):
    """Minimum over log2 P in (-theta, log2 P_B] of (P + w) R_F / (alpha (log2 P + theta))."""
    f = lambda u: (2.0 ** u + p.symbol_weight) * p.file_bits / (p.alpha * (u + th))
    return golden_section(f, -th + 1e-12 * max(1.0, abs(th)), math.log2(p.peak_power))


def test_c2_cost_vs_golden_section(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    while n < 1_000:
        p = CostKernelParams(alpha=float(rng.uniform(0.3, 1.0)), file_bits=float(10 ** rng.uniform(3, 8)),
                             symbol_weight=float(10 ** rng.uniform(-4, 1)),
                             peak_power=float(10 ** rng.uniform(-2, 2)), n_antennas=8,
                             noise_power=1e-13)
        th = float(rng.uniform(-15, 40))
        if math.log2(p.peak_power) + th <= 1e-3:
            continue  # infeasible rate
        cost = min_delivery_cost(th, p)[0]
        worst = max(worst, abs(cost - golden_cost(th, p)) / golden_cost(th, p))
        n += 1
    cont = 0.0
    for _ in range(50):
        p = CostKernelParams(alpha=1.0, file_bits=14e6, symbol_weight=float(10 ** rng.uniform(-4, 0)),
                             peak_power=float(10 ** rng.uniform(-1, 2)), n_antennas=8,
                             noise_power=1e-13)
        lw = p.symbol_weight / p.peak_power
        tb = (lw + math.log(lw) - math.log(p.symbol_weight) + 1.0) / LN2
        lo, hi = min_delivery_cost(tb - 1e-10, p)[0], min_delivery_cost(tb + 1e-10, p)[0]
        cont = max(cont, abs(lo - hi) / hi)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and cont <= 1e-9 and elapsed < 10.0
    report(capsys, "C2", ok, f"max rel diff vs golden section {worst:.2e} over {n} tuples, "
           f"boundary jump {cont:.1e}, {elapsed:.2f} s")


# --- C3 ----------------------------------------------------------------------------

def direct_tails(L, beta):
    """Pr(N >= k) for k = 0..L+1 and E[(N - M)^+] for M = 0..L by exact summation."""
    mpmath.mp.dps = 40
    b = mpmath.mpf(beta)
    pmf = [mpmath.binomial(L, n) * b ** n * (1 - b) ** (L - n) for n in range(L + 1)]
    tail = [mpmath.mpf(0)] * (L + 2)
    for n in range(L, -1, -1):
        tail[n] = tail[n + 1] + pmf[n]
    mass = [mpmath.mpf(0)] * (L + 1)
    for m in range(L - 1, -1, -1):
        mass[m] = mass[m + 1] + tail[m + 1]
    return [float(x) for x in tail], [float(x) for x in mass]


def test_c3_binomial_kernels(capsys):
    rng = np.random.default_rng(3)
    Ls = sorted(set([1, 2, 3, 10, 999, 1000] + rng.integers(1, 1001, 40).tolist()))
    worst_p = worst_m = 0.0
    t0 = time.perf_counter()
    kernel = 0.0
    for L in Ls:
        for beta in (float(10 ** rng.uniform(-4, -0.01)), float(rng.uniform(0.01, 0.99))):
            tp, tm = direct_tails(L, beta)
            s = time.perf_counter()
            ks = np.arange(L + 2)
            got_p = np.asarray(tail_prob(ks, L, beta), dtype=float)
            ms = sorted(set(rng.integers(0, L + 1, 12).tolist() + [0, L]))
            got_m = [tail_mass(int(m), L, beta) for m in ms]
            kernel += time.perf_counter() - s
            worst_p = max(worst_p, float(np.max(np.abs(got_p - tp))))
            worst_m = max(worst_m, max(abs(g - tm[m]) / max(1.0, tm[m]) for g, m in zip(got_m, ms)))
    elapsed = time.perf_counter() - t0
    ok = worst_p <= 1e-10 and worst_m <= 1e-10 and kernel < 10.0
    report(capsys, "C3", ok, f"{len(Ls)} values of L <= 1000: tail_prob abs err {worst_p:.1e}, "
           f"tail_mass scaled err {worst_m:.1e}, kernel time {kernel:.2f} s "
           f"(with exact reference {elapsed:.1f} s)")


# --- C4 ----------------------------------------------------------------------------

def test_c4_oracle_sandwich(oracle, capsys):
    sol, tab, _, _ = oracle
    inst = sol.instance
    gm, gm_se = g_max(inst.model, inst.params,
                      shadowing=(10.0 ** (np.asarray(inst.shadow_db) / 10.0), inst.shadow_prob))
    bc = BoundCalculator(sol.samples, inst.library, tab.horizon, tab.q, gm)
    worst_low = worst_up = -np.inf
    for k in range(1, tab.horizon + 1):
        for i, b in enumerate(sol.states):
            w = sol.values[k, i]
            worst_low = max(worst_low, bc.lower_bound(b, k) - w)
            worst_up = max(worst_up, w - bc.upper_bound(b, k, tab))
    se = 0.0  # exact enumeration of locations and shadowing levels; g_max also exact
    resid = bellman_residual(sol)
    ok = worst_low <= 3 * se and worst_up <= 3 * se + 3 * gm_se and resid <= 1e-9
    report(capsys, "C4", ok, f"{len(sol.states)} states x {tab.horizon} stages: "
           f"max(L - W) = {worst_low:.3g}, max(W - U) = {worst_up:.3g}, "
           f"Bellman residual {resid:.1e}")


# --- C5 ----------------------------------------------------------------------------

def test_c5_policy_near_optimal(oracle, capsys):
    sol, tab, _, _ = oracle
    pol = make_policy("proposed", sol.instance.params, tab)
    decide = policy_decider(sol, lambda r, s, k: dispatch(pol, r, s))
    costs = rollout(sol, decide, 100_000, rng=5)
    VALIDATED["decisions"] += len(decide.memo)
    w1 = sol.values[1, 0]
    rel = (costs.mean() - w1) / w1
    se = costs.std(ddof=1) / math.sqrt(len(costs)) / w1
    ok = abs(rel) <= 0.10
    report(capsys, "C5", ok, f"rollout mean / W1 - 1 = {rel:+.4f} (SE {se:.4f}) over 1e5 episodes")


# --- C6 ----------------------------------------------------------------------------

def test_c6_cost_ordering(gamma_sweep, capsys):
    res = gamma_sweep
    lines, ok = [], True
    for gamma in res.config.sweep_values:
        prop = res.costs[(gamma, "proposed")]
        row = next(r for r in res.rows if r["value"] == gamma and r["policy"] == "proposed")
        for b in BASELINES:
            d, se = paired(res.costs[(gamma, b)], prop)
            ok &= d >= 3 * se
            lines.append(f"g={gamma} {b}-P={d / se:.1f}SE")
        gap = (prop.mean() - row["lower_bound"]) / row["lower_bound"]
        ok &= gap <= 0.25
        lines.append(f"g={gamma} gap to L1 {gap:.3f}")
    report(capsys, "C6", ok, "; ".join(lines))


# --- C7 ----------------------------------------------------------------------------

def test_c7_hitting_rate_order(ratio_sweep, capsys):
    res = ratio_sweep
    order = ("baseline2", "baseline3", "proposed", "baseline1")
    lines, ok = [], True
    for v in res.config.sweep_values:
        zs = []
        for hi, lo in zip(order, order[1:]):
            d, se = paired(res.hits[(v, hi)], res.hits[(v, lo)])
            ok &= d >= -3 * se
            zs.append(f"{d / se:+.1f}" if se > 0 else f"{d:+.3f}")
        lines.append(f"{v}: " + "/".join(zs))
    report(capsys, "C7", ok, "paired z of B2-B3/B3-P/P-B1 per ratio " + "; ".join(lines))


# --- C8 ----------------------------------------------------------------------------

@pytest.mark.parametrize("policy", [
    "proposed", "baseline1", "baseline2",
    pytest.param("baseline3", marks=pytest.mark.xfail(
        strict=True, reason="each extra high-popularity file adds one first transmission "
        "sized to the weakest of all nodes, so the cost grows with the cache ratio")),
])
def test_c8_cache_monotonicity(ratio_sweep, policy, capsys):
    res = ratio_sweep
    vals = res.config.sweep_values
    steps, ok = [], True
    for a, b in zip(vals, vals[1:]):
        d, se = paired(res.costs[(b, policy)], res.costs[(a, policy)])
        ok &= d <= 3 * se
        steps.append(f"{a}->{b}: {d / se:+.1f}SE")
    means = ", ".join(f"{res.costs[(v, policy)].mean():.4g}" for v in vals)
    report(capsys, f"C8[{policy}]", ok, f"means {means}; " + "; ".join(steps))


# --- C9 ----------------------------------------------------------------------------

C9_EVENTS = 100_000
C9_EPISODES = 10_000


def test_c9_learning(capsys):
    cfg = ExperimentConfig(user_layout="three_region", bounds=False)
    model, lib = cfg.model(), cfg.library()
    prior_lib = dataclasses.replace(lib, popularity=(1.0 / lib.n_files,) * lib.n_files)
    prior_model = dataclasses.replace(model, user_regions=())
    horizon = horizon_for(lib, cfg.epsilon)
    t0 = time.perf_counter()
    truth_mu = estimate_region_statistics(sample_channels(model, lib, 400_000, 11)).mu
    learner = init_learner(prior_model, prior_lib, horizon, n_cells=20, n_samples=400_000, rng=1)
    wrong = learner.tables()
    checkpoints = np.unique(np.geomspace(100, C9_EVENTS, 13).astype(int))
    learn(learner, learning_events(model, lib, C9_EVENTS, 20, rng=2), batch=500,
          truth={"p": lib.p, "mu": truth_mu}, checkpoints=checkpoints)
    t = np.log([row["t"] for row in learner.trace])
    slopes = {k: float(np.polyfit(t, np.log([row[k] for row in learner.trace]), 1)[0])
              for k in ("rmse_p", "rmse_mu")}
    costs = {}
    for name, tables in (("learned", learner.tables()), ("wrong", wrong)):
        sc = prepare(cfg, tables=tables)
        costs[name] = run_point(sc, ["proposed"], C9_EPISODES, cfg.seed)[0]["proposed"]
    VALIDATED["episodes"] += 2 * C9_EPISODES
    d, se = paired(costs["wrong"], costs["learned"])
    elapsed = time.perf_counter() - t0
    ok = all(abs(s + 0.5) <= 0.15 for s in slopes.values()) and d >= 3 * se and elapsed < 900
    report(capsys, "C9", ok, f"RMSE slopes p {slopes['rmse_p']:.3f}, mu {slopes['rmse_mu']:.3f}; "
           f"wrong-prior minus learned cost {d:.4g} = {d / se:.1f}SE over {C9_EPISODES} "
           f"paired episodes; {elapsed:.0f} s")


# --- C10 ---------------------------------------------------------------------------

def build_seconds(stats, n_files, horizon, reps=9):
    lib = FileLibrary.zipf(n_files, 1.0, lifetime_frames=100_000, request_prob=0.01)
    caps = (n_files // 2,) * stats.n_nodes  # the high-popularity share is held fixed
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        build_tables(stats, lib, horizon, caps)
        best = min(best, time.perf_counter() - t0)
    return best


def ring_stats(n_nodes):
    model = NetworkModel(cache_nodes=ring_layout(rings=((400.0, n_nodes),), node_radius=60.0),
                         capacities=(1,) * n_nodes)
    return estimate_region_statistics(sample_channels(model, FileLibrary.zipf(4, 1.0), 20_000, 0))


def test_c10_complexity(oracle, capsys):
    s8, s16 = ring_stats(8), ring_stats(16)
    base = build_seconds(s8, 10, 200)
    ratios = {"M": build_seconds(s8, 10, 400) / base,
              "N_C": build_seconds(s16, 10, 200) / base,
              "M_F": build_seconds(s8, 20, 200) / base}
    _, _, oracle_s, table_s = oracle
    speedup = oracle_s / table_s
    ok = all(1.4 <= r <= 2.6 for r in ratios.values()) and speedup >= 5.0
    report(capsys, "C10", ok, "doubling ratios " + ", ".join(f"{k} {v:.2f}" for k, v in ratios.items())
           + f"; oracle {oracle_s:.2f} s vs tables {table_s:.4f} s ({speedup:.0f}x)")


# --- C11 ---------------------------------------------------------------------------

def test_c11_constraints(oracle, gamma_sweep, ratio_sweep, capsys):
    # every episode above ran through validate_decision; any violation raises
    sol, tab, _, _ = oracle
    violations = 0
    for kind in ("proposed",) + BASELINES:
        pol = make_policy(kind, sol.instance.params, tab, sol.instance.model.capacities)
        decide = policy_decider(sol, lambda r, s, k: dispatch(pol, r, s))
        try:
            rollout(sol, decide, 2_000, rng=11)
        except ConstraintViolation:
            violations += 1
        VALIDATED["decisions"] += len(decide.memo)
    ok = violations == 0 and VALIDATED["episodes"] > 0
    report(capsys, "C11", ok, f"{violations} violations; {VALIDATED['episodes']} validated "
           f"episodes and {VALIDATED['decisions']} validated oracle-instance decisions")
