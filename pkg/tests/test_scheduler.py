import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cachesched.model import (CacheNode, CacheState, FileLibrary, NetworkModel, RequestState,
                              ScheduleDecision, insertions_for, sample_request_sequence,
                              validate_decision)
from cachesched.numerics import delivery_cost
from cachesched.oracle import DiscreteInstance, evaluate_policy, policy_decider, solve_exact
from cachesched.scheduler import (ConfigurationError, PolicyKind, candidate_q, dispatch,
                                  make_policy, schedule_baseline1, schedule_proposed,
                                  transmit_pair)
from cachesched.stats import estimate_region_statistics, sample_channels
from cachesched.tables import build_tables, horizon_for

NODES = (CacheNode((250.0, 0.0), 100.0), CacheNode((-250.0, 0.0), 100.0),
         CacheNode((0.0, 300.0), 90.0))


@pytest.fixture(scope="module")
def setup():
    model = NetworkModel(cache_nodes=NODES, capacities=(2, 2, 3))
    lib = FileLibrary.zipf(5, 1.0, lifetime_frames=2000, request_prob=0.02)
    smp = sample_channels(model, lib, 20_000, 0)
    m = horizon_for(lib, 1e-6)
    tab = build_tables(estimate_region_statistics(smp), lib, m, model.capacities)
    return model, lib, tab, model.cost_params(lib)


def make_request(region, user_gain, node_gains, f=0, stage=3):
    return RequestState(stage, f, (0.0, 0.0), region, user_gain, tuple(node_gains))


def test_no_nodes_serves_user():
    model = NetworkModel()
    lib = FileLibrary.zipf(3, 1.0, lifetime_frames=500, request_prob=0.05)
    smp = sample_channels(model, lib, 20_000, 1)
    tab = build_tables(estimate_region_statistics(smp), lib, horizon_for(lib, 1e-6), ())
    params = model.cost_params(lib)
    req = make_request(0, 3e-12, ())
    dec = schedule_proposed(req, CacheState.empty(0, 3, ()), tab, params)
    cost, power, symbols = transmit_pair(3e-12, params)
    assert dec.target is None and dec.decoding == () and dec.updates == ()
    assert (dec.power, dec.symbols) == (power, symbols)


def test_file_cached_everywhere_serves_user(setup):
    model, lib, tab, params = setup
    state = CacheState.from_sets([[0], [0], [0]], 5, model.capacities)
    req = make_request(0, 5e-12, (1e-12, 4e-12, 2e-13))
    dec = schedule_proposed(req, state, tab, params)
    assert dec.target is None and dec.updates == ()


def test_candidate_q_matches_table_difference(setup):
    # Q of each candidate = q_k F + J_{k+1}(B') - J_{k+1}(B), computed both ways
    model, lib, tab, params = setup
    rng = np.random.default_rng(2)
    for _ in range(40):
        sets = [sorted(rng.choice(5, size=rng.integers(0, cap + 1), replace=False).tolist())
                for cap in model.capacities]
        state = CacheState.from_sets(sets, 5, model.capacities)
        f = int(rng.integers(5))
        gains = 10 ** rng.uniform(-12.5, -10.5, size=4)
        req = make_request(0, gains[0], gains[1:], f=f, stage=int(rng.integers(1, 40)))
        k = req.stage
        for target, q, pair in candidate_q(req, state, tab, params):
            g = req.user_gain if target is None else req.node_gains[target]
            decoders = [c for c in range(3) if req.node_gains[c] >= g]
            nxt = state.with_updates(insertions_for(state, decoders, f))
            ref = tab.q[k] * pair[0] + tab.j_total(nxt, k + 1) - tab.j_total(state, k + 1)
            assert q == pytest.approx(ref, rel=1e-9, abs=1e-9 * tab.j_total(state, k + 1))


def test_fast_ranking_matches_checked_argmin(setup):
    model, lib, tab, params = setup
    rng = np.random.default_rng(8)
    for _ in range(200):
        sets = [sorted(rng.choice(5, size=rng.integers(0, cap + 1), replace=False).tolist())
                for cap in model.capacities]
        state = CacheState.from_sets(sets, 5, model.capacities)
        gains = 10 ** rng.uniform(-13, -10, size=4)
        req = make_request(0, gains[0], gains[1:], f=int(rng.integers(5)),
                           stage=int(rng.integers(1, 60)))
        cands = candidate_q(req, state, tab, params)
        best = min(range(len(cands)), key=lambda i: (cands[i][1], i))
        dec = schedule_proposed(req, state, tab, params)
        assert dec.target == cands[best][0]
        assert (dec.power, dec.symbols) == cands[best][2][1:]


def test_candidates_are_nested(setup):
    model, lib, tab, params = setup
    req = make_request(0, 5e-11, (4e-11, 1e-11, 2e-11))
    cands = candidate_q(req, CacheState.empty(3, 5, model.capacities), tab, params)
    assert [t for t, _, _ in cands] == [None, 0, 2, 1]
    costs = [pair[0] for _, _, pair in cands]
    assert costs == sorted(costs)


def test_baseline1_no_stronger_node(setup):
    model, lib, tab, params = setup
    req = make_request(0, 5e-11, (1e-12, 2e-12, 3e-12))
    dec = schedule_baseline1(req, CacheState.empty(3, 5, model.capacities), params)
    assert dec.updates == () and dec.decoding == ()


def test_baseline1_opportunistic_insert(setup):
    model, lib, tab, params = setup
    req = make_request(0, 1e-12, (5e-12, 2e-13, 3e-12), f=1)
    dec = schedule_baseline1(req, CacheState.empty(3, 5, model.capacities), params)
    assert dec.decoding == (0, 2)
    assert set(dec.updates) == {(0, 1, 1), (2, 1, 1)}


def test_baseline2_first_request_reaches_all_nodes(setup):
    model, lib, tab, params = setup
    pol = make_policy("baseline2", params)
    state = CacheState.empty(3, 5, model.capacities)
    req = make_request(0, 5e-11, (4e-12, 1e-12, 2e-12), f=2)
    first = dispatch(pol, req, state)
    assert first.decoding == (0, 1, 2) and first.target == 1
    second = dispatch(pol, req, state)
    assert second == schedule_baseline1(req, state, params)
    pol.reset()
    assert dispatch(pol, req, state) == first


def test_baseline3_low_popularity_is_baseline1(setup):
    model, lib, tab, params = setup
    pol = make_policy("baseline3", params, capacities=model.capacities)
    state = CacheState.empty(3, 5, model.capacities)
    req = make_request(0, 5e-11, (4e-12, 1e-12, 2e-12), f=4)  # 4 >= every M_c
    assert dispatch(pol, req, state) == schedule_baseline1(req, state, params)
    req = make_request(0, 5e-11, (4e-12, 1e-12, 2e-12), f=2)  # high only at node 2
    assert dispatch(pol, req, state).target == 2


def test_offloaded_request_any_policy(setup):
    model, lib, tab, params = setup
    state = CacheState.from_sets([[1], [], []], 5, model.capacities)
    req = make_request(1, 5e-11, (4e-12, 1e-12, 2e-12), f=1)
    for kind in ("proposed", "baseline1", "baseline2", "baseline3"):
        pol = make_policy(kind, params, tab, model.capacities)
        assert dispatch(pol, req, state) == ScheduleDecision.offload()


def test_configuration_errors(setup):
    model, lib, tab, params = setup
    with pytest.raises(ConfigurationError):
        make_policy("proposed", params)
    with pytest.raises(ConfigurationError):
        make_policy("baseline3", params)
    with pytest.raises(ConfigurationError):
        PolicyKind.parse("greedy")


def decision_stream(kind, setup, seed):
    model, lib, tab, params = setup
    pol = make_policy(kind, params, tab, model.capacities)
    state = CacheState.empty(3, 5, model.capacities)
    out = []
    for req in sample_request_sequence(model, lib, seed):
        dec = dispatch(pol, req, state)
        state = validate_decision(req, dec, state, params)
        out.append(dec)
    return out


@pytest.mark.parametrize("kind", ["proposed", "baseline1", "baseline2", "baseline3"])
def test_same_seed_same_decisions(setup, kind):
    a = decision_stream(kind, setup, 11)
    assert a and a == decision_stream(kind, setup, 11)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), f=st.integers(0, 4),
       gains=st.lists(st.floats(-13.0, -9.5), min_size=4, max_size=4),
       sets=st.lists(st.sets(st.integers(0, 4), max_size=2), min_size=3, max_size=3))
def test_every_policy_decision_is_feasible(setup, seed, f, gains, sets):
    model, lib, tab, params = setup
    state = CacheState.from_sets([sorted(s) for s in sets], 5, model.capacities)
    g = [10 ** x for x in gains]
    req = make_request(seed % 4, g[0], g[1:], f=f, stage=1 + seed % 60)
    for kind in ("proposed", "baseline1", "baseline2", "baseline3"):
        pol = make_policy(kind, params, tab, model.capacities)
        nxt = validate_decision(req, dispatch(pol, req, state), state, params)
        for c in range(3):
            assert nxt.count(c) <= model.capacities[c]


def test_transmit_pair_is_min_cost():
    model = NetworkModel()
    params = model.cost_params(FileLibrary((1.0,)))
    for g in (1e-13, 1e-11, 1e-9):
        assert transmit_pair(g, params)[0] == delivery_cost(g, params)


def test_proposed_close_to_optimal_small_instance():
    sol = solve_exact(DiscreteInstance.simplified(L=40, beta=0.25))
    inst = sol.instance
    tab = build_tables(estimate_region_statistics(sol.samples), inst.library,
                       horizon_for(inst.library, 1e-6), inst.model.capacities)
    pol = make_policy("proposed", inst.params, tab)
    v = evaluate_policy(sol, policy_decider(sol, lambda r, s, k: dispatch(pol, r, s)))
    assert sol.values[1, 0] <= v[1, 0] <= 1.10 * sol.values[1, 0]
