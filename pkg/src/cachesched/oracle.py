"""Brute-force backward induction on small discretized instances.

The continuous channel law is replaced by finite grids (user locations and
per-link shadowing levels), which turns the request process into a finite
MDP whose value function can be computed exactly. The tables produced here
are the reference against which the approximate tables, the bounds and the
online policies are checked.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import (CacheNode, CacheState, FileLibrary, NetworkModel, RequestState,
                    ScheduleDecision, stage_cost, validate_decision)
from .numerics import CostKernelParams, min_delivery_cost, theta
from .stats import SampleSet
from .tables import stage_weights


class StateSpaceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteInstance:
    model: NetworkModel
    library: FileLibrary
    locations: tuple  # ((x, y), ...)
    location_prob: tuple
    shadow_db: tuple = (-6.0, 0.0, 6.0)
    shadow_prob: tuple = (0.25, 0.5, 0.25)
    max_states: int = 512

    def __post_init__(self):
        if len(self.locations) != len(self.location_prob):
            raise ValueError("one probability per location")
        if len(self.shadow_db) != len(self.shadow_prob):
            raise ValueError("one probability per shadowing level")
        for probs in (self.location_prob, self.shadow_prob):
            if abs(sum(probs) - 1.0) > 1e-12 or min(probs) < 0:
                raise ValueError("grid probabilities must be >= 0 and sum to 1")
        if np.any(np.hypot(*np.asarray(self.locations, dtype=float).T) > self.model.cell_radius):
            raise ValueError("grid location outside the cell")

    @classmethod
    def simplified(cls, L: int = 200, beta: float = 0.1, popularity=(0.7, 0.3),
                   capacity: int = 1, **kw) -> "DiscreteInstance":
        """Two cache nodes, two files, one slot each, a nine-point location
        grid with three points per node disk and three uncovered points."""
        nodes = (CacheNode((260.0, 0.0), 90.0), CacheNode((-130.0, 225.0), 90.0))
        model = NetworkModel(cache_nodes=nodes, capacities=(capacity,) * 2)
        lib = FileLibrary(tuple(popularity), lifetime_frames=L, request_prob=beta)
        locs = ((230.0, 0.0), (300.0, 40.0), (260.0, -70.0),
                (-130.0, 225.0), (-90.0, 190.0), (-170.0, 280.0),
                (30.0, -60.0), (-250.0, -200.0), (420.0, 230.0))
        probs = (0.07, 0.07, 0.06, 0.07, 0.07, 0.06, 0.2, 0.2, 0.2)
        return cls(model, lib, locs, probs, **kw)

    @property
    def params(self) -> CostKernelParams:
        return self.model.cost_params(self.library)

    def enumerate(self) -> tuple[SampleSet, np.ndarray]:
        """Every (location, user shadow, node shadows) combination with its
        probability; also returns the location index of each sample."""
        model = self.model
        locs = np.asarray(self.locations, dtype=float)
        lvl = 10.0 ** (np.asarray(self.shadow_db, dtype=float) / 10.0)
        sp = np.asarray(self.shadow_prob, dtype=float)
        n_links = 1 + model.n_nodes
        combos = np.array(list(itertools.product(range(len(lvl)), repeat=n_links)), dtype=int)
        combo_p = np.prod(sp[combos], axis=1)
        n_loc, n_comb = len(locs), len(combos)
        loc_idx = np.repeat(np.arange(n_loc), n_comb)
        comb_idx = np.tile(np.arange(n_comb), n_loc)
        weight = np.asarray(self.location_prob)[loc_idx] * combo_p[comb_idx]
        keep = weight > 0
        loc_idx, comb_idx, weight = loc_idx[keep], comb_idx[keep], weight[keep]
        user_gain = model.pathloss(np.hypot(locs[loc_idx, 0], locs[loc_idx, 1])) * lvl[combos[comb_idx, 0]]
        node_gain = model.node_pathloss[None, :] * lvl[combos[comb_idx, 1:]]
        samples = SampleSet.from_arrays(model.region_of(locs)[loc_idx], user_gain, node_gain,
                                        self.params, weight=weight / weight.sum(), exact=True)
        return samples, loc_idx

    def states(self) -> list[CacheState]:
        """All cache states respecting the capacities, in a fixed order."""
        m = self.model
        n_f = self.library.n_files
        per_node = []
        for cap in m.capacities:
            sets = [s for j in range(min(cap, n_f) + 1) for s in itertools.combinations(range(n_f), j)]
            per_node.append(sets)
        size = int(np.prod([len(s) for s in per_node]))
        if size > self.max_states:
            raise StateSpaceTooLarge(f"{size} cache states exceed the cap of {self.max_states}")
        return [CacheState.from_sets(choice, n_f, m.capacities)
                for choice in itertools.product(*per_node)]

    def request(self, stage: int, f: int, s: int, samples: SampleSet, loc_idx) -> RequestState:
        x, y = self.locations[int(loc_idx[s])]
        return RequestState(stage=stage, file=f, location=(float(x), float(y)),
                            region=int(samples.region[s]), user_gain=float(samples.user_gain[s]),
                            node_gains=tuple(float(g) for g in samples.node_gain[s]))


def _store_options(state: CacheState, decoding_mask: int, f: int) -> list[CacheState]:
    """Every cache state reachable by storing file f at any subset of the
    decoding nodes, evicting any cached file when a node is full."""
    per_node = []
    for c in range(state.n_nodes):
        opts = [[]]
        if decoding_mask >> c & 1 and not state.holds(c, f):
            if state.count(c) < state.capacities[c]:
                opts.append([(c, f, 1)])
            for j in state.cached(c):
                opts.append([(c, j, -1), (c, f, 1)])
        per_node.append(opts)
    return [state.with_updates([u for part in choice for u in part])
            for choice in itertools.product(*per_node)]


@dataclass
class ExactSolution:
    instance: DiscreteInstance
    states: list
    values: np.ndarray  # (L+2, n_states); row k is stage k, row L+1 is zero
    samples: SampleSet
    loc_idx: np.ndarray
    q: np.ndarray
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {s.key(): i for i, s in enumerate(self.states)}

    def index(self, state: CacheState) -> int:
        return self._index[state.key()]

    def value(self, k: int, state: CacheState) -> float:
        if k >= self.values.shape[0]:
            return 0.0
        return float(self.values[k, self.index(state)])


class _Model:
    """Precomputed per-sample targets and per-state transitions."""

    def __init__(self, inst: DiscreteInstance):
        self.inst = inst
        self.states = inst.states()
        self.index = {s.key(): i for i, s in enumerate(self.states)}
        self.samples, self.loc_idx = inst.enumerate()
        smp = self.samples
        n_c = smp.n_nodes
        self.n_files = inst.library.n_files
        self.p = inst.library.p
        # target 0 is the user, target c+1 is node c
        gains = np.column_stack([smp.user_gain, smp.node_gain])
        costs = np.column_stack([smp.user_cost, smp.node_cost])
        self.valid = np.ones_like(gains, dtype=bool)
        self.valid[:, 1:] = smp.node_gain < smp.user_gain[:, None]
        self.cost = np.where(self.valid, costs, np.inf).T  # (T, S)
        bit = 1 << np.arange(n_c)
        self.dmask = np.stack([((smp.node_gain >= gains[:, [t]]) * bit).sum(axis=1)
                               for t in range(1 + n_c)])  # (T, S)
        self.gains = gains
        n_b = len(self.states)
        self.reach = [[[np.array([self.index[b.key()] for b in _store_options(s, d, f)])
                        for d in range(1 << n_c)] for f in range(self.n_files)] for s in self.states]
        region = smp.region
        self.offload = np.zeros((n_b, self.n_files, smp.size), dtype=bool)
        for i, s in enumerate(self.states):
            for f in range(self.n_files):
                holders = np.flatnonzero(s.bits[:, f]) + 1
                self.offload[i, f] = np.isin(region, holders)
        self.q = stage_weights(inst.library.lifetime_frames, inst.library.lifetime_frames,
                               inst.library.request_prob)

    def best_next(self, w_next: np.ndarray) -> np.ndarray:
        """m[B, f, D] = min of W_{k+1} over the states reachable by storing."""
        n_b, n_d = len(self.states), len(self.reach[0][0])
        m = np.empty((n_b, self.n_files, n_d))
        for i in range(n_b):
            for f in range(self.n_files):
                for d in range(n_d):
                    m[i, f, d] = w_next[self.reach[i][f][d]].min()
        return m

    def rhs(self, k: int, w_next: np.ndarray) -> np.ndarray:
        """Bellman right-hand side at stage k for every state."""
        qk = float(self.q[k]) if k < len(self.q) else 0.0
        m = self.best_next(w_next)
        wt = self.samples.weight
        out = np.zeros(len(self.states))
        # invalid targets cost inf; keep them inf even when q_k = 0
        stage = np.where(self.valid.T, qk * np.where(self.valid.T, self.cost, 0.0), np.inf)
        for f in range(self.n_files):
            cand = stage[None] + m[:, f, :][:, self.dmask]  # (B, T, S)
            best = cand.min(axis=1)
            val = np.where(self.offload[:, f], w_next[:, None], best)
            out += self.p[f] * (val @ wt)
        return out


def solve_exact(instance: DiscreteInstance) -> ExactSolution:
    """W_k(B) for k = 1..L by backward induction, W_{L+1} = 0."""
    mdl = _Model(instance)
    L = instance.library.lifetime_frames
    w = np.zeros((L + 2, len(mdl.states)))
    for k in range(L, 0, -1):
        w[k] = mdl.rhs(k, w[k + 1])
    sol = ExactSolution(instance, mdl.states, w, mdl.samples, mdl.loc_idx, mdl.q)
    sol._model = mdl
    return sol


def _model_of(sol: ExactSolution) -> _Model:
    mdl = getattr(sol, "_model", None)
    if mdl is None:
        mdl = _Model(sol.instance)
        sol._model = mdl
    return mdl


def bellman_residual(sol: ExactSolution, values: np.ndarray | None = None,
                     per_entry: bool = False):
    """max_{k,B} |W_k(B) - RHS_k(B)| for the given table (default: the
    solution's own)."""
    mdl = _model_of(sol)
    w = sol.values if values is None else values
    L = w.shape[0] - 2
    res = np.zeros_like(w)
    for k in range(1, L + 1):
        res[k] = np.abs(w[k] - mdl.rhs(k, w[k + 1]))
    return res if per_entry else float(res.max())


def greedy_policy_from(sol: ExactSolution, k: int, state: CacheState, f: int,
                       s: int) -> ScheduleDecision:
    """Argmin of the Bellman right-hand side for request (f, sample s) at
    stage k; ties go to fewer decoding nodes, then lower power, then fewer
    cache changes."""
    mdl = _model_of(sol)
    i = sol.index(state)
    if mdl.offload[i, f, s]:
        return ScheduleDecision.offload()
    L = sol.values.shape[0] - 2
    w_next = sol.values[k + 1] if k + 1 <= L + 1 else np.zeros(len(sol.states))
    qk = float(mdl.q[k]) if k < len(mdl.q) else 0.0
    params = sol.instance.params
    cands = []
    for t in range(mdl.cost.shape[0]):
        if not mdl.valid[s, t]:
            continue
        d = int(mdl.dmask[t, s])
        _, power, symbols = min_delivery_cost(theta(mdl.gains[s, t], params), params)
        for nxt in mdl.reach[i][f][d]:
            val = qk * mdl.cost[t, s] + w_next[nxt]
            changes = int(np.sum(sol.states[nxt].bits != state.bits))
            cands.append((val, bin(d).count("1"), power, changes, t, d, int(nxt), symbols))
    best = min(c[0] for c in cands)
    tol = 1e-12 * max(abs(best), 1.0)
    val, _, power, _, t, d, nxt, symbols = min(
        (c for c in cands if c[0] <= best + tol), key=lambda c: c[1:4])
    decoding = tuple(c for c in range(state.n_nodes) if d >> c & 1)
    diff = sol.states[nxt].bits.astype(int) - state.bits.astype(int)
    updates = tuple(sorted(((int(c), int(g), int(diff[c, g])) for c, g in zip(*np.nonzero(diff))),
                           key=lambda u: u[2]))
    return ScheduleDecision(True, power, symbols, None if t == 0 else t - 1, decoding, updates)


# ---------------------------------------------------------------------------
# Policy evaluation

Decide = Callable[[int, int, int, int], tuple[float, int]]


def policy_decider(sol: ExactSolution, decide_fn) -> Decide:
    """Wrap ``decide_fn(request, state, k) -> ScheduleDecision`` into a
    memoized (k, state index, file, sample) -> (stage cost, next index) map."""
    mdl = _model_of(sol)
    inst = sol.instance
    params = inst.params
    memo: dict = {}

    def decide(k, i, f, s):
        key = (k, i, f, s)
        hit = memo.get(key)
        if hit is None:
            state = sol.states[i]
            req = inst.request(k, f, s, mdl.samples, mdl.loc_idx)
            dec = decide_fn(req, state, k)
            nxt = validate_decision(req, dec, state, params)
            hit = (stage_cost(req, dec, state, params), sol.index(nxt))
            memo[key] = hit
        return hit

    decide.memo = memo
    return decide


def evaluate_policy(sol: ExactSolution, decide: Decide, k_max: int | None = None) -> np.ndarray:
    """Exact expected remaining cost V_k(B) of a policy; stages beyond
    ``k_max`` (default: the last stage with q_k > 1e-18) are taken as zero."""
    mdl = _model_of(sol)
    L = sol.values.shape[0] - 2
    if k_max is None:
        k_max = int(np.max(np.flatnonzero(mdl.q[:L + 1] > 1e-18)))
    n_b = len(sol.states)
    wt = mdl.samples.weight
    v = np.zeros((L + 2, n_b))
    for k in range(min(k_max, L), 0, -1):
        qk = float(mdl.q[k])
        for i in range(n_b):
            tot = 0.0
            for f in range(mdl.n_files):
                acc = 0.0
                for s in range(mdl.samples.size):
                    cost, nxt = decide(k, i, f, s)
                    acc += wt[s] * (qk * cost + v[k + 1, nxt])
                tot += mdl.p[f] * acc
            v[k, i] = tot
    return v


def rollout(sol: ExactSolution, decide: Decide, n_episodes: int, rng=None,
            initial: CacheState | None = None) -> np.ndarray:
    """Realized total cost of ``n_episodes`` simulated lifetimes."""
    rng = np.random.default_rng(rng)
    mdl = _model_of(sol)
    lib = sol.instance.library
    i0 = sol.index(initial) if initial is not None else 0
    n_req = rng.binomial(lib.lifetime_frames, lib.request_prob, size=n_episodes)
    total_req = int(n_req.sum())
    files = rng.choice(mdl.n_files, size=total_req, p=mdl.p)
    smp = rng.choice(mdl.samples.size, size=total_req, p=mdl.samples.weight)
    out = np.zeros(n_episodes)
    pos = 0
    for e, n in enumerate(n_req):
        i = i0
        cost = 0.0
        for k in range(1, n + 1):
            c, i = decide(k, i, int(files[pos]), int(smp[pos]))
            cost += c
            pos += 1
        out[e] = cost
    return out
