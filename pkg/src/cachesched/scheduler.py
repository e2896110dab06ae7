"""Online scheduling policies: the value-function policy and three baselines.

Every policy sees one non-offloadable request at a time and returns a
:class:`ScheduleDecision` carrying the transmit pair (P, N), the receiver
whose rate exponent sized it, the nodes guaranteed to decode and the cache
updates. All policies share the popularity insertion rule.
"""
from __future__ import annotations

import enum

import numpy as np

from .model import (CacheState, RequestState, ScheduleDecision, insertions_for,
                    popularity_insert)
from .numerics import (CostKernelParams, ergodic_rate_array, ergodic_rate_exact,
                       min_delivery_cost, theta)
from .oracle import greedy_policy_from
from .tables import ValueTables


class ConfigurationError(ValueError):
    pass


class PolicyKind(enum.Enum):
    PROPOSED = "proposed"
    BASELINE1 = "baseline1"
    BASELINE2 = "baseline2"
    BASELINE3 = "baseline3"
    ORACLE_GREEDY = "oracle"

    @classmethod
    def parse(cls, name: str) -> "PolicyKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigurationError(f"unknown policy {name!r}") from None


def _inflate(power: float, symbols: float, gain: float, params: CostKernelParams):
    """Smallest symbol count (to bisection precision) reaching R_F exactly."""
    target = params.file_bits
    lo, hi = 1.0, 2.0
    while ergodic_rate_exact(power, symbols * hi, gain, params) < target:
        hi *= 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ergodic_rate_exact(power, symbols * mid, gain, params) >= target:
            hi = mid
        else:
            lo = mid
    symbols *= hi
    return (power + params.symbol_weight) * symbols, power, symbols


def transmit_pair(gain: float, params: CostKernelParams) -> tuple[float, float, float]:
    """(cost, P, N) for a receiver of large-scale gain ``gain``.

    The closed-form N comes from the high-SINR rate; it is scaled up by the
    smallest factor making the exact ergodic rate reach R_F. Since
    E[log(1 + sX)] > E[log(sX)] the factor is 1 in practice, but the check
    keeps the decoding constraint exact.
    """
    cost, power, symbols = min_delivery_cost(theta(gain, params), params)
    if ergodic_rate_exact(power, symbols, gain, params) < params.file_bits:
        return _inflate(power, symbols, gain, params)
    return cost, power, symbols


def transmit_pairs(gains, params: CostKernelParams) -> list[tuple[float, float, float]]:
    """:func:`transmit_pair` for several receivers with one batched rate check."""
    pairs = [min_delivery_cost(theta(g, params), params) for g in gains]
    if not pairs:
        return []
    rates = ergodic_rate_array([p[1] for p in pairs], [p[2] for p in pairs], list(gains), params)
    return [pair if rate >= params.file_bits else _inflate(pair[1], pair[2], g, params)
            for pair, rate, g in zip(pairs, rates.tolist(), gains)]


def _decision(request: RequestState, state: CacheState, params: CostKernelParams,
              target: int | None, pair=None) -> ScheduleDecision:
    gain = request.user_gain if target is None else request.node_gains[target]
    _, power, symbols = pair or transmit_pair(gain, params)
    decoding = tuple(c for c, g in enumerate(request.node_gains) if g >= gain)
    updates = tuple(insertions_for(state, decoding, request.file))
    return ScheduleDecision(True, power, symbols, target, decoding, updates)


def candidate_q(request: RequestState, state: CacheState, tables: ValueTables,
                params: CostKernelParams, k: int | None = None, checked: bool = True):
    """Q values of every candidate target, up to a state-dependent constant.

    Candidates are the user first, then each node weaker than the user in
    order of decreasing gain; each entry is ``(target, Q, pair)``. Q is the
    stage cost q_k F(theta_target) plus the change in sum_c J^c_{k+1} caused
    by the insertions at the nodes able to decode. With ``checked=False`` the
    pairs are the closed form without the exact-rate check, which can only
    understate a cost.
    """
    k = request.stage if k is None else k
    f = request.file
    qk = float(tables.q[k]) if k <= tables.horizon else 0.0
    gains = request.node_gains
    bits = state.bits
    # per-node change of J^c_{k+1} if node c decodes and applies the rule
    delta = np.zeros(len(gains))
    if k + 1 <= tables.horizon:
        for c in range(len(gains)):
            ups = popularity_insert(state, c, f)
            if ups:
                row = bits[c].copy()
                for _, g, d in ups:
                    row[g] = d > 0
                delta[c] = tables.j_row(row.tolist(), k + 1, c) - tables.j_row(bits[c].tolist(), k + 1, c)
    gu = request.user_gain
    order = sorted(range(len(gains)), key=lambda c: -gains[c])
    free = sum(delta[c] for c in order if gains[c] >= gu)
    weaker = [c for c in order if gains[c] < gu]
    cand_gains = [gu] + [gains[c] for c in weaker]
    if checked:
        pairs = transmit_pairs(cand_gains, params)
    else:
        pairs = [min_delivery_cost(theta(g, params), params) for g in cand_gains]
    out = [(None, qk * pairs[0][0] + free, pairs[0])]
    acc = free
    for c, pair in zip(weaker, pairs[1:]):
        acc += delta[c]
        out.append((c, qk * pair[0] + acc, pair))
    return out


def schedule_proposed(request: RequestState, state: CacheState, tables: ValueTables,
                      params: CostKernelParams, k: int | None = None) -> ScheduleDecision:
    """Minimize q_k F + sum_c J^c_{k+1}(B') over the candidate targets; ties
    go to the earlier candidate, i.e. to fewer guaranteed decoders.

    Candidates are ranked on closed-form costs first. The exact-rate check
    only ever raises a cost, so if the winner passes it unchanged the ranking
    is the checked one; otherwise every candidate is rescored with checks.
    """
    def argmin(cands):
        best = None
        for target, q, pair in cands:
            if best is None or q < best[1]:
                best = (target, q, pair)
        return best

    best = argmin(candidate_q(request, state, tables, params, k, checked=False))
    gain = request.user_gain if best[0] is None else request.node_gains[best[0]]
    if transmit_pair(gain, params) != best[2]:
        best = argmin(candidate_q(request, state, tables, params, k))
    return _decision(request, state, params, best[0], best[2])


def schedule_baseline1(request: RequestState, state: CacheState,
                       params: CostKernelParams) -> ScheduleDecision:
    """Serve the user only; stronger nodes decode and store opportunistically."""
    return _decision(request, state, params, None)


def _weakest(request: RequestState, nodes) -> int | None:
    """Weakest of ``nodes`` if it is weaker than the user, else None (user)."""
    nodes = list(nodes)
    if not nodes:
        return None
    c = min(nodes, key=lambda c: (request.node_gains[c], c))
    return c if request.node_gains[c] < request.user_gain else None


class Policy:
    kind: PolicyKind

    def reset(self) -> None:
        """Forget per-episode memory."""

    def decide(self, request: RequestState, state: CacheState) -> ScheduleDecision:
        raise NotImplementedError


class ProposedPolicy(Policy):
    kind = PolicyKind.PROPOSED

    def __init__(self, tables: ValueTables, params: CostKernelParams):
        if tables is None:
            raise ConfigurationError("the proposed policy needs value tables")
        self.tables = tables
        self.params = params

    def decide(self, request, state):
        return schedule_proposed(request, state, self.tables, self.params)


class Baseline1Policy(Policy):
    kind = PolicyKind.BASELINE1

    def __init__(self, params: CostKernelParams):
        self.params = params

    def decide(self, request, state):
        return schedule_baseline1(request, state, self.params)


class _FirstTransmissionPolicy(Policy):
    """Size the first BS transmission of each file to a node set, then fall
    back to Baseline 1."""

    def __init__(self, params: CostKernelParams):
        self.params = params
        self.sent: set[int] = set()

    def reset(self):
        self.sent = set()

    def first_targets(self, request: RequestState) -> list[int]:
        raise NotImplementedError

    def decide(self, request, state):
        if request.file in self.sent:
            return schedule_baseline1(request, state, self.params)
        self.sent.add(request.file)
        return _decision(request, state, self.params, _weakest(request, self.first_targets(request)))


class Baseline2Policy(_FirstTransmissionPolicy):
    kind = PolicyKind.BASELINE2

    def first_targets(self, request):
        return range(len(request.node_gains))


class Baseline3Policy(_FirstTransmissionPolicy):
    kind = PolicyKind.BASELINE3

    def __init__(self, params: CostKernelParams, capacities):
        super().__init__(params)
        self.capacities = tuple(capacities)

    def first_targets(self, request):
        return [c for c, cap in enumerate(self.capacities) if request.file < cap]


class OracleGreedyPolicy(Policy):
    """Greedy policy of an exact oracle table; requests must come from the
    oracle's sample grid."""

    kind = PolicyKind.ORACLE_GREEDY

    def __init__(self, solution):
        if solution is None:
            raise ConfigurationError("the oracle policy needs an exact solution")
        self.solution = solution
        smp = solution.samples
        self._lookup = {(int(smp.region[s]), float(smp.user_gain[s]),
                         tuple(float(g) for g in smp.node_gain[s])): s for s in range(smp.size)}

    def decide(self, request, state):
        s = self._lookup.get((request.region, request.user_gain, tuple(request.node_gains)))
        if s is None:
            raise ConfigurationError("request is not on the oracle's sample grid")
        return greedy_policy_from(self.solution, request.stage, state, request.file, s)


def make_policy(kind: PolicyKind | str, params: CostKernelParams, tables: ValueTables | None = None,
                capacities=None, solution=None) -> Policy:
    kind = PolicyKind.parse(kind) if isinstance(kind, str) else kind
    if kind is PolicyKind.PROPOSED:
        return ProposedPolicy(tables, params)
    if kind is PolicyKind.BASELINE1:
        return Baseline1Policy(params)
    if kind is PolicyKind.BASELINE2:
        return Baseline2Policy(params)
    if kind is PolicyKind.BASELINE3:
        if capacities is None:
            raise ConfigurationError("baseline 3 needs the node capacities")
        return Baseline3Policy(params, capacities)
    return OracleGreedyPolicy(solution)


def dispatch(policy: Policy, request: RequestState, state: CacheState) -> ScheduleDecision:
    """No transmission when a covering node holds the file; otherwise the
    policy's decision."""
    if request.offloadable(state):
        return ScheduleDecision.offload()
    return policy.decide(request, state)
