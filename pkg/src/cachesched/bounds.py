"""Analytical upper and lower bounds on the optimal expected remaining cost."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .model import CacheState, FileLibrary, NetworkModel
from .numerics import CostKernelParams, delivery_cost_array, tail_mass
from .stats import SampleSet
from .tables import ValueTables, remaining_weight


def g_max(model: NetworkModel, params: CostKernelParams, n: int = 100_000,
          rng=None, shadowing: tuple | None = None) -> tuple[float, float]:
    """Mean minimum cost of a user at the cell edge; returns (value, SE).

    ``shadowing`` = (factors, probabilities) replaces the Monte Carlo draw
    with an exact expectation over a discrete grid.
    """
    rho = model.edge_pathloss
    if shadowing is not None:
        factors, probs = (np.asarray(a, dtype=float) for a in shadowing)
        return float(np.dot(probs, delivery_cost_array(rho * factors, params))), 0.0
    if model.shadowing_sigma_db == 0:
        return float(delivery_cost_array([rho], params)[0]), 0.0
    rng = np.random.default_rng(rng)
    f = delivery_cost_array(rho * model.sample_shadowing(n, rng), params)
    return float(f.mean()), float(f.std(ddof=1) / np.sqrt(n))


def pi_step(state: CacheState) -> CacheState:
    """One step of the greedy cache evolution: each node inserts its most
    popular missing file, swapping out its least popular one when full."""
    updates = []
    for c in range(state.n_nodes):
        cached = state.cached(c)
        missing = [f for f in range(state.n_files) if f not in set(cached)]
        if not missing:
            continue
        f_min = missing[0]
        if len(cached) < state.capacities[c]:
            updates.append((c, f_min, 1))
        elif cached and f_min < max(cached):
            updates += [(c, max(cached), -1), (c, f_min, 1)]
    return state.with_updates(updates) if updates else state


def _uncovered(samples: SampleSet, state: CacheState, f: int) -> np.ndarray:
    """Sample mask of users outside every disk holding file f."""
    holders = np.flatnonzero(state.bits[:, f]) + 1
    return ~np.isin(samples.region, holders)


def g_min_f(samples: SampleSet, state: CacheState, f: int) -> tuple[float, float]:
    """E[F 1{l outside the coverage of f}]; returns (value, SE)."""
    return samples.mean_se(samples.user_cost * _uncovered(samples, state, f))


def g_min(samples: SampleSet, state: CacheState, popularity) -> tuple[float, float]:
    """Minimum expected cost of one request that only serves the user."""
    v = np.zeros(samples.size)
    for f, pf in enumerate(popularity):
        v += pf * samples.user_cost * _uncovered(samples, state, f)
    return samples.mean_se(v)


class BoundCalculator:
    """Evaluates the lower/upper bounds for one instance.

    ``g_min`` values are memoized per cache state; the regions are disjoint,
    so they are computed from per-region means rather than re-scanning the
    samples on every call.
    """

    def __init__(self, samples: SampleSet, library: FileLibrary, horizon: int,
                 q: np.ndarray, gmax: float, mu0: float | None = None):
        self.samples = samples
        self.library = library
        self.horizon = horizon
        self.q = np.asarray(q, dtype=float)
        self.cum = remaining_weight(self.q, horizon)
        self.gmax = gmax
        n_c = samples.n_nodes
        self.region_cost = np.array([samples.mean(samples.user_cost * (samples.region == c))
                                     for c in range(n_c + 1)])
        self.mu0 = self.region_cost[0] if mu0 is None else mu0
        self._memo: dict = {}

    def g_min_f(self, state: CacheState, f: int) -> float:
        miss = ~state.bits[:, f]
        return float(self.region_cost[0] + np.dot(self.region_cost[1:], miss))

    def g_min(self, state: CacheState) -> float:
        key = state.key()
        v = self._memo.get(key)
        if v is None:
            v = sum(pf * self.g_min_f(state, f) for f, pf in enumerate(self.library.popularity))
            self._memo[key] = v
        return v

    def lower_bound_1(self, state: CacheState, k: int) -> float:
        """Sum over tau = k..horizon of g_min(pi^(tau-k)(B)) q_tau; once pi
        reaches its fixed point the rest is one multiple of C[tau]."""
        if k > self.horizon:
            return 0.0
        total = 0.0
        b = state
        for tau in range(k, self.horizon + 1):
            nxt = pi_step(b)
            if nxt == b:
                return total + self.g_min(b) * self.cum[tau]
            total += self.g_min(b) * self.q[tau]
            b = nxt
        return total

    def lower_bound_1_loop(self, state: CacheState, k: int) -> float:
        """Literal tau loop, for cross-checking :meth:`lower_bound_1`."""
        total = 0.0
        b = state
        for tau in range(k, self.horizon + 1):
            total += self.g_min(b) * self.q[tau]
            b = pi_step(b)
        return total

    def lower_bound_2(self, state: CacheState, k: int, frames: bool = False) -> float:
        """Relaxed-capacity lower bound.

        Per file: the first future request costs at least g_min^f(B) and each
        later one at least mu_0. By default the number of remaining requests
        is that of the stage process, (N_R - k + 1)^+ thinned by p_f; with
        ``frames=True`` it is Binomial(L - k + 1, beta p_f) over frames, which
        coincides with the default at k = 1.
        """
        lib = self.library
        L, beta = lib.lifetime_frames, lib.request_prob
        if frames:
            return lower_bound_2_frames([self.g_min_f(state, f) for f in range(lib.n_files)],
                                        lib.popularity, self.mu0, L - k + 1, beta)
        if beta <= 0 or k > L:
            return 0.0
        n = np.arange(max(k, 1), L + 1)
        pmf = sps.binom.pmf(n, L, beta)
        remaining = n - k + 1
        mean_remaining = tail_mass(k - 1, L, beta) if k >= 1 else L * beta
        total = 0.0
        for f, pf in enumerate(lib.popularity):
            # Pr(at least one request for f among the remaining ones)
            p_any = float(np.dot(pmf, -np.expm1(remaining * np.log1p(-pf)))) if pf < 1 else \
                float(pmf.sum())
            total += (self.g_min_f(state, f) - self.mu0) * p_any + self.mu0 * pf * mean_remaining
        return total

    def lower_bound(self, state: CacheState, k: int) -> float:
        return max(self.lower_bound_1(state, k), self.lower_bound_2(state, k))

    def truncation_gap(self) -> float:
        """g_max times the stage mass beyond the horizon."""
        lib = self.library
        return self.gmax * tail_mass(self.horizon, lib.lifetime_frames, lib.request_prob)

    def upper_bound(self, state: CacheState, k: int, tables: ValueTables) -> float:
        return tables.j_total(state, k) + self.truncation_gap()


def lower_bound_2_frames(g_f, popularity, mu0: float, m: int, beta: float) -> float:
    """Closed form of sum_f sum_n Binom(n; m, beta p_f) (g_f + (n - 1) mu0):
    (g_f - mu0)(1 - (1 - beta p_f)^m) + mu0 m beta p_f per file."""
    if m <= 0 or beta <= 0:
        return 0.0
    total = 0.0
    for g, pf in zip(g_f, popularity):
        r = beta * pf
        p_any = -np.expm1(m * np.log1p(-r)) if r < 1 else 1.0
        total += (g - mu0) * p_any + mu0 * m * r
    return float(total)


@dataclass
class BoundsReport:
    """Bounds of one instance, evaluated per (k, B) on demand."""

    calculator: BoundCalculator
    tables: ValueTables

    @property
    def g_max(self) -> float:
        return self.calculator.gmax

    @property
    def g_min_fn(self) -> BoundCalculator:
        """Evaluator exposing ``g_min(B)`` and ``g_min_f(B, f)``."""
        return self.calculator

    def at(self, state: CacheState, k: int) -> dict:
        bc = self.calculator
        lower1 = bc.lower_bound_1(state, k)
        lower2 = bc.lower_bound_2(state, k)
        return {"upper": bc.upper_bound(state, k, self.tables), "lower1": lower1,
                "lower2": lower2, "lower": max(lower1, lower2)}
