"""Approximate per-file per-region value functions.

Stage indices ``k`` are 1-based and every table is sized ``horizon + 2`` so
that ``table[k]`` is stage ``k`` and ``table[horizon + 1]`` is the zero
terminal row. File and node indices are 0-based; file ``f`` is the
``(f+1)``-th most popular, and node ``c`` keeps files ``0..M_c-1`` as its
high-popularity set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .model import CacheState, FileLibrary
from .numerics import stage_budget, tail_prob
from .stats import RegionStatistics


def stage_weights(horizon: int, L: int, beta: float) -> np.ndarray:
    """q[k] = Pr(N_R >= k) for k = 0..horizon+1 (q[horizon+1] is kept for
    reference; tables never sum past the horizon)."""
    return np.asarray(tail_prob(np.arange(horizon + 2), L, beta), dtype=float)


def remaining_weight(q: np.ndarray, horizon: int) -> np.ndarray:
    """C[k] = sum_{tau=k}^{horizon} q[tau], with C[horizon+1] = 0."""
    c = np.zeros(horizon + 2)
    c[1:horizon + 1] = np.cumsum(q[horizon:0:-1])[::-1]
    return c


def build_j_zero(p, mu0: float, q: np.ndarray, horizon: int) -> np.ndarray:
    """J_{k,f,0}: cost of serving file f in the uncovered area from stage k,
    via J_k = J_{k+1} + p_f q_k mu_0."""
    p = np.asarray(p, dtype=float)
    out = np.zeros((horizon + 2, len(p)))
    for k in range(horizon, 0, -1):
        out[k] = out[k + 1] + p * q[k] * mu0
    return out


def build_w_hat(stats: RegionStatistics, p, q: np.ndarray, horizon: int,
                capacities, j_zero: np.ndarray | None = None, all_files: bool = False,
                return_upsilon: bool = False):
    """Backward induction for the high-popularity cost W_hat_{k,f}(b_f^c).

    Entries for files outside node c's high-popularity set are NaN unless
    ``all_files`` is set. With ``return_upsilon`` the per-request term
    upsilon_{k,f,c} of the recursion is returned as well. The loop is
    deliberately scalar: cost is O(horizon * N_C * sum M_c).
    """
    p = np.asarray(p, dtype=float)
    n_f = len(p)
    n_c = stats.n_nodes
    if j_zero is None:
        j_zero = build_j_zero(p, stats.mu[0], q, horizon)
    out = np.full((horizon + 2, n_f, n_c), np.nan)
    out[horizon + 1] = 0.0
    ups = np.full((horizon + 2, n_f, n_c), np.nan)
    qs = q.tolist()
    for c in range(n_c):
        cov = float(stats.covered_prob[c])
        a, b = float(stats.free_cost[c]), float(stats.free_prob[c])
        cc, e = float(stats.paid_cost[c]), float(stats.paid_prob[c])
        hinge = stats.hinge[c]
        for f in range(n_f if all_files else min(capacities[c], n_f)):
            pf = float(p[f])
            j0 = j_zero[:, f].tolist()
            col = [0.0] * (horizon + 2)
            ucol = [np.nan] * (horizon + 2)
            w_next = 0.0
            for k in range(horizon, 0, -1):
                qk = qs[k]
                j0n = j0[k + 1]
                # paid branch: min(F_u q + W', F_c q + J0') = F_u q + W' - q max(0, x - d)
                if qk > 0.0:
                    h = qk * hinge((w_next - j0n) / qk)
                else:
                    h = max(w_next - j0n, 0.0) * e
                upsilon = (cov * w_next + qk * a + j0n * b
                           + qk * cc + w_next * e - h)
                w_next = (1.0 - pf) * w_next + pf * upsilon
                col[k] = w_next
                ucol[k] = upsilon
            out[:, f, c] = col
            ups[:, f, c] = ucol
    return (out, ups) if return_upsilon else out


def w_hat_from_upsilon(upsilon: np.ndarray, p, horizon: int) -> np.ndarray:
    """W_hat_k = (1 - p_f) W_hat_{k+1} + p_f upsilon_k, W_hat_{horizon+1} = 0."""
    p = np.asarray(p, dtype=float)[:, None]
    out = np.zeros_like(upsilon)
    for k in range(horizon, 0, -1):
        out[k] = (1.0 - p) * out[k + 1] + p * upsilon[k]
    return out


def eviction_prob(n, needed: int, phi: float):
    """Probability that request ``k + n`` is the ``needed``-th request, among
    requests ``k..k+n``, for the uncached high-popularity files (total
    probability ``phi``): a negative binomial over ``n + 1`` trials, zero for
    ``n < needed - 1``."""
    n = np.asarray(n)
    if phi <= 0.0 or needed < 1:
        out = np.zeros(n.shape)
    else:
        nn = np.asarray(n, dtype=float)
        with np.errstate(invalid="ignore"):
            out = np.where(nn + 1 >= needed, sps.nbinom.pmf(nn + 1 - needed, needed, phi), 0.0)
    return out if np.ndim(out) else float(out)


def eviction_factor(needed: int, phi: float, cum: np.ndarray, horizon: int) -> np.ndarray:
    """G[k] such that the cached low-popularity value is p_f mu_c G[k]:
    G[k] = sum_{n=0}^{M-k} P_n C[k+n+1]. Cost accrues only after the
    eviction; a file not evicted within the horizon costs nothing."""
    g = np.zeros_like(cum)
    if phi <= 0.0 or horizon == 0:
        return g
    pn = eviction_prob(np.arange(horizon), needed, phi)
    for k in range(1, horizon + 1):
        m = horizon - k + 1
        g[k] = float(np.dot(pn[:m], cum[k + 1:k + 1 + m]))
    return g


@dataclass
class ValueTables:
    """Immutable-by-convention approximate value tables plus accessors."""

    horizon: int
    q: np.ndarray  # (horizon+2,)
    popularity: np.ndarray  # (M_F,)
    mu: np.ndarray  # (N_C+1,)
    capacities: tuple
    w_hat: np.ndarray  # (horizon+2, M_F, N_C), NaN outside F_c^H
    j_zero: np.ndarray = None  # (horizon+2, M_F)
    cum: np.ndarray = None
    _gcache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.capacities = tuple(int(x) for x in self.capacities)
        self.popularity = np.asarray(self.popularity, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        if self.cum is None:
            self.cum = remaining_weight(self.q, self.horizon)
        if self.j_zero is None:
            self.j_zero = build_j_zero(self.popularity, self.mu[0], self.q, self.horizon)
        # J_{k,f,c} for uncached high-popularity files, floored at 0
        diff = self.w_hat - self.j_zero[:, :, None]
        self._high = np.where(np.isnan(diff), 0.0, np.maximum(diff, 0.0))
        self._high_list = self._high.tolist()
        self._p_list = self.popularity.tolist()
        self._cum_list = self.cum.tolist()

    @property
    def n_files(self) -> int:
        return len(self.popularity)

    @property
    def n_nodes(self) -> int:
        return len(self.capacities)

    def eta(self, k: int, f: int, c: int) -> float:
        """Per-stage low-popularity cost p_f q_k mu_c (node c, 0-based)."""
        if k > self.horizon:
            return 0.0
        return float(self.popularity[f] * self.q[k] * self.mu[c + 1])

    def eviction_curve(self, needed: int, phi: float) -> list:
        key = (needed, round(phi, 14))
        g = self._gcache.get(key)
        if g is None:
            g = eviction_factor(needed, phi, self.cum, self.horizon).tolist()
            self._gcache[key] = g
        return g

    def j_file_region(self, state: CacheState, k: int, f: int, c: int) -> float:
        """J_{k,f,c}(B) for node c (0-based)."""
        if k > self.horizon:
            return 0.0
        cap = self.capacities[c]
        row = state.bits[c]
        if f < cap:
            return 0.0 if row[f] else self._high_list[k][f][c]
        pf_mu = self._p_list[f] * float(self.mu[c + 1])
        if not row[f]:
            return pf_mu * self._cum_list[k]
        phi = self._uncached_high(row, cap)
        needed = cap - sum(1 for g in range(f) if row[g])
        return pf_mu * self.eviction_curve(needed, phi)[k]

    def _uncached_high(self, row, cap) -> float:
        """Total popularity of node c's uncached high-popularity files."""
        p = self._p_list
        return sum(p[f] for f in range(min(cap, len(p))) if not row[f])

    def j_region(self, state: CacheState, k: int, c: int) -> float:
        """J_k^c(B) = sum over files of J_{k,f,c}(B), node c 0-based."""
        if k > self.horizon:
            return 0.0
        return self.j_row(state.bits[c].tolist(), k, c)

    def j_row(self, row, k: int, c: int) -> float:
        """J_k^c as a function of node c's cache row alone."""
        if k > self.horizon:
            return 0.0
        cap = self.capacities[c]
        hi = self._high_list[k]
        n_f = len(self._p_list)
        total = 0.0
        for f in range(min(cap, n_f)):
            if not row[f]:
                total += hi[f][c]
        if cap < n_f:
            mu_c = float(self.mu[c + 1])
            ck = self._cum_list[k]
            p = self._p_list
            uncached_low = 0.0
            phi = None
            # files more popular than f that are cached at c
            ahead = sum(row[:cap])
            for f in range(cap, n_f):
                if row[f]:
                    if phi is None:
                        phi = self._uncached_high(row, cap)
                    total += mu_c * p[f] * self.eviction_curve(cap - ahead, phi)[k]
                    ahead += 1
                else:
                    uncached_low += p[f]
            total += mu_c * uncached_low * ck
        return total

    def j_zero_total(self, k: int) -> float:
        if k > self.horizon:
            return 0.0
        return float(self.j_zero[k].sum())

    def j_total(self, state: CacheState, k: int) -> float:
        """J_k(B): uncovered-area terms plus every node's regional terms."""
        if k > self.horizon:
            return 0.0
        return self.j_zero_total(k) + sum(self.j_region(state, k, c) for c in range(self.n_nodes))

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        np.savez_compressed(path, horizon=self.horizon, q=self.q, popularity=self.popularity,
                            mu=self.mu, capacities=np.asarray(self.capacities), w_hat=self.w_hat)

    @classmethod
    def load(cls, path) -> "ValueTables":
        with np.load(path) as z:
            return cls(int(z["horizon"]), z["q"], z["popularity"], z["mu"],
                       tuple(int(x) for x in z["capacities"]), z["w_hat"])


def build_low_pop(tables: ValueTables, state: CacheState, k: int, f: int, c: int) -> float:
    """Literal evaluation of the low-popularity value as a double sum over
    the eviction request n and the uncovered stages after it; kept as a
    cross-check of the fast accessor."""
    if k > tables.horizon:
        return 0.0
    m = tables.horizon
    etas = [tables.eta(t, f, c) for t in range(m + 2)]
    if not state.holds(c, f):
        return sum(etas[k:m + 1])
    cap = tables.capacities[c]
    row = state.bits[c]
    needed = cap - sum(1 for h in range(f) if row[h])
    phi = sum(tables.popularity[h] for h in range(cap) if not row[h])
    total = 0.0
    for n in range(0, m - k + 1):
        pn = eviction_prob(n, needed, phi)
        if pn:
            total += pn * sum(etas[k + n + 1:m + 1])
    return total


def build_tables(stats: RegionStatistics, library: FileLibrary, horizon: int,
                 capacities) -> ValueTables:
    q = stage_weights(horizon, library.lifetime_frames, library.request_prob)
    p = library.p
    j0 = build_j_zero(p, stats.mu[0], q, horizon)
    w_hat = build_w_hat(stats, p, q, horizon, capacities, j0)
    return ValueTables(horizon, q, p, stats.mu, tuple(capacities), w_hat, j0)


def horizon_for(library: FileLibrary, eps: float) -> int:
    return stage_budget(eps, library.lifetime_frames, library.request_prob)
