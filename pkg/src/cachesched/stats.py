"""Weighted channel samples and the per-region statistics built from them.

A :class:`SampleSet` is either a Monte Carlo draw (equal weights, standard
errors reported) or an exact enumeration of a discrete instance (weights are
probabilities, standard errors are zero). Every downstream estimate is a
weighted mean over the set, so both cases share one code path.
"""
from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from .model import FileLibrary, NetworkModel
from .numerics import CostKernelParams, delivery_cost_array


@dataclass(frozen=True)
class SampleSet:
    region: np.ndarray  # (S,) 0 = outside every disk, c = node c-1
    user_gain: np.ndarray  # (S,)
    node_gain: np.ndarray  # (S, N_C)
    user_cost: np.ndarray  # (S,) F(theta_user, P_B)
    node_cost: np.ndarray  # (S, N_C) F(theta^c, P_B)
    weight: np.ndarray  # (S,) sums to 1
    exact: bool = False

    @property
    def size(self) -> int:
        return len(self.weight)

    @property
    def n_nodes(self) -> int:
        return self.node_gain.shape[1]

    def mean(self, values) -> float:
        return float(np.dot(self.weight, values))

    def mean_se(self, values) -> tuple[float, float]:
        """Weighted mean and its standard error (0 for exact enumerations)."""
        v = np.asarray(values, dtype=float)
        m = float(np.dot(self.weight, v))
        if self.exact or self.size < 2:
            return m, 0.0
        return m, float(np.std(v, ddof=1) / np.sqrt(self.size))

    @classmethod
    def from_arrays(cls, region, user_gain, node_gain, params: CostKernelParams,
                    weight=None, exact=False) -> "SampleSet":
        region = np.asarray(region, dtype=np.int64)
        user_gain = np.asarray(user_gain, dtype=float)
        node_gain = np.asarray(node_gain, dtype=float).reshape(len(user_gain), -1)
        if weight is None:
            weight = np.full(len(user_gain), 1.0 / max(len(user_gain), 1))
        weight = np.asarray(weight, dtype=float)
        if abs(weight.sum() - 1.0) > 1e-9:
            raise ValueError("sample weights must sum to 1")
        node_cost = delivery_cost_array(node_gain, params) if node_gain.size else \
            np.zeros_like(node_gain)
        return cls(region, user_gain, node_gain, delivery_cost_array(user_gain, params),
                   node_cost, weight, exact)


def sample_channels(model: NetworkModel, library: FileLibrary, n: int,
                    rng: np.random.Generator | int | None = None) -> SampleSet:
    """Monte Carlo draw of user locations and shadowing."""
    rng = np.random.default_rng(rng)
    locs = model.sample_locations(n, rng)
    user_gain = model.pathloss(np.hypot(locs[:, 0], locs[:, 1])) * model.sample_shadowing(n, rng)
    node_gain = model.node_pathloss[None, :] * model.sample_shadowing((n, model.n_nodes), rng)
    return SampleSet.from_arrays(model.region_of(locs), user_gain, node_gain,
                                 model.cost_params(library))


@dataclass
class _HingeTable:
    """Weighted sorted values d_i supporting sum_{d_i < x} w_i (x - d_i)."""

    d: list
    cum_w: list
    cum_wd: list

    def __call__(self, x: float) -> float:
        j = bisect_left(self.d, x)
        return x * self.cum_w[j] - self.cum_wd[j]


@dataclass
class RegionStatistics:
    """Per-region cost statistics used by the value-function tables.

    Index 0 of the region arrays is the area without cache nodes; index
    c >= 1 is node c-1's disk. Node-indexed arrays are 0-based.
    """

    coverage_prob: np.ndarray  # (N_C+1,)
    coverage_se: np.ndarray
    mu: np.ndarray  # (N_C+1,) Pr(l in C_c) E[F | l in C_c]
    mu_se: np.ndarray
    node_mean_cost: np.ndarray  # (N_C,) E[F(theta^c)]
    node_mean_cost_se: np.ndarray
    # terms of the high-popularity backward induction, per node
    covered_prob: np.ndarray  # Pr(l inside another node's disk)
    free_cost: np.ndarray  # E[1{U} 1{node decodes} F_user]
    free_prob: np.ndarray  # E[1{U} 1{node decodes}]
    paid_cost: np.ndarray  # E[1{U} 1{node misses} F_user]
    paid_prob: np.ndarray  # E[1{U} 1{node misses}]
    hinge: list  # per node _HingeTable over d = F_node - F_user on paid samples
    sample_count: int
    exact: bool

    @property
    def n_nodes(self) -> int:
        return len(self.node_mean_cost)

    @property
    def decode_prob(self) -> np.ndarray:
        """Pr(node gain >= user gain | user outside the other nodes' disks)."""
        tot = self.free_prob + self.paid_prob
        return np.divide(self.free_prob, tot, out=np.zeros_like(tot), where=tot > 0)


def estimate_region_statistics(samples: SampleSet, min_samples: int = 10_000) -> RegionStatistics:
    """Region probabilities, mean costs and decode-comparison terms.

    A region never visited by the samples gets zero probability and its
    conditional terms drop out with zero weight.
    """
    if not samples.exact and samples.size < min_samples:
        raise ValueError(f"need at least {min_samples} Monte Carlo samples")
    n_c = samples.n_nodes
    region, wt = samples.region, samples.weight
    fu, fc = samples.user_cost, samples.node_cost

    cov = np.zeros(n_c + 1)
    cov_se = np.zeros(n_c + 1)
    mu = np.zeros(n_c + 1)
    mu_se = np.zeros(n_c + 1)
    for c in range(n_c + 1):
        ind = (region == c).astype(float)
        cov[c], cov_se[c] = samples.mean_se(ind)
        mu[c], mu_se[c] = samples.mean_se(ind * fu)

    node_mean = np.zeros(n_c)
    node_se = np.zeros(n_c)
    covered = np.zeros(n_c)
    free_cost = np.zeros(n_c)
    free_prob = np.zeros(n_c)
    paid_cost = np.zeros(n_c)
    paid_prob = np.zeros(n_c)
    hinges = []
    for c in range(n_c):
        node_mean[c], node_se[c] = samples.mean_se(fc[:, c])
        uncovered = (region == 0) | (region == c + 1)
        covered[c] = samples.mean(~uncovered)
        decodes = samples.node_gain[:, c] >= samples.user_gain
        fm = uncovered & decodes
        pm = uncovered & ~decodes
        free_cost[c] = float(np.dot(wt[fm], fu[fm]))
        free_prob[c] = float(wt[fm].sum())
        paid_cost[c] = float(np.dot(wt[pm], fu[pm]))
        paid_prob[c] = float(wt[pm].sum())
        d = fc[pm, c] - fu[pm]
        order = np.argsort(d, kind="stable")
        d, w = d[order], wt[pm][order]
        hinges.append(_HingeTable(
            d=d.tolist(),
            cum_w=np.concatenate([[0.0], np.cumsum(w)]).tolist(),
            cum_wd=np.concatenate([[0.0], np.cumsum(w * d)]).tolist(),
        ))
    return RegionStatistics(cov, cov_se, mu, mu_se, node_mean, node_se, covered, free_cost,
                            free_prob, paid_cost, paid_prob, hinges, samples.size, samples.exact)
