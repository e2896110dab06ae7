"""Online estimation of popularity, regional costs and the per-request term
of the high-popularity recursion, with value-table refresh.

All three estimators are running averages ``x_t = t/(t+1) x_{t-1} + s_t/(t+1)``
seeded by a prior, so after ``t`` events ``x_t = (x_0 + sum s_i) / (t + 1)``.
A batch of ``n`` events is folded in with the same identity, which is exact
for popularity and regional costs. upsilon is swept backward from the
horizon within each batch, so stage k samples use the W_hat_{k+1} that the
same batch already updated.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import FileLibrary, NetworkModel
from .stats import SampleSet, estimate_region_statistics, sample_channels
from .tables import (ValueTables, build_j_zero, build_w_hat, stage_weights,
                     w_hat_from_upsilon)


@dataclass
class EventBatch:
    """Observed requests: the serving-cell sample plus the multi-cell file
    counts over each request's observation window."""

    file: np.ndarray  # (n,)
    region: np.ndarray  # (n,)
    user_cost: np.ndarray  # (n,)
    node_cost: np.ndarray  # (n, N_C)
    decode: np.ndarray  # (n, N_C) node gain >= user gain
    counts: np.ndarray  # (n, M_F) requests per file in all cells during the window
    window: np.ndarray  # (n,) frames in the window

    def __len__(self):
        return len(self.file)

    def __post_init__(self):
        n = len(self.file)
        for name in ("region", "user_cost", "node_cost", "decode", "counts", "window"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"event field {name} has the wrong length")
        if np.any(self.window <= 0):
            raise ValueError("observation windows must be positive")
        if np.any(self.counts < 0):
            raise ValueError("request counts must be nonnegative")

    def slice(self, a: int, b: int) -> "EventBatch":
        return EventBatch(*(getattr(self, k)[a:b] for k in (
            "file", "region", "user_cost", "node_cost", "decode", "counts", "window")))


def learning_events(model: NetworkModel, library: FileLibrary, n: int, n_cells: int,
                    rng=None) -> EventBatch:
    """Draw ``n`` requests from the true model. The window before each one is
    Geometric(beta) frames and each of the ``n_cells`` cells issues requests
    independently, so the count of file f is Binomial(n_cells T, beta p_f)."""
    rng = np.random.default_rng(rng)
    smp = sample_channels(model, library, n, rng)
    beta = library.request_prob
    window = rng.geometric(beta, size=n)
    counts = rng.binomial(n_cells * window[:, None], beta * library.p[None, :])
    files = rng.choice(library.n_files, size=n, p=library.p)
    return EventBatch(files, smp.region, smp.user_cost, smp.node_cost,
                      smp.node_gain >= smp.user_gain[:, None], counts, window)


@dataclass
class LearnerState:
    t: int
    p_hat: np.ndarray  # (M_F,)
    mu_hat: np.ndarray  # (N_C+1,)
    upsilon: np.ndarray  # (horizon+2, M_F, N_C)
    n_cells: int
    horizon: int
    beta: float
    q: np.ndarray
    capacities: tuple
    threshold: float = 0.0
    w_hat: np.ndarray = None
    snapshot: np.ndarray | None = None
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.w_hat is None:
            self.w_hat = w_hat_from_upsilon(self.upsilon, self._p_clip(), self.horizon)

    def _p_clip(self) -> np.ndarray:
        # estimates are not renormalized; only the [0, 1] range is enforced
        return np.clip(self.p_hat, 0.0, 1.0)

    @property
    def popularity_drift(self) -> float:
        return float(self.p_hat.sum() - 1.0)

    def tables(self) -> ValueTables:
        n_f = len(self.p_hat)
        w = self.w_hat.copy()
        for c, cap in enumerate(self.capacities):
            w[:, min(cap, n_f):, c] = np.nan
        p = self._p_clip()
        return ValueTables(self.horizon, self.q, p, self.mu_hat, self.capacities, w,
                           build_j_zero(p, self.mu_hat[0], self.q, self.horizon))


def init_learner(prior_model: NetworkModel, prior_library: FileLibrary, horizon: int,
                 n_cells: int = 1, threshold: float = 0.0, samples: SampleSet | None = None,
                 n_samples: int = 100_000, rng=None) -> LearnerState:
    """Seed every estimate from a stated prior on user layout and popularity.

    The true L and beta must be given through ``prior_library`` (they are
    known system parameters); its popularity is the prior guess.
    """
    if samples is None:
        samples = sample_channels(prior_model, prior_library, n_samples, rng)
    stats = estimate_region_statistics(samples)
    p = prior_library.p
    q = stage_weights(horizon, prior_library.lifetime_frames, prior_library.request_prob)
    j0 = build_j_zero(p, stats.mu[0], q, horizon)
    _, ups = build_w_hat(stats, p, q, horizon, prior_model.capacities, j0,
                         all_files=True, return_upsilon=True)
    ups = np.nan_to_num(ups)
    st = LearnerState(0, p.copy(), stats.mu.copy(), ups, n_cells, horizon,
                      prior_library.request_prob, q, tuple(prior_model.capacities), threshold)
    st.snapshot = _j_snapshot(st.tables())
    return st


def _event_terms(learner: LearnerState, events: EventBatch):
    n_c = events.node_cost.shape[1]
    region = events.region[:, None]
    covered = (region != 0) & (region != np.arange(1, n_c + 1)[None, :])  # (n, C)
    return covered[:, None, :], events.decode[:, None, :], events.user_cost[:, None, None], \
        events.node_cost[:, None, :]


def upsilon_sample(learner: LearnerState, events: EventBatch, k: int, w_next: np.ndarray,
                   j0_next: np.ndarray, terms=None) -> np.ndarray:
    """Per-event sample of upsilon_{k,f,c}, shape (n, M_F, N_C): W_hat_{k+1}
    inside another node's disk; otherwise the user-only cost when node c
    decodes for free, else the cheaper of serving the user and serving
    through node c."""
    covered, decode, fu, fc = terms or _event_terms(learner, events)
    qk = float(learner.q[k])
    j0n = j0_next[None, :, None]
    w = w_next[None]
    paid = np.minimum(qk * fu + w, qk * fc + j0n)
    return np.where(covered, w, np.where(decode, qk * fu + j0n, paid))


def upsilon_samples(learner: LearnerState, events: EventBatch) -> np.ndarray:
    """Samples for every stage at the learner's current W_hat, shape
    (n, horizon, M_F, N_C)."""
    m = learner.horizon
    j0 = build_j_zero(learner._p_clip(), learner.mu_hat[0], learner.q, m)
    terms = _event_terms(learner, events)
    return np.stack([upsilon_sample(learner, events, k, learner.w_hat[k + 1], j0[k + 1], terms)
                     for k in range(1, m + 1)], axis=1)


def observe(learner: LearnerState, events: EventBatch) -> LearnerState:
    """Fold a batch of events into the running averages (one event is a
    batch of one).

    Popularity and regional costs are updated first. upsilon is then swept
    backward from the horizon, so the sample at stage k uses the W_hat_{k+1}
    already updated by this batch.
    """
    n = len(events)
    if n == 0:
        return learner
    t = learner.t
    n_c = len(learner.mu_hat) - 1
    p_samples = events.counts / (learner.beta * learner.n_cells * events.window[:, None])
    mu_samples = (events.region[:, None] == np.arange(n_c + 1)[None, :]) * events.user_cost[:, None]
    learner.p_hat = ((t + 1) * learner.p_hat + p_samples.sum(axis=0)) / (t + n + 1)
    learner.mu_hat = ((t + 1) * learner.mu_hat + mu_samples.sum(axis=0)) / (t + n + 1)
    m = learner.horizon
    p = learner._p_clip()[:, None]
    j0 = build_j_zero(p[:, 0], learner.mu_hat[0], learner.q, m)
    terms = _event_terms(learner, events)
    w = learner.w_hat
    w[m + 1] = 0.0
    for k in range(m, 0, -1):
        smp = upsilon_sample(learner, events, k, w[k + 1], j0[k + 1], terms).sum(axis=0)
        learner.upsilon[k] = ((t + 1) * learner.upsilon[k] + smp) / (t + n + 1)
        w[k] = (1.0 - p) * w[k + 1] + p * learner.upsilon[k]
    learner.t = t + n
    return learner


def _j_snapshot(tables: ValueTables) -> np.ndarray:
    """Per (k, f, c) values of an uncached file: J_0 terms, the high
    popularity increments and the low popularity cost."""
    low = (tables.popularity[None, :, None] * tables.mu[None, None, 1:]
           * tables.cum[:, None, None])
    hi = np.where(np.isnan(tables.w_hat), low, tables._high)
    return np.concatenate([tables.j_zero[:, :, None], hi], axis=2)


def refresh_and_check(learner: LearnerState) -> tuple[ValueTables, float, bool]:
    """Rebuild the tables from the current estimates; return them with the
    sup-norm change since the previous refresh and the convergence flag."""
    tables = learner.tables()
    snap = _j_snapshot(tables)
    delta = float(np.max(np.abs(snap - learner.snapshot))) if learner.snapshot is not None else np.inf
    learner.snapshot = snap
    return tables, delta, delta < learner.threshold


def learn(learner: LearnerState, events: EventBatch, batch: int = 100,
          truth: dict | None = None, checkpoints=None) -> LearnerState:
    """Run the algorithm over ``events`` in batches, appending one trace row
    (t, delta, drift and, with ``truth``, RMSE per estimator) per batch or
    per checkpoint."""
    checkpoints = None if checkpoints is None else sorted(set(int(c) for c in checkpoints))
    stops = checkpoints or list(range(batch, len(events) + batch, batch))
    pos = 0
    for stop in stops:
        stop = min(stop, len(events))
        while pos < stop:
            nxt = min(pos + batch, stop)
            observe(learner, events.slice(pos, nxt))
            pos = nxt
        _, delta, conv = refresh_and_check(learner)
        row = {"t": learner.t, "delta": delta, "converged": conv,
               "popularity_drift": learner.popularity_drift}
        if truth is not None:
            row.update(estimate_errors(learner, truth))
        learner.trace.append(row)
        if pos >= len(events):
            break
    return learner


def estimate_errors(learner: LearnerState, truth: dict) -> dict:
    """RMSE of each estimator against reference values (``p``, ``mu`` and
    optionally ``upsilon`` over the high-popularity entries)."""
    out = {"rmse_p": float(np.sqrt(np.mean((learner.p_hat - truth["p"]) ** 2))),
           "rmse_mu": float(np.sqrt(np.mean((learner.mu_hat - truth["mu"]) ** 2)))}
    if "upsilon" in truth:
        ref = truth["upsilon"]
        m = learner.horizon
        mask = ~np.isnan(ref[1:m + 1])
        diff = learner.upsilon[1:m + 1][mask] - ref[1:m + 1][mask]
        out["rmse_upsilon"] = float(np.sqrt(np.mean(diff ** 2)))
    return out


def write_trace(trace: list, path) -> None:
    """Convergence trace as CSV; columns are the union of the row keys."""
    cols = []
    for row in trace:
        cols += [k for k in row if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
