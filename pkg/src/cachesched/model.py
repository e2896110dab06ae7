"""Cell, channel and file-library model; cache-state algebra; request process."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .numerics import CostKernelParams, ergodic_rate_array, ergodic_rate_exact


class ConstraintViolation(RuntimeError):
    """A scheduling decision broke one of the feasibility constraints."""


@dataclass(frozen=True)
class CacheNode:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class UserRegion:
    """Annulus around the BS with uniform user density; ``weight`` is the
    probability that a requesting user falls inside it."""

    inner: float
    outer: float
    weight: float


@dataclass(frozen=True)
class NetworkModel:
    cell_radius: float = 500.0
    cache_nodes: tuple[CacheNode, ...] = ()
    capacities: tuple[int, ...] = ()
    n_antennas: int = 8
    alpha: float = 1.0
    pathloss_exponent: float = 3.76
    pathloss_ref: float = 10 ** (-15.3 / 10)
    shadowing_sigma_db: float = 10.0
    shadowing_clip: float = 3.0  # truncate shadowing at +-clip sigmas
    noise_power: float = 10 ** ((-174 + 10 * math.log10(20e6) - 30) / 10)
    peak_power: float = 10 ** ((47 - 30) / 10)
    symbol_weight: float = 1.0
    user_regions: tuple[UserRegion, ...] = ()

    def __post_init__(self):
        if not self.user_regions:
            object.__setattr__(self, "user_regions", (UserRegion(0.0, self.cell_radius, 1.0),))
        if not self.capacities:
            object.__setattr__(self, "capacities", (1,) * len(self.cache_nodes))
        for name in ("cell_radius", "pathloss_ref", "noise_power", "peak_power", "symbol_weight",
                     "pathloss_exponent"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be >= 0")
        if len(self.capacities) != len(self.cache_nodes):
            raise ValueError("one capacity per cache node")
        total = sum(r.weight for r in self.user_regions)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"user region weights sum to {total}, expected 1")
        for r in self.user_regions:
            if not 0 <= r.inner < r.outer <= self.cell_radius or r.weight < 0:
                raise ValueError(f"bad user region {r}")
        nodes = self.cache_nodes
        for i, a in enumerate(nodes):
            if not a.radius > 0:
                raise ValueError("cache node radius must be positive")
            if math.hypot(*a.center) + a.radius > self.cell_radius + 1e-9:
                raise ValueError(f"cache node {i} sticks out of the cell")
            for j in range(i):
                b = nodes[j]
                gap = math.dist(a.center, b.center)
                if gap <= a.radius + b.radius:
                    raise ValueError(f"cache nodes {j} and {i} overlap")

    @property
    def n_nodes(self) -> int:
        return len(self.cache_nodes)

    def cost_params(self, library: "FileLibrary") -> CostKernelParams:
        return CostKernelParams(
            alpha=self.alpha,
            file_bits=library.file_bits,
            symbol_weight=self.symbol_weight,
            peak_power=self.peak_power,
            n_antennas=self.n_antennas,
            noise_power=self.noise_power,
        )

    def pathloss(self, distance):
        d = np.maximum(np.asarray(distance, dtype=float), 1.0)
        return self.pathloss_ref * d ** (-self.pathloss_exponent)

    @property
    def node_pathloss(self) -> np.ndarray:
        return self.pathloss([math.hypot(*n.center) for n in self.cache_nodes])

    @property
    def edge_pathloss(self) -> float:
        return float(self.pathloss(self.cell_radius))

    def region_of(self, points) -> np.ndarray:
        """Index of the cache node whose (closed) disk contains each point,
        1-based; 0 when no node covers it."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(len(pts), dtype=np.int64)
        for c, node in enumerate(self.cache_nodes, start=1):
            d2 = (pts[:, 0] - node.center[0]) ** 2 + (pts[:, 1] - node.center[1]) ** 2
            out[d2 <= node.radius ** 2] = c
        return out

    def sample_locations(self, n: int, rng: np.random.Generator) -> np.ndarray:
        weights = np.array([r.weight for r in self.user_regions])
        which = rng.choice(len(weights), size=n, p=weights / weights.sum())
        inner = np.array([r.inner for r in self.user_regions])[which]
        outer = np.array([r.outer for r in self.user_regions])[which]
        radius = np.sqrt(rng.uniform(inner ** 2, outer ** 2))
        angle = rng.uniform(0.0, 2.0 * math.pi, size=n)
        return np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])

    def sample_shadowing(self, shape, rng: np.random.Generator) -> np.ndarray:
        """Linear log-normal shadowing factors 10^(X/10), X ~ N(0, sigma^2)
        truncated at +-clip sigma."""
        x = rng.standard_normal(shape)
        if self.shadowing_clip > 0:
            np.clip(x, -self.shadowing_clip, self.shadowing_clip, out=x)
        return 10.0 ** (self.shadowing_sigma_db * x / 10.0)


@dataclass(frozen=True)
class FileLibrary:
    popularity: tuple[float, ...]
    file_bits: float = 14e6
    request_prob: float = 1e-3
    lifetime_frames: int = 100_000

    def __post_init__(self):
        p = np.asarray(self.popularity, dtype=float)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("popularity must be a non-empty vector")
        if np.any(p <= 0) or (len(p) > 1 and np.any(p >= 1)):
            raise ValueError("popularities must lie in (0, 1)")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("popularities must sum to 1")
        if np.any(np.diff(p) > 1e-15):
            raise ValueError("popularities must be non-increasing")
        if not 0.0 <= self.request_prob <= 1.0:
            raise ValueError("request_prob must lie in [0, 1]")
        if self.lifetime_frames < 0 or not self.file_bits > 0:
            raise ValueError("bad lifetime or file size")

    @classmethod
    def zipf(cls, n_files: int, gamma: float, **kw) -> "FileLibrary":
        p = np.arange(1, n_files + 1, dtype=float) ** (-gamma)
        p /= p.sum()
        # tidy the sum to 1 within rounding
        p[-1] = 1.0 - p[:-1].sum()
        return cls(popularity=tuple(float(x) for x in p), **kw)

    @property
    def n_files(self) -> int:
        return len(self.popularity)

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.popularity, dtype=float)


class CacheState:
    """Binary cache matrix (node x file) with per-node capacities.

    Instances are immutable; every update returns a new state.
    """

    __slots__ = ("_bits", "_capacities", "_key", "_counts")

    def __init__(self, bits, capacities: Sequence[int]):
        b = np.array(bits, dtype=bool)
        if b.ndim != 2:
            raise ValueError("bits must be a 2-D matrix")
        caps = tuple(int(c) for c in capacities)
        if len(caps) != b.shape[0]:
            raise ValueError("one capacity per node")
        counts = b.sum(axis=1).tolist()
        for c, n in enumerate(counts):
            if n > caps[c]:
                raise ConstraintViolation(f"node {c} holds {n} files > capacity {caps[c]}")
        b.setflags(write=False)
        self._bits = b
        self._capacities = caps
        self._key = (b.shape, np.packbits(b).tobytes())
        self._counts = counts

    @classmethod
    def empty(cls, n_nodes: int, n_files: int, capacities: Sequence[int]) -> "CacheState":
        return cls(np.zeros((n_nodes, n_files), dtype=bool), capacities)

    @classmethod
    def from_sets(cls, cached: Sequence[Iterable[int]], n_files: int, capacities) -> "CacheState":
        b = np.zeros((len(cached), n_files), dtype=bool)
        for c, files in enumerate(cached):
            b[c, list(files)] = True
        return cls(b, capacities)

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def capacities(self) -> tuple[int, ...]:
        return self._capacities

    @property
    def n_nodes(self) -> int:
        return self._bits.shape[0]

    @property
    def n_files(self) -> int:
        return self._bits.shape[1]

    def holds(self, node: int, f: int) -> bool:
        return bool(self._bits[node, f])

    def cached(self, node: int) -> list[int]:
        return [int(f) for f in np.flatnonzero(self._bits[node])]

    def count(self, node: int) -> int:
        return self._counts[node]

    def key(self):
        return self._key

    def __eq__(self, other):
        return isinstance(other, CacheState) and self._key == other._key and \
            self._capacities == other._capacities

    def __hash__(self):
        return hash(self._key)

    def __repr__(self):
        return f"CacheState({[self.cached(c) for c in range(self.n_nodes)]})"

    def with_updates(self, updates: Iterable[tuple[int, int, int]]) -> "CacheState":
        b = self._bits.copy()
        for node, f, delta in updates:
            if delta == 1:
                if b[node, f]:
                    raise ConstraintViolation(f"file {f} already cached at node {node}")
                b[node, f] = True
            elif delta == -1:
                if not b[node, f]:
                    raise ConstraintViolation(f"file {f} not cached at node {node}")
                b[node, f] = False
            else:
                raise ValueError(f"bad update delta {delta}")
        return CacheState(b, self._capacities)


def popularity_insert(state: CacheState, node: int, f: int) -> list[tuple[int, int, int]]:
    """Updates that store file ``f`` at ``node`` under the spare-memory /
    lower-popularity rule. Files are indexed in non-increasing popularity, so
    a larger index means less popular. Returns [] if the file is not stored."""
    if state.holds(node, f):
        return []
    if state.count(node) < state.capacities[node]:
        return [(node, f, 1)]
    cached = state.cached(node)
    if not cached:
        return []
    worst = max(cached)
    if worst > f:
        return [(node, worst, -1), (node, f, 1)]
    return []


def insertions_for(state: CacheState, decoding: Iterable[int], f: int) -> list[tuple[int, int, int]]:
    out = []
    for c in decoding:
        out.extend(popularity_insert(state, c, f))
    return out


def coverage_nodes(state: CacheState, f: int) -> list[int]:
    """Nodes (0-based) whose disks form the coverage area of file ``f``."""
    return [int(c) for c in np.flatnonzero(state.bits[:, f])]


def in_coverage(model: NetworkModel, state: CacheState, f: int, point) -> bool:
    region = int(model.region_of(point)[0])
    return region > 0 and state.holds(region - 1, f)


@dataclass(frozen=True)
class RequestState:
    stage: int
    file: int
    location: tuple[float, float]
    region: int  # 0 = no cache node, c = inside node c-1's disk
    user_gain: float
    node_gains: tuple[float, ...]
    frame: int = 0

    def offloadable(self, state: CacheState) -> bool:
        return self.region > 0 and state.holds(self.region - 1, self.file)


@dataclass(frozen=True)
class ScheduleDecision:
    transmit: bool
    power: float = 0.0
    symbols: float = 0.0
    target: int | None = None  # node index driving (P, N); None = the user
    decoding: tuple[int, ...] = ()
    updates: tuple[tuple[int, int, int], ...] = ()

    @classmethod
    def offload(cls) -> "ScheduleDecision":
        return cls(transmit=False)


def stage_cost(request: RequestState, decision: ScheduleDecision, state: CacheState,
               params: CostKernelParams) -> float:
    """Weighted transmission cost (P + w) N of one request; zero when a
    covering cache node already holds the file."""
    if decision.power > params.peak_power:
        raise ConstraintViolation(f"power {decision.power} exceeds peak {params.peak_power}")
    if request.offloadable(state):
        return 0.0
    if not decision.transmit:
        raise ConstraintViolation("request not offloadable but decision does not transmit")
    return (decision.power + params.symbol_weight) * decision.symbols


def decoding_set(request: RequestState, power: float, symbols: float,
                 params: CostKernelParams) -> tuple[int, ...]:
    """Nodes whose ergodic rate reaches the file size under (P, N)."""
    if power <= 0 or symbols <= 0:
        return ()
    if not request.node_gains:
        return ()
    rates = ergodic_rate_array(power, symbols, np.asarray(request.node_gains), params)
    return tuple(int(c) for c in np.flatnonzero(rates >= params.file_bits * (1 - 1e-9)))


def apply_cache_updates(state: CacheState, decision: ScheduleDecision,
                        decoding: Iterable[int], request_file: int | None = None) -> CacheState:
    """Apply ``decision.updates`` after checking the CaSI update rules:
    insertions only of the requested file and only at decoding nodes,
    removals only of cached files; capacity checked on the result."""
    dec = set(decoding)
    for node, f, delta in decision.updates:
        if delta == 1:
            if node not in dec:
                raise ConstraintViolation(f"insert at node {node} which did not decode")
            if request_file is not None and f != request_file:
                raise ConstraintViolation(f"insert of file {f} which was not transmitted")
    return state.with_updates(decision.updates)


def validate_decision(request: RequestState, decision: ScheduleDecision, state: CacheState,
                      params: CostKernelParams) -> CacheState:
    """Check the peak power, user decoding, cache size and CaSI update
    constraints; return the next cache state."""
    if not decision.transmit:
        if not request.offloadable(state):
            raise ConstraintViolation("non-offloadable request left unserved")
        if decision.updates:
            raise ConstraintViolation("cache updates without a transmission")
        return state
    if decision.power > params.peak_power * (1 + 1e-12):
        raise ConstraintViolation(f"power {decision.power} > P_B")
    rate = ergodic_rate_exact(decision.power, decision.symbols, request.user_gain, params)
    if rate < params.file_bits * (1 - 1e-9):
        raise ConstraintViolation(f"user rate {rate:.6g} < R_F")
    dec = decoding_set(request, decision.power, decision.symbols, params)
    return apply_cache_updates(state, decision, dec, request.file)


def sample_request_sequence(model: NetworkModel, library: FileLibrary,
                            rng: np.random.Generator | int | None) -> list[RequestState]:
    """One lifetime of requests: each frame carries a request with
    probability beta; file, location and shadowing drawn independently."""
    rng = np.random.default_rng(rng)
    L, beta = library.lifetime_frames, library.request_prob
    if beta <= 0 or L == 0:
        return []
    frames = np.flatnonzero(rng.random(L) < beta) + 1
    n = len(frames)
    files = rng.choice(library.n_files, size=n, p=library.p)
    locs = model.sample_locations(n, rng)
    regions = model.region_of(locs) if n else np.zeros(0, dtype=int)
    user_gain = model.pathloss(np.hypot(locs[:, 0], locs[:, 1])) * model.sample_shadowing(n, rng)
    node_gain = model.node_pathloss[None, :] * model.sample_shadowing((n, model.n_nodes), rng)
    return [
        RequestState(stage=i + 1, file=int(files[i]), location=(float(locs[i, 0]), float(locs[i, 1])),
                     region=int(regions[i]), user_gain=float(user_gain[i]),
                     node_gains=tuple(float(g) for g in node_gain[i]), frame=int(frames[i]))
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Layouts and configuration


def ring_layout(cell_radius: float = 500.0, node_radius: float = 90.0,
                rings: Sequence[tuple[float, int]] = ((405.0, 14), (210.0, 7))) -> tuple[CacheNode, ...]:
    """Cache nodes on concentric rings; ring angles staggered by half a slot."""
    nodes = []
    for j, (r, count) in enumerate(rings):
        offset = 0.5 * j * 2 * math.pi / count
        for i in range(count):
            a = offset + 2 * math.pi * i / count
            nodes.append(CacheNode((r * math.cos(a), r * math.sin(a)), node_radius))
    return tuple(nodes)


def three_region_users(cell_radius: float = 500.0) -> tuple[UserRegion, ...]:
    """Non-uniform user density: 8% / 74% / 18% over three annuli."""
    return (UserRegion(0.0, 150.0, 0.08), UserRegion(150.0, 330.0, 0.74),
            UserRegion(330.0, cell_radius, 0.18))


def default_model(capacity: int = 6, user_regions=None, **kw) -> NetworkModel:
    nodes = kw.pop("cache_nodes", None) or ring_layout()
    return NetworkModel(cache_nodes=nodes, capacities=(capacity,) * len(nodes),
                        user_regions=tuple(user_regions or ()), **kw)


def model_to_dict(model: NetworkModel) -> dict:
    d = {k: getattr(model, k) for k in (
        "cell_radius", "n_antennas", "alpha", "pathloss_exponent", "pathloss_ref",
        "shadowing_sigma_db", "shadowing_clip", "noise_power", "peak_power", "symbol_weight")}
    d["cache_nodes"] = [{"center": list(n.center), "radius": n.radius} for n in model.cache_nodes]
    d["capacities"] = list(model.capacities)
    d["user_regions"] = [{"inner": r.inner, "outer": r.outer, "weight": r.weight}
                         for r in model.user_regions]
    return d


def model_from_dict(d: dict) -> NetworkModel:
    d = dict(d)
    nodes = d.pop("cache_nodes", None)
    if nodes is None or nodes == "ring":
        nodes = ring_layout(d.get("cell_radius", 500.0))
    else:
        nodes = tuple(CacheNode(tuple(n["center"]), n["radius"]) for n in nodes)
    regions = d.pop("user_regions", None)
    if regions == "three_region":
        regions = three_region_users(d.get("cell_radius", 500.0))
    elif regions:
        regions = tuple(UserRegion(r["inner"], r["outer"], r["weight"]) for r in regions)
    caps = d.pop("capacities", None)
    if isinstance(caps, int):
        caps = (caps,) * len(nodes)
    return NetworkModel(cache_nodes=nodes, capacities=tuple(caps or ()),
                        user_regions=tuple(regions or ()), **d)


def library_from_dict(d: dict) -> FileLibrary:
    d = dict(d)
    if "zipf_gamma" in d:
        return FileLibrary.zipf(d.pop("n_files"), d.pop("zipf_gamma"), **d)
    return FileLibrary(popularity=tuple(d.pop("popularity")), **d)


def load_config(path) -> tuple[NetworkModel, FileLibrary]:
    """Read ``{"model": {...}, "library": {...}}`` from a JSON file."""
    with open(path) as fh:
        doc = json.load(fh)
    return model_from_dict(doc.get("model", {})), library_from_dict(doc["library"])
