"""Synthetic temporal graphs with planted community structure.

Nodes belong to communities and interact predominantly within them; each
node also keeps a small set of favorite partners it revisits, and partner
choice is popularity-weighted, so there is learnable structure beyond bare
community matching. A configurable fraction of nodes arrives late in the
horizon, which supplies the cold-start nodes that the chronological split
turns into validation/test tasks.

Timestamps per node are uniform over [arrival, horizon], i.e. a homogeneous
arrival process conditioned on the event count. Node features are the
one-hot community id; edge features are low-amplitude noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .graph import TemporalEvent, TemporalGraph

# internal generator constants (not part of the spec surface)
_FAVORITE_POOL = 4       # favorite partners drawn per node
_FAVORITE_PROB = 0.7     # chance an intra-community event targets a favorite
_POPULARITY_SIGMA = 1.0  # lognormal popularity spread
_ARRIVAL_WINDOW = (0.55, 0.92)  # late arrivals land in this fraction of the horizon
_EDGE_NOISE = 0.1


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a generated benchmark graph."""

    num_communities: int = 4
    nodes_per_community: int = 50
    events_per_node: int = 20
    new_node_fraction: float = 0.3
    noise: float = 0.1           # inter-community event rate
    horizon: float = 1000.0
    d_e: int = 4

    def __post_init__(self):
        if self.num_communities < 2:
            raise ValueError("need at least 2 communities")
        if not (0.0 <= self.noise < 1.0):
            raise ValueError("noise rate must be in [0, 1)")
        if not (0.0 <= self.new_node_fraction < 1.0):
            raise ValueError("new-node fraction must be in [0, 1)")
        if self.nodes_per_community < 2 or self.events_per_node < 1 or self.horizon <= 0:
            raise ValueError("invalid synthetic spec")

    @property
    def num_nodes(self) -> int:
        return self.num_communities * self.nodes_per_community


def _weighted_pick(rng, candidates, weights):
    w = weights[candidates]
    return int(candidates[rng.choice(len(candidates), p=w / w.sum())])


def generate(spec: SynthSpec, seed: int) -> TemporalGraph:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    n = spec.num_nodes
    community = np.arange(n) % spec.num_communities
    members = [np.flatnonzero(community == c) for c in range(spec.num_communities)]
    popularity = rng.lognormal(0.0, _POPULARITY_SIGMA, size=n)

    # arrival times: most nodes are present from the start, a fraction
    # arrives late and becomes the cold-start population
    arrival = np.zeros(n)
    n_late = int(round(spec.new_node_fraction * n))
    late = rng.choice(n, size=n_late, replace=False)
    lo, hi = _ARRIVAL_WINDOW
    arrival[late] = rng.uniform(lo * spec.horizon, hi * spec.horizon, size=n_late)

    favorites = {}
    for v in range(n):
        own = members[community[v]]
        pool = own[own != v]
        favorites[v] = rng.choice(pool, size=min(_FAVORITE_POOL, len(pool)), replace=False)

    rows = []  # (timestamp, src, dst)
    for v in range(n):
        times = rng.uniform(arrival[v], spec.horizon, size=spec.events_per_node)
        for t in np.sort(times):
            arrived = arrival <= t
            own = members[community[v]]
            if rng.random() < spec.noise:
                cands = np.flatnonzero(arrived & (community != community[v]))
            else:
                if rng.random() < _FAVORITE_PROB:
                    favs = favorites[v][arrived[favorites[v]]]
                    if len(favs):
                        rows.append((t, v, int(rng.choice(favs))))
                        continue
                cands = own[arrived[own] & (own != v)]
            if len(cands) == 0:
                cands = np.flatnonzero(arrived & (np.arange(n) != v))
            if len(cands) == 0:
                continue
            rows.append((t, v, _weighted_pick(rng, cands, popularity)))

    rows.sort(key=lambda r: r[0])
    feats = rng.normal(0.0, _EDGE_NOISE, size=(len(rows), spec.d_e))
    events = [TemporalEvent(src, dst, t, feats[i], i) for i, (t, src, dst) in enumerate(rows)]
    node_features = np.eye(spec.num_communities)[community]
    return TemporalGraph(events, n, spec.d_e, node_features)


def intra_community_fraction(graph: TemporalGraph, spec: SynthSpec) -> float:
    community = np.arange(graph.num_nodes) % spec.num_communities
    same = sum(1 for e in graph.events if community[e.src] == community[e.dst])
    return same / graph.num_events


def write_csv(graph: TemporalGraph, path) -> None:
    """Event stream in the ingestion layout (state label fixed at 0)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        for e in graph.events:
            w.writerow([e.src, e.dst, repr(float(e.timestamp)), 0] + [repr(float(x)) for x in e.features])


def write_node_features_csv(graph: TemporalGraph, path) -> None:
    """Side table for node features: node_id,x1,...,x_dx."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        for v in range(graph.num_nodes):
            w.writerow([v] + [repr(float(x)) for x in graph.node_features[v]])


def load_node_features_csv(path, num_nodes: int) -> np.ndarray:
    rows = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if not row:
                continue
            rows[int(row[0])] = [float(x) for x in row[1:]]
    if not rows:
        raise ValueError(f"{path}: empty node feature table")
    d_x = len(next(iter(rows.values())))
    out = np.zeros((num_nodes, d_x))
    for v, vec in rows.items():
        if len(vec) != d_x:
            raise ValueError(f"{path}: inconsistent feature arity for node {v}")
        out[v] = vec
    return out
