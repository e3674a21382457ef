"""Temporal interaction graph: loading, validation, indexing, chronological splits.

A graph is an immutable, chronologically sorted stream of timestamped,
feature-bearing interaction events plus per-node static features. After
load it only answers read queries (temporal neighbors, splits), so it is
safe to share across worker threads.
"""

from __future__ import annotations

import bisect
import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TemporalEvent:
    """One timestamped interaction between two nodes."""

    src: int
    dst: int
    timestamp: float
    features: np.ndarray
    event_index: int

    def other(self, node: int) -> int:
        """The counterpart endpoint of this event as seen from node."""
        if node == self.src:
            return self.dst
        if node == self.dst:
            return self.src
        raise ValueError(f"node {node} is not an endpoint of event {self.event_index}")


@dataclass(frozen=True)
class IngestSchema:
    """How to read an event CSV.

    Rows follow the interaction layout ``src,dst,timestamp,state_label,f*``;
    the state label is parsed and ignored. ``has_header=None`` sniffs the
    first line. ``distinct_dst_space`` namespaces destination ids before
    densification (for bipartite exports where user and item ids both start
    at 0). With ``require_sorted`` unsorted input is an error; otherwise the
    stream is stably sorted by timestamp, preserving file order on ties.
    """

    has_header: bool | None = None
    require_sorted: bool = False
    distinct_dst_space: bool = False
    node_feature_dim: int = 1


class TemporalGraph:
    """Immutable event stream with per-node chronological adjacency index."""

    def __init__(self, events: list[TemporalEvent], num_nodes: int, d_e: int,
                 node_features: np.ndarray, raw_ids: list | None = None):
        self.events = events
        self.num_nodes = num_nodes
        self.d_e = d_e
        self.node_features = node_features
        self.raw_ids = raw_ids if raw_ids is not None else list(range(num_nodes))
        # per-node ascending event indices + aligned timestamps for bisect
        adj: list[list[int]] = [[] for _ in range(num_nodes)]
        for ev in events:
            adj[ev.src].append(ev.event_index)
            if ev.dst != ev.src:
                adj[ev.dst].append(ev.event_index)
        self._adj = [np.asarray(a, dtype=np.int64) for a in adj]
        self._adj_times = [np.asarray([events[i].timestamp for i in a]) for a in self._adj]
        self.validate()

    @property
    def num_events(self) -> int:
        return len(self.events)

    @property
    def d_x(self) -> int:
        return self.node_features.shape[1]

    def node_events(self, v: int) -> list[TemporalEvent]:
        """All events involving v, in chronological (stream) order."""
        self._check_node(v)
        return [self.events[i] for i in self._adj[v]]

    def validate(self) -> None:
        prev = -np.inf
        for i, ev in enumerate(self.events):
            if ev.event_index != i:
                raise ValueError(f"event_index {ev.event_index} out of order at position {i}")
            if ev.timestamp < prev:
                raise ValueError(f"events not sorted by timestamp at index {i}")
            prev = ev.timestamp
            if not (0 <= ev.src < self.num_nodes and 0 <= ev.dst < self.num_nodes):
                raise ValueError(f"event {i} references node outside 0..{self.num_nodes - 1}")
            if ev.features.shape != (self.d_e,):
                raise ValueError(f"event {i} has feature arity {ev.features.shape[0]}, expected {self.d_e}")
        if self.node_features.shape[0] != self.num_nodes:
            raise ValueError("node_features row count does not match num_nodes")
        # adjacency round-trip: rebuilding from events must reproduce the index
        seen: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for ev in self.events:
            seen[ev.src].append(ev.event_index)
            if ev.dst != ev.src:
                seen[ev.dst].append(ev.event_index)
        for v in range(self.num_nodes):
            if not np.array_equal(np.asarray(seen[v], dtype=np.int64), self._adj[v]):
                raise ValueError(f"adjacency index inconsistent for node {v}")

    def _check_node(self, v: int) -> None:
        if not (0 <= v < self.num_nodes):
            raise KeyError(f"unknown node id {v}")

    def summary(self) -> dict:
        t0 = self.events[0].timestamp if self.events else 0.0
        t1 = self.events[-1].timestamp if self.events else 0.0
        return {
            "num_nodes": self.num_nodes,
            "num_events": self.num_events,
            "d_e": self.d_e,
            "d_x": self.d_x,
            "time_min": t0,
            "time_max": t1,
        }


def temporal_neighbors(graph: TemporalGraph, v: int, t: float, k: int) -> list[tuple[int, np.ndarray, float]]:
    """The k most recent events involving v strictly before time t.

    Returns (neighbor-id, edge-features, event-timestamp) triples, most
    recent first (ties broken toward the later stream position). Strict
    inequality on the timestamp keeps aggregation causal: an event at
    exactly t is never visible to an embedding computed at t.
    """
    graph._check_node(v)
    if t < 0:
        raise ValueError("query time must be non-negative")
    if k < 1:
        raise ValueError("neighbor count must be >= 1")
    times = graph._adj_times[v]
    hi = bisect.bisect_left(times, t)
    out = []
    for pos in range(hi - 1, max(-1, hi - 1 - k), -1):
        ev = graph.events[graph._adj[v][pos]]
        out.append((ev.other(v), ev.features, ev.timestamp))
    return out


@dataclass(frozen=True)
class ChronoSplit:
    """Contiguous chronological partition of the event stream.

    Ranges are half-open [start, end) event-index intervals. New-node sets
    hold nodes whose first event falls in the corresponding range.
    """

    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]
    val_new_nodes: frozenset[int] = field(repr=False)
    test_new_nodes: frozenset[int] = field(repr=False)


def split(graph: TemporalGraph, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> ChronoSplit:
    """Chronological train/val/test partition by event count."""
    r1, r2, r3 = ratios
    if min(r1, r2, r3) <= 0:
        raise ValueError("split ratios must be positive")
    if abs(r1 + r2 + r3 - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = graph.num_events
    if n < 3:
        raise ValueError("graph must contain at least 3 events to split")
    a = int(n * r1)
    b = int(n * (r1 + r2))
    first_event = {}
    for ev in graph.events:
        for node in (ev.src, ev.dst):
            if node not in first_event:
                first_event[node] = ev.event_index
    val_new = frozenset(v for v, i in first_event.items() if a <= i < b)
    test_new = frozenset(v for v, i in first_event.items() if i >= b)
    return ChronoSplit((0, a), (a, b), (b, n), val_new, test_new)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _looks_like_header(row: list[str]) -> bool:
    try:
        float(row[0])
        float(row[1])
        return False
    except (ValueError, IndexError):
        return True


def load_csv(path, schema: IngestSchema = IngestSchema()) -> TemporalGraph:
    """Load an interaction CSV into a validated TemporalGraph.

    Node ids are densified to 0..num_nodes-1 in first-appearance order
    (src before dst within a row) and timestamps are shifted so the
    earliest is 0. The raw-id map is kept on the graph for traceability.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1:
                header = schema.has_header if schema.has_header is not None else _looks_like_header(row)
                if header:
                    continue
            if len(row) < 4:
                raise ValueError(f"{path}: line {lineno}: expected at least 4 columns, got {len(row)}")
            try:
                src = int(float(row[0]))
                dst = int(float(row[1]))
                ts = float(row[2])
                float(row[3])  # state label: parsed, ignored
                feats = np.asarray([float(x) for x in row[4:]], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: malformed row ({exc})") from None
            rows.append((src, dst, ts, feats, lineno))

    if rows:
        d_e = rows[0][3].shape[0]
        for src, dst, ts, feats, lineno in rows:
            if feats.shape[0] != d_e:
                raise ValueError(f"{path}: line {lineno}: feature arity {feats.shape[0]} != {d_e}")
    else:
        d_e = 0

    order = list(range(len(rows)))
    sorted_order = sorted(order, key=lambda i: rows[i][2])  # stable: file order on ties
    if schema.require_sorted and sorted_order != order:
        raise ValueError(f"{path}: timestamps are not monotone and schema requires sorted input")
    order = sorted_order

    id_map: dict = {}
    raw_ids: list = []

    def dense(raw) -> int:
        if raw not in id_map:
            id_map[raw] = len(raw_ids)
            raw_ids.append(raw)
        return id_map[raw]

    t0 = rows[order[0]][2] if rows else 0.0
    events = []
    for new_index, i in enumerate(order):
        src, dst, ts, feats, _ = rows[i]
        s = dense(("s", src)) if schema.distinct_dst_space else dense(src)
        d = dense(("d", dst)) if schema.distinct_dst_space else dense(dst)
        events.append(TemporalEvent(s, d, ts - t0, feats, new_index))

    num_nodes = len(raw_ids)
    d_x = max(1, schema.node_feature_dim)
    node_features = np.zeros((num_nodes, d_x))
    return TemporalGraph(events, num_nodes, d_e, node_features, raw_ids)


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------
#
#   magic   4 bytes  b"TGRF"
#   version 1 byte   0x01
#   header  u64 num_events | u64 num_nodes | u32 d_e | u32 d_x
#   payload i64 src[n] | i64 dst[n] | f64 ts[n] | f64 feat[n*d_e]
#           f64 node_feat[num_nodes*d_x]
#           raw-id table: per node u16 len | utf8 of repr'd raw id
#
# Everything little-endian. save -> load is an identity on events,
# features, and node features.

_MAGIC = b"TGRF"
_VERSION = 1


def save_cache(graph: TemporalGraph, path) -> None:
    n = graph.num_events
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<B", _VERSION))
        f.write(struct.pack("<QQII", n, graph.num_nodes, graph.d_e, graph.d_x))
        f.write(np.asarray([e.src for e in graph.events], dtype="<i8").tobytes())
        f.write(np.asarray([e.dst for e in graph.events], dtype="<i8").tobytes())
        f.write(np.asarray([e.timestamp for e in graph.events], dtype="<f8").tobytes())
        if n and graph.d_e:
            feats = np.stack([e.features for e in graph.events]).astype("<f8")
            f.write(feats.tobytes())
        f.write(np.ascontiguousarray(graph.node_features, dtype="<f8").tobytes())
        for raw in graph.raw_ids:
            rb = repr(raw).encode("utf-8")
            f.write(struct.pack("<H", len(rb)))
            f.write(rb)


def load_cache(path) -> TemporalGraph:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a temporal-graph cache (bad magic)")
    if raw[4] != _VERSION:
        raise ValueError(f"unsupported cache version {raw[4]}")
    n, num_nodes, d_e, d_x = struct.unpack_from("<QQII", raw, 5)
    off = 5 + struct.calcsize("<QQII")
    src = np.frombuffer(raw, dtype="<i8", count=n, offset=off); off += 8 * n
    dst = np.frombuffer(raw, dtype="<i8", count=n, offset=off); off += 8 * n
    ts = np.frombuffer(raw, dtype="<f8", count=n, offset=off); off += 8 * n
    feats = np.frombuffer(raw, dtype="<f8", count=n * d_e, offset=off).reshape(n, d_e); off += 8 * n * d_e
    node_feats = np.frombuffer(raw, dtype="<f8", count=num_nodes * d_x, offset=off).reshape(num_nodes, d_x)
    off += 8 * num_nodes * d_x
    raw_ids = []
    for _ in range(num_nodes):
        (ln,) = struct.unpack_from("<H", raw, off); off += 2
        raw_ids.append(raw[off:off + ln].decode("utf-8")); off += ln
    events = [TemporalEvent(int(src[i]), int(dst[i]), float(ts[i]), feats[i].astype(np.float64), i)
              for i in range(n)]
    return TemporalGraph(events, num_nodes, d_e, node_feats.astype(np.float64), raw_ids)


def write_summary(graph: TemporalGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(graph.summary(), f, indent=2, sort_keys=True)
        f.write("\n")
