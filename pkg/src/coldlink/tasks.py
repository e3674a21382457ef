"""Episodic node-level tasks: support/query splits, span partitions, negatives.

Each task is one node's few-shot instance: its earliest eligible
interactions form the support set, the following ones the query set, and
every positive is paired with one uniformly sampled negative. Sampling is
keyed by (seed, node), so building tasks in any order or in parallel gives
byte-identical results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .graph import ChronoSplit, TemporalEvent, TemporalGraph


@dataclass(frozen=True)
class NegativeSample:
    """A non-edge paired with one positive: same source, same timestamp,
    uniformly drawn counterpart, zero edge features."""

    src: int
    dst: int
    timestamp: float
    features: np.ndarray


@dataclass(frozen=True)
class NodeTask:
    """One node's episodic instance."""

    node: int
    support: tuple[TemporalEvent, ...]
    query: tuple[TemporalEvent, ...]
    support_negatives: tuple[NegativeSample, ...]
    query_negatives: tuple[NegativeSample, ...]

    def __post_init__(self):
        if len(self.support_negatives) != len(self.support):
            raise ValueError("support negatives must pair 1:1 with support events")
        if len(self.query_negatives) != len(self.query):
            raise ValueError("query negatives must pair 1:1 with query events")


@dataclass(frozen=True)
class SpanPartition:
    """Support set cut into consecutive groups of span_size events each.

    Only complete spans are kept: trailing support events that do not fill
    a span are dropped.
    """

    span_size: int
    spans: tuple[tuple[TemporalEvent, ...], ...]

    @property
    def num_spans(self) -> int:
        return len(self.spans)


def partition_spans(task: NodeTask, span_size: int) -> SpanPartition:
    n = len(task.support)
    if span_size < 1:
        raise ValueError("span size must be >= 1")
    if span_size > n:
        raise ValueError(f"span size {span_size} exceeds support length {n}")
    num = n // span_size
    spans = tuple(tuple(task.support[r * span_size:(r + 1) * span_size]) for r in range(num))
    return SpanPartition(span_size, spans)


def _node_rng(seed: int, node: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, node) + stream))


def _draw_negative(rng: np.random.Generator, num_nodes: int, v: int, counterpart: int,
                   ev, d_e: int) -> NegativeSample:
    while True:
        j = int(rng.integers(0, num_nodes))
        if j != v and j != counterpart:
            return NegativeSample(v, j, ev.timestamp, np.zeros(d_e))


def _negatives_for(rng, graph: TemporalGraph, v: int, events) -> tuple[NegativeSample, ...]:
    return tuple(
        _draw_negative(rng, graph.num_nodes, v, ev.other(v), ev, graph.d_e) for ev in events
    )


def build_train_tasks(graph: TemporalGraph, chrono: ChronoSplit, n_support: int,
                      n_query: int, seed: int, new_only: bool = False) -> list[NodeTask]:
    """One task per training-range node with enough in-range events.

    Support = the node's first n_support events inside the training range,
    query = the next n_query, both consecutive in the node's personal
    sequence (no jumping). Nodes with fewer than n_support + n_query
    in-range events are skipped.
    """
    if n_support < 1 or n_query < 1:
        raise ValueError("support and query sizes must be >= 1")
    lo, hi = chrono.train_range
    tasks = []
    for v in range(graph.num_nodes):
        evs = [e for e in graph.node_events(v) if lo <= e.event_index < hi]
        if len(evs) < n_support + n_query:
            continue
        if new_only and evs and graph.node_events(v)[0].event_index < lo:
            continue
        support = tuple(evs[:n_support])
        query = tuple(evs[n_support:n_support + n_query])
        rng = _node_rng(seed, v)
        tasks.append(NodeTask(v, support, query,
                              _negatives_for(rng, graph, v, support),
                              _negatives_for(rng, graph, v, query)))
    return tasks


def build_test_tasks(graph: TemporalGraph, new_nodes, n_support: int, seed: int) -> list[NodeTask]:
    """One task per new node: first n_support events adapt, all later ones evaluate.

    Negatives are frozen at build time so evaluation stays reproducible.
    New nodes with no events beyond the support set are skipped.
    """
    if n_support < 1:
        raise ValueError("support size must be >= 1")
    tasks = []
    for v in sorted(new_nodes):
        evs = graph.node_events(v)
        if len(evs) < n_support + 1:
            continue
        support = tuple(evs[:n_support])
        query = tuple(evs[n_support:])
        rng = _node_rng(seed, v)
        tasks.append(NodeTask(v, support, query,
                              _negatives_for(rng, graph, v, support),
                              _negatives_for(rng, graph, v, query)))
    return tasks


def resample_query_negatives(graph: TemporalGraph, task: NodeTask, seed: int, epoch: int) -> NodeTask:
    """Fresh query negatives for one meta-training epoch (support stays frozen)."""
    rng = _node_rng(seed, task.node, 1 + epoch)
    return replace(task, query_negatives=_negatives_for(rng, graph, task.node, task.query))


def tasks_to_jsonl(tasks, path) -> None:
    """Debug export: one task per line, events as [src, dst, timestamp]."""
    def ev_row(e):
        return [int(e.src), int(e.dst), float(e.timestamp)]

    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps({
                "node": t.node,
                "support": [ev_row(e) for e in t.support],
                "query": [ev_row(e) for e in t.query],
                "support_negatives": [ev_row(e) for e in t.support_negatives],
                "query_negatives": [ev_row(e) for e in t.query_negatives],
            }) + "\n")
