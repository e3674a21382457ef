"""Time-aware node embeddings: multi-head temporal attention over a node's
most recent interactions, fused with its static features and a per-node
recurrent span memory.

All forward math goes through the autodiff ops so the same code path serves
training (taped) and inference (tape=None). Parameter tensors are passed in
explicitly, which lets the meta-learner evaluate the encoder under adapted
or fused parameter copies without any global state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .graph import TemporalEvent, TemporalGraph, temporal_neighbors

ENC = "encoder."


@dataclass(frozen=True)
class EncoderDims:
    """Shape configuration shared by every encoder forward."""

    d: int = 64          # node embedding width
    d_t: int = 64        # time encoding width (even)
    heads: int = 2
    hops: int = 2
    k: int = 8           # temporal neighbors aggregated per hop
    d_x: int = 1         # static node feature width
    d_e: int = 0         # edge feature width

    def __post_init__(self):
        if self.d_t % 2 != 0:
            raise ValueError("time encoding width must be even")
        if self.d % self.heads != 0:
            raise ValueError("attention heads must divide the embedding width")
        if self.hops < 1 or self.k < 1:
            raise ValueError("hops and neighbor count must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def key_width(self) -> int:
        return self.d + self.d_t + self.d_e

    @property
    def query_width(self) -> int:
        return self.d + self.d_t

    @property
    def memory_input_width(self) -> int:
        return 2 * self.d + self.d_e + self.d_t


def init_encoder_params(dims: EncoderDims, rng: np.random.Generator) -> ParamSet:
    """Fresh encoder parameters.

    Weights are uniform(+-1/sqrt(fan_in)), biases zero. The time-encoding
    frequencies start on a geometric ladder 1/10^(4k/d_t) so different
    coordinates resolve different timescales before any training.
    """
    half = dims.d_t // 2
    ladder = np.asarray([[1.0 / 10.0 ** (4.0 * k / dims.d_t) for k in range(half)]])
    items = {
        ENC + "node_proj": ad.uniform_fan_in(rng, dims.d_x, (dims.d_x, dims.d)),
        ENC + "time.freq_cos": Tensor(ladder.copy()),
        ENC + "time.freq_sin": Tensor(ladder.copy()),
    }
    for h in range(dims.heads):
        items[ENC + f"attn{h}.query"] = ad.uniform_fan_in(rng, dims.query_width, (dims.query_width, dims.d_head))
        items[ENC + f"attn{h}.key"] = ad.uniform_fan_in(rng, dims.key_width, (dims.key_width, dims.d_head))
        items[ENC + f"attn{h}.value"] = ad.uniform_fan_in(rng, dims.key_width, (dims.key_width, dims.d_head))
    items[ENC + "ff_inner"] = ad.uniform_fan_in(rng, dims.d, (dims.d, dims.d))
    items[ENC + "ff_outer"] = ad.uniform_fan_in(rng, 2 * dims.d, (2 * dims.d, dims.d))
    items[ENC + "out_fuse"] = ad.uniform_fan_in(rng, 2 * dims.d, (2 * dims.d, dims.d))
    w = dims.memory_input_width
    for gate in ("update", "reset", "cand"):
        items[ENC + f"memory.in_{gate}"] = ad.uniform_fan_in(rng, w, (w, dims.d))
        items[ENC + f"memory.hid_{gate}"] = ad.uniform_fan_in(rng, dims.d, (dims.d, dims.d))
        items[ENC + f"memory.bias_{gate}"] = Tensor(np.zeros((1, dims.d)))
    return ParamSet(items)


def gru_view(p: ParamSet) -> dict[str, Tensor]:
    return {k: p[ENC + "memory." + k] for k in ad.gru_param_keys()}


def time_encode(tape, p: ParamSet, dts: np.ndarray) -> Tensor:
    """Trainable Fourier features of time deltas.

    dts has shape (n, 1); output is (n, d_t) with columns interleaved as
    [cos(f_c1 dt), sin(f_s1 dt), cos(f_c2 dt), sin(f_s2 dt), ...] scaled by
    sqrt(1/(d_t/2)).
    """
    dt = Tensor(np.asarray(dts, dtype=np.float64).reshape(-1, 1))
    c = ad.cos(tape, ad.mul(tape, dt, p[ENC + "time.freq_cos"]))
    s = ad.sin(tape, ad.mul(tape, dt, p[ENC + "time.freq_sin"]))
    half = p[ENC + "time.freq_cos"].data.shape[1]
    return ad.scale(tape, ad.interleave_cols(tape, c, s), float(np.sqrt(1.0 / half)))


@dataclass
class SpanMemoryState:
    """Per-node recurrent state, updated once per span from that span's
    latest interaction. Starts at zero with last-interaction time 0."""

    value: Tensor
    last_time: float = 0.0
    count: int = 0

    @classmethod
    def initial(cls, d: int) -> "SpanMemoryState":
        return cls(value=ad.zeros((1, d)))


def _base_rep(tape, p, graph, node, cache):
    key = ("base", node)
    if cache is not None and key in cache:
        return cache[key]
    x = Tensor(graph.node_features[node:node + 1])
    out = ad.matmul(tape, x, p[ENC + "node_proj"])
    if cache is not None:
        cache[key] = out
    return out


def _attend(tape, p: ParamSet, dims: EncoderDims, graph: TemporalGraph,
            node: int, t: float, h_node: Tensor, hop: int, cache) -> Tensor:
    """One attention block: aggregate the node's recent events into h_N and
    fuse with the node's own representation."""
    events = temporal_neighbors(graph, node, t, dims.k)
    if not events:
        fused = ad.concat(tape, [ad.zeros((1, dims.d)), h_node], axis=1)
        return ad.relu(tape, ad.matmul(tape, fused, p[ENC + "out_fuse"]))

    if hop >= 2:
        reps = [_embed_inner(tape, p, dims, graph, j, tj, hop - 1, cache) for j, _, tj in events]
        h_nbrs = ad.concat(tape, reps, axis=0)
    else:
        x_nbrs = Tensor(np.stack([graph.node_features[j] for j, _, _ in events]))
        h_nbrs = ad.matmul(tape, x_nbrs, p[ENC + "node_proj"])

    dts = np.asarray([[t - tj] for _, _, tj in events])
    phi = time_encode(tape, p, dts)
    if dims.d_e:
        feats = Tensor(np.stack([f for _, f, _ in events]))
        key_feat = ad.concat(tape, [h_nbrs, phi, feats], axis=1)
    else:
        key_feat = ad.concat(tape, [h_nbrs, phi], axis=1)

    phi0 = cache.get("phi0") if cache is not None else None
    if phi0 is None:
        phi0 = time_encode(tape, p, np.zeros((1, 1)))
        if cache is not None:
            cache["phi0"] = phi0
    q_feat = ad.concat(tape, [h_node, phi0], axis=1)

    inv_sqrt_dk = 1.0 / np.sqrt(dims.d_head)
    aggs, queries = [], []
    for h in range(dims.heads):
        q = ad.matmul(tape, q_feat, p[ENC + f"attn{h}.query"])
        k_mat = ad.matmul(tape, key_feat, p[ENC + f"attn{h}.key"])
        scores = ad.scale(tape, ad.matmul(tape, q, ad.transpose(tape, k_mat)), inv_sqrt_dk)
        ws = ad.row_softmax(tape, scores)
        v_mat = ad.matmul(tape, key_feat, p[ENC + f"attn{h}.value"])
        aggs.append(ad.matmul(tape, ws, v_mat))
        queries.append(q)

    agg = aggs[0] if dims.heads == 1 else ad.concat(tape, aggs, axis=1)
    q_all = queries[0] if dims.heads == 1 else ad.concat(tape, queries, axis=1)
    inner = ad.matmul(tape, agg, p[ENC + "ff_inner"])
    h_neigh = ad.matmul(tape, ad.concat(tape, [inner, q_all], axis=1), p[ENC + "ff_outer"])
    fused = ad.concat(tape, [h_neigh, h_node], axis=1)
    return ad.relu(tape, ad.matmul(tape, fused, p[ENC + "out_fuse"]))


def _embed_inner(tape, p, dims, graph, node, t, hop, cache) -> Tensor:
    """Memory-free embedding used for neighbors during multi-hop recursion.
    Pure in (node, t, hop) under fixed parameters, hence cacheable per
    forward pass."""
    base = _base_rep(tape, p, graph, node, cache)
    if hop == 0:
        return base
    key = ("emb", node, t, hop)
    if cache is not None and key in cache:
        return cache[key]
    out = _attend(tape, p, dims, graph, node, t, base, hop, cache)
    if cache is not None:
        cache[key] = out
    return out


def embed(tape, p: ParamSet, dims: EncoderDims, graph: TemporalGraph, v: int, t: float,
          memory: Tensor | None = None, cache: dict | None = None) -> Tensor:
    """Embedding of node v at time t.

    Only events strictly earlier than t are visible. The span memory (if
    given) enters the root node's own representation; neighbor recursion
    never sees it. `cache` scopes memoized sub-embeddings to one forward
    pass under one parameter set; callers must not reuse it across
    parameter sets or tapes.
    """
    base = _base_rep(tape, p, graph, v, cache)
    h_v = ad.add(tape, base, memory) if memory is not None else base
    return _attend(tape, p, dims, graph, v, t, h_v, dims.hops, cache)


def update_span_memory(tape, p: ParamSet, dims: EncoderDims, state: SpanMemoryState,
                       event: TemporalEvent, z_v: Tensor, z_j: Tensor) -> SpanMemoryState:
    """Fold one span's latest interaction into the node's memory.

    The interaction summary is [z_v || z_j || edge features || Phi(t - t_prev)]
    where t_prev is the time recorded at the previous span boundary.
    """
    phi = time_encode(tape, p, np.asarray([[event.timestamp - state.last_time]]))
    parts = [z_v, z_j]
    if dims.d_e:
        parts.append(Tensor(event.features.reshape(1, -1)))
    parts.append(phi)
    info = ad.concat(tape, parts, axis=1)
    new_value = ad.gru_cell(tape, state.value, info, gru_view(p))
    return SpanMemoryState(value=new_value, last_time=event.timestamp, count=state.count + 1)
