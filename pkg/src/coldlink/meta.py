"""Two-level episodic training: per-span adaptation of encoder/predictor
copies, node-level predictor adaptation, loss-weighted parameter fusion,
and a first-order outer update of the shared initialization.

Every task adapts private copies; the shared parameters are only touched by
the outer optimizer, and only through an ordered reduction over the batch,
so results are bit-identical regardless of worker count.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape, Tensor
from .encoder import ENC, EncoderDims, SpanMemoryState, embed, update_span_memory
from .graph import TemporalGraph
from .metrics import ScoredPrediction, metrics_report
from .predictor import PRED, bce_loss, predict
from .tasks import NodeTask, SpanPartition, partition_spans, resample_query_negatives

SHIFT_KEY = PRED + "feature_shift"


@dataclass
class MetaConfig:
    """Learning rates, episode shape, and ablation switches.

    lr_meta drives the outer Adam update; lr_encoder and lr_predictor are
    the inner (per-span) gradient-descent rates for the two parameter
    groups. inner_steps=0 disables span adaptation outright.
    """

    lr_meta: float = 0.001
    lr_encoder: float = 0.0002
    lr_predictor: float = 0.025
    inner_steps: int = 1
    span_size: int = 2
    n_support: int = 8
    n_query: int = 8
    batch_size: int = 64
    epochs: int = 30
    patience: int = 0            # early stop after this many epochs without val-AUC gain (0 = off)
    threads: int = 1
    no_meta: bool = False        # plain joint training: no adaptation, no fusion, no node shift
    no_span_adapt: bool = False  # keep node adaptation + fusion, skip inner gradient steps
    no_node_adapt: bool = False  # skip the feature-conditioned predictor shift

    def __post_init__(self):
        if min(self.lr_meta, self.lr_encoder, self.lr_predictor) <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")

    @property
    def span_adapt_enabled(self) -> bool:
        return not (self.no_meta or self.no_span_adapt) and self.inner_steps > 0

    @property
    def node_adapt_enabled(self) -> bool:
        return not (self.no_meta or self.no_node_adapt)


@dataclass
class AdaptedSpan:
    """Parameter copies for one span plus the memory state it left behind."""

    enc: ParamSet
    pred: ParamSet
    memory_value: np.ndarray
    memory_last_time: float


@dataclass
class AdaptedParams:
    """All per-span adapted copies for one task."""

    node: int
    spans: list[AdaptedSpan]
    final_memory: np.ndarray
    final_last_time: float
    shift: np.ndarray | None  # node-adaptation bias shift, shared by all spans


@dataclass
class FusedParams:
    """Loss-weighted convex combination of the per-span copies."""

    weights: np.ndarray
    span_losses: np.ndarray
    enc: ParamSet
    pred_base: ParamSet  # before the node-adaptation shift


def node_adapt(pred: ParamSet, shift: np.ndarray) -> ParamSet:
    """Predictor copy with the hidden bias moved by the node's feature shift."""
    out = {}
    for k, t in pred.items():
        out[k] = Tensor(t.data + shift) if k == PRED + "hidden_b" else t.copy()
    return ParamSet(out)


def compute_shift(theta: ParamSet, graph: TemporalGraph, node: int) -> np.ndarray:
    x_v = graph.node_features[node:node + 1]
    return x_v @ theta[SHIFT_KEY].data


def fusion_weights(span_losses) -> np.ndarray:
    """softmax(-loss) over spans: positive, sums to 1."""
    losses = np.asarray(span_losses, dtype=np.float64)
    e = np.exp(-(losses - losses.min()))
    return e / e.sum()


def _span_events(task: NodeTask, partition: SpanPartition, r: int):
    i = partition.span_size
    return [(task.support[p], task.support_negatives[p]) for p in range(r * i, (r + 1) * i)]


def _edge_forward(tape, enc, pred, dims, graph, node, pairs, memory_value, hidden_bias, cache):
    """Score (positive, paired negative) edges; returns probs and labels.

    The node-side embedding is computed once per positive and reused for
    its negative twin (same node, same timestamp)."""
    probs, labels = [], []
    for ev, neg in pairs:
        t = ev.timestamp
        z_v = embed(tape, enc, dims, graph, node, t, memory_value, cache)
        z_j = embed(tape, enc, dims, graph, ev.other(node), t, None, cache)
        z_n = embed(tape, enc, dims, graph, neg.dst, t, None, cache)
        probs.append(predict(tape, pred, z_v, z_j, hidden_bias))
        labels.append(1)
        probs.append(predict(tape, pred, z_v, z_n, hidden_bias))
        labels.append(0)
    return probs, labels


def adapt_task(theta: ParamSet, graph: TemporalGraph, dims: EncoderDims, cfg: MetaConfig,
               task: NodeTask, partition: SpanPartition) -> AdaptedParams:
    """Per-span adaptation for one task.

    Spans are processed in order; each adapts fresh copies of the shared
    parameters (never the previous span's copies), while the span memory
    evolves sequentially across spans. The memory chain is computed under
    the shared parameters and stays on the adaptation tape, so span-loss
    gradients reach the recurrent update and time-encoding parameters
    through it. The shared parameters are never mutated.
    """
    if partition.num_spans == 0:
        raise ValueError("cannot adapt over an empty span partition")
    enc0 = theta.subset(ENC)
    pred0 = theta.subset(PRED)
    shift = compute_shift(theta, graph, task.node) if cfg.node_adapt_enabled else None

    tape = Tape()
    cache: dict = {}
    memory = SpanMemoryState.initial(dims.d)
    spans_out: list[AdaptedSpan] = []
    for r in range(partition.num_spans):
        pairs = _span_events(task, partition, r)
        if cfg.span_adapt_enabled:
            probs, labels = _edge_forward(tape, enc0, pred0, dims, graph, task.node,
                                          pairs, memory.value, None, cache)
            loss = bce_loss(tape, probs, labels)
            grads = ad.backward(tape, loss, theta)
            enc_r = ad.sgd_step(enc0, grads.subset(ENC), cfg.lr_encoder)
            pred_r = ad.sgd_step(pred0, grads.subset(PRED), cfg.lr_predictor)
            for _ in range(cfg.inner_steps - 1):
                # further steps re-differentiate at the adapted copies; the
                # memory value is frozen at the shared-parameter chain here
                step_tape = Tape()
                step_cache: dict = {}
                mem_const = Tensor(memory.value.data.copy())
                probs, labels = _edge_forward(step_tape, enc_r, pred_r, dims, graph, task.node,
                                              pairs, mem_const, None, step_cache)
                loss = bce_loss(step_tape, probs, labels)
                grads = ad.backward(step_tape, loss, enc_r.merged(pred_r))
                enc_r = ad.sgd_step(enc_r, grads.subset(ENC), cfg.lr_encoder)
                pred_r = ad.sgd_step(pred_r, grads.subset(PRED), cfg.lr_predictor)
        else:
            enc_r = enc0.copy()
            pred_r = pred0.copy()

        ev_last = pairs[-1][0]
        z_last_v = embed(tape, enc0, dims, graph, task.node, ev_last.timestamp, memory.value, cache)
        z_last_j = embed(tape, enc0, dims, graph, ev_last.other(task.node), ev_last.timestamp, None, cache)
        memory = update_span_memory(tape, enc0, dims, memory, ev_last, z_last_v, z_last_j)
        spans_out.append(AdaptedSpan(enc_r, pred_r, memory.value.data.copy(), memory.last_time))

    return AdaptedParams(task.node, spans_out, memory.value.data.copy(), memory.last_time, shift)


def fuse(adapted: AdaptedParams, graph: TemporalGraph, dims: EncoderDims, cfg: MetaConfig,
         task: NodeTask, loss_source: str) -> FusedParams:
    """Weight the per-span copies by softmax of their negated losses.

    loss_source selects the events the weights are computed on: "query"
    during meta-training (the training labels are available), "support"
    at evaluation time so query labels never leak into the weights. Each
    span's loss is evaluated under the memory state that span left behind.
    """
    if loss_source == "query":
        pairs = list(zip(task.query, task.query_negatives))
    elif loss_source == "support":
        pairs = list(zip(task.support, task.support_negatives))
    else:
        raise ValueError(f"unknown loss source {loss_source!r}")
    losses = []
    for span in adapted.spans:
        pred_eff = node_adapt(span.pred, adapted.shift) if adapted.shift is not None else span.pred
        probs, labels = _edge_forward(None, span.enc, pred_eff, dims, graph, adapted.node,
                                      pairs, Tensor(span.memory_value), None, {})
        losses.append(bce_loss(None, probs, labels).item())
    losses = np.asarray(losses)
    weights = fusion_weights(losses)
    fused_enc = ad.combine([s.enc for s in adapted.spans], weights.tolist())
    fused_pred = ad.combine([s.pred for s in adapted.spans], weights.tolist())
    return FusedParams(weights, losses, fused_enc, fused_pred)


def _replay_memory(tape, enc, dims, graph, task, partition, cache):
    """Rebuild the span-memory chain under the given (fused) encoder."""
    memory = SpanMemoryState.initial(dims.d)
    for r in range(partition.num_spans):
        ev = _span_events(task, partition, r)[-1][0]
        z_v = embed(tape, enc, dims, graph, task.node, ev.timestamp, memory.value, cache)
        z_j = embed(tape, enc, dims, graph, ev.other(task.node), ev.timestamp, None, cache)
        memory = update_span_memory(tape, enc, dims, memory, ev, z_v, z_j)
    return memory


def _fused_query_forward(tape, theta, fused_enc, fused_pred, dims, cfg, graph, task, partition):
    """Query loss under fused parameters, with the node-adaptation shift
    applied on-tape through the shared projection so it receives a
    gradient. Returns (loss, probs, labels)."""
    if cfg.node_adapt_enabled:
        x_v = Tensor(graph.node_features[task.node:task.node + 1])
        shift = ad.matmul(tape, x_v, theta[SHIFT_KEY])
        hidden_bias = ad.add(tape, fused_pred[PRED + "hidden_b"], shift)
    else:
        hidden_bias = None
    cache: dict = {}
    memory = _replay_memory(tape, fused_enc, dims, graph, task, partition, cache)
    pairs = list(zip(task.query, task.query_negatives))
    probs, labels = _edge_forward(tape, fused_enc, fused_pred, dims, graph, task.node,
                                  pairs, memory.value, hidden_bias, cache)
    return bce_loss(tape, probs, labels), probs, labels


def _train_task(theta, graph, dims, cfg, task):
    """Adapt, fuse, and differentiate one task's query loss at the fused
    parameters (first-order meta-gradient)."""
    partition = partition_spans(task, cfg.span_size)
    try:
        if cfg.no_meta:
            fused_enc = theta.subset(ENC)
            fused_pred = theta.subset(PRED)
            # memory replay still runs under the shared parameters below
        else:
            adapted = adapt_task(theta, graph, dims, cfg, task, partition)
            fused = fuse(adapted, graph, dims, cfg, task, "query")
            fused_enc, fused_pred = fused.enc, fused.pred_base
        tape = Tape()
        loss, probs, labels = _fused_query_forward(tape, theta, fused_enc, fused_pred,
                                                   dims, cfg, graph, task, partition)
        leaves = dict(fused_enc.items())
        for k, t in fused_pred.items():
            if k != SHIFT_KEY:
                leaves[k] = t
        leaves[SHIFT_KEY] = theta[SHIFT_KEY]
        grads = ad.backward(tape, loss, ParamSet(leaves))
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(f"non-finite loss while training task for node {task.node}: {exc}") from exc
    preds = [ScoredPrediction(p.item(), y, task_id=task.node) for p, y in zip(probs, labels)]
    return grads, loss.item(), preds


def _map_ordered(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def meta_train_epoch(theta: ParamSet, graph: TemporalGraph, dims: EncoderDims, cfg: MetaConfig,
                     tasks, opt_state: ad.AdamState, seed: int, epoch: int):
    """One pass over the task list in fixed order.

    Query negatives are redrawn per epoch from a (seed, node, epoch)-keyed
    stream. Per-batch meta-gradients are averaged over the batch in task
    order before a single Adam step, so the result does not depend on the
    worker count. Returns (new theta, {"mean_query_loss", "train_auc"}).
    """
    if not tasks:
        raise ValueError("meta_train_epoch needs at least one task")
    epoch_tasks = [resample_query_negatives(graph, t, seed, epoch) for t in tasks]
    losses: list[float] = []
    all_preds: list[ScoredPrediction] = []
    for start in range(0, len(epoch_tasks), cfg.batch_size):
        batch = epoch_tasks[start:start + cfg.batch_size]
        results = _map_ordered(lambda tk: _train_task(theta, graph, dims, cfg, tk), batch, cfg.threads)
        acc: dict[str, np.ndarray] = {k: np.zeros_like(t.data) for k, t in theta.items()}
        for grads, loss, preds in results:
            for k in acc:
                acc[k] += grads[k].data
            losses.append(loss)
            all_preds.extend(preds)
        mean_grads = ParamSet((k, Tensor(v / len(batch))) for k, v in acc.items())
        theta = ad.adam_step(theta, mean_grads, opt_state, cfg.lr_meta)
    stats = {
        "mean_query_loss": float(np.mean(losses)),
        "train_auc": metrics_report(all_preds)["auc"],
    }
    return theta, stats


def evaluate_task(theta, graph, dims, cfg, task):
    """Adapt on the support set, fuse with support-side weights, and score
    every query positive with its paired negative. Read-only in theta."""
    partition = partition_spans(task, cfg.span_size)
    if cfg.no_meta:
        enc, pred = theta.subset(ENC), theta.subset(PRED)
        hidden_b = pred[PRED + "hidden_b"]
    else:
        adapted = adapt_task(theta, graph, dims, cfg, task, partition)
        fused = fuse(adapted, graph, dims, cfg, task, "support")
        enc, pred = fused.enc, fused.pred_base
        if adapted.shift is not None:
            hidden_b = Tensor(pred[PRED + "hidden_b"].data + adapted.shift)
        else:
            hidden_b = pred[PRED + "hidden_b"]
    cache: dict = {}
    memory = _replay_memory(None, enc, dims, graph, task, partition, cache)
    pairs = list(zip(task.query, task.query_negatives))
    probs, labels = _edge_forward(None, enc, pred, dims, graph, task.node,
                                  pairs, memory.value, hidden_b, cache)
    out = []
    for (ev, neg), (p_pos, p_neg) in zip(pairs, zip(probs[0::2], probs[1::2])):
        out.append(ScoredPrediction(p_pos.item(), 1, task_id=task.node, event_id=ev.event_index))
        out.append(ScoredPrediction(p_neg.item(), 0, task_id=task.node, event_id=ev.event_index))
    return out


def meta_test(theta: ParamSet, graph: TemporalGraph, dims: EncoderDims, cfg: MetaConfig,
              tasks, threshold: float = 0.5, per_task: bool = False):
    """Evaluate on held-out tasks; returns (predictions, metrics report)."""
    if not tasks:
        raise ValueError("meta_test needs at least one task")
    per_task_preds = _map_ordered(lambda tk: evaluate_task(theta, graph, dims, cfg, tk),
                                  tasks, cfg.threads)
    preds = [p for chunk in per_task_preds for p in chunk]
    return preds, metrics_report(preds, threshold, per_task=per_task)


@dataclass
class TrainResult:
    theta: ParamSet              # parameters at the best validation epoch
    final_theta: ParamSet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")


def train(theta: ParamSet, graph: TemporalGraph, dims: EncoderDims, cfg: MetaConfig,
          train_tasks, val_tasks, seed: int, log_fn=None, checkpoint_fn=None) -> TrainResult:
    """Full training loop with per-epoch validation and best-checkpoint tracking."""
    opt_state = ad.AdamState(theta)
    best_theta = theta.copy()
    best_auc = -1.0
    best_epoch = -1
    history = []
    since_best = 0
    for epoch in range(cfg.epochs):
        theta, stats = meta_train_epoch(theta, graph, dims, cfg, train_tasks, opt_state, seed, epoch)
        row = {"epoch": epoch, "mean_query_loss": stats["mean_query_loss"],
               "train_auc": stats["train_auc"]}
        if val_tasks:
            _, val_report = meta_test(theta, graph, dims, cfg, val_tasks)
            row["val_auc"] = val_report["auc"]
            if val_report["auc"] > best_auc + 1e-12:
                best_auc = val_report["auc"]
                best_theta = theta.copy()
                best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
        history.append(row)
        if log_fn is not None:
            log_fn(row)
        if checkpoint_fn is not None:
            checkpoint_fn(epoch, theta)
        if val_tasks and cfg.patience and since_best >= cfg.patience:
            break
    if not val_tasks:
        best_theta, best_epoch, best_auc = theta.copy(), cfg.epochs - 1, float("nan")
    return TrainResult(best_theta, theta, history, best_epoch, best_auc)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def _verification_loss(tape, theta, graph, dims, cfg, task, partition):
    """Differentiable composite used by the gradient checker: the sum of all
    span losses with the memory chain on-tape and the node-adaptation shift
    applied to the hidden bias, so every parameter group (attention, time
    encoding, recurrent memory, predictor, feature shift) is exercised."""
    enc = theta.subset(ENC)
    pred = theta.subset(PRED)
    x_v = Tensor(graph.node_features[task.node:task.node + 1])
    hidden_bias = ad.add(tape, pred[PRED + "hidden_b"], ad.matmul(tape, x_v, theta[SHIFT_KEY]))
    cache: dict = {}
    memory = SpanMemoryState.initial(dims.d)
    total = None
    for r in range(partition.num_spans):
        pairs = _span_events(task, partition, r)
        probs, labels = _edge_forward(tape, enc, pred, dims, graph, task.node,
                                      pairs, memory.value, hidden_bias, cache)
        loss = bce_loss(tape, probs, labels)
        total = loss if total is None else ad.add(tape, total, loss)
        ev = pairs[-1][0]
        z_v = embed(tape, enc, dims, graph, task.node, ev.timestamp, memory.value, cache)
        z_j = embed(tape, enc, dims, graph, ev.other(task.node), ev.timestamp, None, cache)
        memory = update_span_memory(tape, enc, dims, memory, ev, z_v, z_j)
    return total


def gradient_check(theta: ParamSet, graph: TemporalGraph, dims: EncoderDims, cfg: MetaConfig,
                   task: NodeTask, step: float = 1e-5, rtol: float = 1e-4,
                   atol: float = 1e-8) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    Returns {key: {"max_rel_err", "max_abs_err", "ok"}} per parameter group
    plus an "all_ok" flag. An entry passes when
    |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).
    """
    partition = partition_spans(task, cfg.span_size)
    tape = Tape()
    loss = _verification_loss(tape, theta, graph, dims, cfg, task, partition)
    analytic = ad.backward(tape, loss, theta)

    def loss_fn(p):
        return _verification_loss(None, p, graph, dims, cfg, task, partition).item()

    numeric = ad.finite_difference(loss_fn, theta, step=step)
    report = {}
    all_ok = True
    for k in theta.keys():
        a = analytic[k].data
        n = numeric[k].data
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / rtol)
        rel = np.abs(a - n) / denom
        ok = bool(np.all(np.abs(a - n) <= atol + rtol * np.maximum(np.abs(a), np.abs(n))))
        report[k] = {
            "max_rel_err": float(rel.max()),
            "max_abs_err": float(np.abs(a - n).max()),
            "ok": ok,
        }
        all_ok = all_ok and ok
    report["all_ok"] = all_ok
    return report
