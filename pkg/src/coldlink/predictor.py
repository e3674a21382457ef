"""Two-layer MLP link scorer and the balanced binary cross-entropy loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

PRED = "predictor."
PROB_EPS = 1e-12  # clamp bound; keeps log() alive on saturated sigmoids


def init_predictor_params(d: int, d_x: int, rng: np.random.Generator,
                          d_hidden: int | None = None) -> ParamSet:
    """Fresh predictor parameters.

    feature_shift is the trainable projection used by node-level adaptation:
    it maps a node's static features onto an additive shift of the hidden
    layer's bias.
    """
    dh = d if d_hidden is None else d_hidden
    return ParamSet({
        PRED + "hidden_w": ad.uniform_fan_in(rng, 2 * d, (2 * d, dh)),
        PRED + "hidden_b": Tensor(np.zeros((1, dh))),
        PRED + "out_w": ad.uniform_fan_in(rng, dh, (dh, 1)),
        PRED + "out_b": Tensor(np.zeros((1, 1))),
        PRED + "feature_shift": ad.uniform_fan_in(rng, d_x, (d_x, dh)),
    })


def predict(tape, p: ParamSet, z_v: Tensor, z_j: Tensor,
            hidden_bias: Tensor | None = None) -> Tensor:
    """Probability that a temporal edge (v, j) exists, strictly in (0, 1).

    hidden_bias overrides the stored hidden-layer bias; the meta-learner
    passes the node-adapted bias through here so the shift stays on the
    gradient tape.
    """
    b1 = hidden_bias if hidden_bias is not None else p[PRED + "hidden_b"]
    u = ad.concat(tape, [z_v, z_j], axis=1)
    h = ad.relu(tape, ad.add(tape, ad.matmul(tape, u, p[PRED + "hidden_w"]), b1))
    logit = ad.add(tape, ad.matmul(tape, h, p[PRED + "out_w"]), p[PRED + "out_b"])
    return ad.sigmoid(tape, logit)


def bce_loss(tape, probs: list[Tensor], labels) -> Tensor:
    """Summed negated log-likelihood over scored edges.

    Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before the log.
    The sum (not mean) keeps per-span losses comparable across spans of
    equal size.
    """
    if not probs:
        raise ValueError("bce_loss over an empty prediction set")
    y = np.asarray(labels, dtype=np.float64).reshape(1, -1)
    if y.shape[1] != len(probs):
        raise ValueError("labels must pair 1:1 with probabilities")
    pr = ad.clamp(tape, ad.concat(tape, probs, axis=1), PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.sum_all(tape, ad.mul(tape, Tensor(y), ad.log(tape, pr)))
    neg = ad.sum_all(tape, ad.mul(tape, Tensor(1.0 - y), ad.log(tape, ad.rsub_const(tape, 1.0, pr))))
    return ad.scale(tape, ad.add(tape, pos, neg), -1.0)
