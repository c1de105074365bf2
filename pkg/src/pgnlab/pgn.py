"""Pointer-generator output head.

At each target step a scalar gate ``p_copy`` mixes a copy distribution
(cross-attention mass scattered onto the source tokens' vocabulary ids) with
the generate distribution (softmax of the decoder's output logits). The gate
reads the attention context vector, the final decoder state and the decoder
input embedding.

All functions accept arbitrary leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_EPS = 1e-9
GATE_LOGIT_BOUND = 36.0


@dataclass
class GateParams:
    W: Tensor   # [3 * hidden]
    B: Tensor   # scalar


@dataclass
class MixedDistribution:
    P: Tensor                 # [..., V]
    p_copy: Optional[Tensor]  # [...]; None when the copy route is disabled
    P_c: Optional[Tensor]
    P_g: Tensor


def context_vector(a: Tensor, e: Tensor) -> Tensor:
    """Attention-weighted sum of encoder states, ``a @ e``."""
    if a.shape[-1] != e.shape[-2]:
        raise ValueError(f"attention length {a.shape[-1]} does not match "
                         f"{e.shape[-2]} encoder states")
    if a.ndim == 1:
        return ag.reshape(ag.matmul(ag.reshape(a, (1, -1)), e), (e.shape[-1],))
    return ag.matmul(a, e)


def copy_gate(c: Tensor, d: Tensor, s: Tensor, gate: GateParams) -> Tensor:
    features = ag.concat([c, d, s], axis=-1)
    if features.shape[-1] != gate.W.shape[0]:
        raise ValueError(f"gate expects {gate.W.shape[0]} features, got {features.shape[-1]}")
    w = ag.reshape(gate.W, (-1, 1))
    if features.ndim == 1:
        z = ag.reshape(ag.matmul(ag.reshape(features, (1, -1)), w), ())
    else:
        z = ag.reshape(ag.matmul(features, w), features.shape[:-1])
    # sigmoid(37) already rounds to 1.0 in float64; bounding the logit keeps
    # p_copy strictly inside (0, 1)
    return ag.sigmoid(ag.clip(ag.add(z, gate.B), -GATE_LOGIT_BOUND, GATE_LOGIT_BOUND))


def copy_distribution(attn: Tensor, src_ids, vocab_size: int,
                      src_mask: Optional[np.ndarray] = None) -> Tensor:
    """Scatter attention mass over source positions onto their vocabulary ids.

    PAD positions (``src_mask`` true) contribute nothing. ``src_ids`` and
    ``src_mask`` are ``[..., S]`` and broadcast against ``attn`` after a
    target-step axis is inserted when ``attn`` has one more dimension.
    """
    ids = np.asarray(src_ids, dtype=np.int64)
    if attn.ndim == ids.ndim + 1:
        ids = ids[..., None, :]
    if src_mask is not None:
        mask = np.asarray(src_mask, dtype=bool)
        if attn.ndim == mask.ndim + 1:
            mask = mask[..., None, :]
        attn = ag.masked_fill(attn, np.broadcast_to(mask, attn.shape), 0.0)
    return ag.scatter_add(attn, ids, vocab_size)


def mix(p_copy, P_c: Tensor, P_g: Tensor) -> Tensor:
    p = ag.as_tensor(p_copy)
    p = ag.reshape(p, p.shape + (1,))
    return ag.add(ag.mul(p, P_c), ag.mul(ag.sub(1.0, p), P_g))


def pgn_loss(P: Tensor, gold, pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean of ``-log(P[gold] + 1e-9)`` over non-PAD positions."""
    gold = np.asarray(gold, dtype=np.int64)
    keep = np.ones(gold.shape, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, bool)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("pgn_loss: every target position is masked")
    picked = ag.gather(P, gold)
    nll = ag.mul(ag.log(ag.add(picked, LOG_EPS)), -1.0)
    return ag.mul(ag.sum_(ag.mul(nll, keep.astype(np.float64))), 1.0 / n)
