"""Translation model: Transformer core plus optional pointer-generator head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bpe import BOS, EOS, PAD
from .pgn import GateParams, MixedDistribution, context_vector, copy_distribution, copy_gate, \
    mix, pgn_loss
from .transformer import DecoderStepOutput, EncoderStates, ModelConfig, Transformer, init_params


@dataclass
class Batch:
    src: np.ndarray        # [B, S] source ids followed by EOS
    src_mask: np.ndarray   # [B, S] True on PAD
    tgt_in: np.ndarray     # [B, T] BOS + target ids
    tgt_out: np.ndarray    # [B, T] target ids + EOS
    tgt_mask: np.ndarray   # [B, T] True on PAD

    def __len__(self) -> int:
        return self.src.shape[0]


def pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max(len(s) for s in seqs))
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, out == PAD


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], max_len: int) -> Batch:
    """Build a padded batch, truncating each side to fit ``max_len`` with its special token."""
    srcs = [list(s)[: max_len - 1] + [EOS] for s, _ in pairs]
    tgts = [list(t)[: max_len - 1] for _, t in pairs]
    src, src_mask = pad_ids(srcs)
    tgt_in, _ = pad_ids([[BOS] + t for t in tgts])
    tgt_out, _ = pad_ids([t + [EOS] for t in tgts])
    lengths = np.array([len(t) + 1 for t in tgts])
    tgt_mask = np.arange(tgt_in.shape[1])[None, :] >= lengths[:, None]
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask)


@dataclass
class AttentionTrace:
    """Cross-attention rows and gate values for one decoded (or forced) sentence."""

    source_ids: list[int]
    target_ids: list[int]
    attention: list[list[float]]           # [target, source]
    p_copy: Optional[list[float]] = None   # None for a model without copy route
    step: int = 0
    source_tokens: list[str] = field(default_factory=list)
    target_tokens: list[str] = field(default_factory=list)

    def validate(self) -> None:
        rows = len(self.attention)
        if rows != len(self.target_ids):
            raise ValueError(f"trace has {rows} attention rows for {len(self.target_ids)} "
                             "target tokens")
        for r, row in enumerate(self.attention):
            if len(row) != len(self.source_ids):
                raise ValueError(f"attention row {r} has {len(row)} entries for "
                                 f"{len(self.source_ids)} source tokens")
            if abs(sum(row) - 1.0) > 1e-6:
                raise ValueError(f"attention row {r} sums to {sum(row)}")
        if self.p_copy is not None and len(self.p_copy) != rows:
            raise ValueError("p_copy length does not match target tokens")
        for toks, ids, side in ((self.source_tokens, self.source_ids, "source"),
                                (self.target_tokens, self.target_ids, "target")):
            if toks and len(toks) != len(ids):
                raise ValueError(f"{side} token labels do not match {side} ids")

    def to_dict(self) -> dict:
        return {
            "source_ids": self.source_ids, "target_ids": self.target_ids,
            "source_tokens": self.source_tokens, "target_tokens": self.target_tokens,
            "attention": self.attention, "p_copy": self.p_copy, "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionTrace":
        return cls(source_ids=list(d["source_ids"]), target_ids=list(d["target_ids"]),
                   attention=[list(r) for r in d["attention"]], p_copy=d.get("p_copy"),
                   step=int(d.get("step", 0)), source_tokens=list(d.get("source_tokens", [])),
                   target_tokens=list(d.get("target_tokens", [])))


class Seq2Seq:
    """Encoder-decoder whose output is either the generate distribution or the PGN mixture."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.core = Transformer(config, params)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "Seq2Seq":
        return cls(config, init_params(config, seed))

    @property
    def gate(self) -> Optional[GateParams]:
        if not self.config.pgn_enabled:
            return None
        return GateParams(self.params["pgn.W"], self.params["pgn.B"])

    def copy_attention(self, out: DecoderStepOutput) -> Tensor:
        """Head-reduced cross-attention ``[B, T, S]`` from the configured layer."""
        w = out.cross_attn[self.config.pgn_attn_layer]
        head = self.config.pgn_head()
        if head is None:
            return ag.mean(w, axis=1)
        return ag.getitem(w, (slice(None), head))

    def distribution(self, src, enc: EncoderStates, out: DecoderStepOutput) -> MixedDistribution:
        P_g = ag.softmax(out.gen_logits, axis=-1)
        if not self.config.pgn_enabled:
            return MixedDistribution(P=P_g, p_copy=None, P_c=None, P_g=P_g)
        a = self.copy_attention(out)
        P_c = copy_distribution(a, src, self.config.vocab_size, enc.src_mask)
        if self.config.forced_p_copy is not None:
            p = Tensor(np.full(a.shape[:-1], float(self.config.forced_p_copy)))
        else:
            c = context_vector(a, enc.e)
            p = copy_gate(c, out.d, out.s, self.gate)
        return MixedDistribution(P=mix(p, P_c, P_g), p_copy=p, P_c=P_c, P_g=P_g)

    def forward(self, batch: Batch, rng: Optional[np.random.Generator] = None):
        enc = self.core.encode(batch.src, batch.src_mask, rng=rng)
        out = self.core.decode_forward(batch.tgt_in, enc, batch.tgt_mask, rng=rng)
        return self.distribution(batch.src, enc, out), out, enc

    def loss(self, batch: Batch, rng: Optional[np.random.Generator] = None) -> Tensor:
        mixed, _, _ = self.forward(batch, rng)
        return pgn_loss(mixed.P, batch.tgt_out, batch.tgt_mask)

    def greedy_decode(self, sources: Sequence[Sequence[int]], max_out_len: Optional[int] = None,
                      batch_size: int = 64) -> list[tuple[list[int], AttentionTrace]]:
        """Argmax decoding until EOS or ``max_out_len`` tokens; returns ids and traces."""
        results: list[tuple[list[int], AttentionTrace]] = []
        with ag.no_grad():
            for start in range(0, len(sources), batch_size):
                chunk = sources[start:start + batch_size]
                results.extend(self._decode_chunk(chunk, max_out_len))
        return results

    def _decode_chunk(self, chunk, max_out_len):
        cfg = self.config
        srcs = [list(s)[: cfg.max_len - 1] + [EOS] for s in chunk]
        src, src_mask = pad_ids(srcs)
        enc = self.core.encode(src, src_mask)
        limit = max_out_len if max_out_len is not None else 2 * src.shape[1] + 10
        limit = min(limit, cfg.max_len - 1)
        n = len(srcs)
        prefix = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(n)]
        rows: list[list[np.ndarray]] = [[] for _ in range(n)]
        gates: list[list[float]] = [[] for _ in range(n)]
        for _ in range(limit):
            out = self.core.decode_forward(prefix, enc)
            mixed = self.distribution(src, enc, out)
            P = mixed.P.data[:, -1]
            nxt = P.argmax(axis=-1)
            attn = self.copy_attention(out).data[:, -1]
            for i in range(n):
                if done[i]:
                    continue
                if nxt[i] == EOS:
                    done[i] = True
                    continue
                outputs[i].append(int(nxt[i]))
                rows[i].append(attn[i, : len(srcs[i])])
                if mixed.p_copy is not None:
                    gates[i].append(float(mixed.p_copy.data[i, -1]))
            if done.all():
                break
            prefix = np.concatenate([prefix, np.where(done, PAD, nxt)[:, None]], axis=1)
        results = []
        for i in range(n):
            trace = AttentionTrace(
                source_ids=srcs[i], target_ids=outputs[i],
                attention=[r.tolist() for r in rows[i]],
                p_copy=gates[i] if cfg.pgn_enabled else None)
            results.append((outputs[i], trace))
        return results

    def trace_pair(self, src_ids: Sequence[int], tgt_ids: Sequence[int], step: int = 0) -> AttentionTrace:
        """Teacher-forced trace for a gold pair (used for training snapshots)."""
        batch = make_batch([(src_ids, tgt_ids)], self.config.max_len)
        with ag.no_grad():
            mixed, out, _ = self.forward(batch)
        T = batch.tgt_out.shape[1]
        attn = self.copy_attention(out).data[0]
        p = mixed.p_copy.data[0].tolist() if mixed.p_copy is not None else None
        return AttentionTrace(source_ids=batch.src[0].tolist(), target_ids=batch.tgt_out[0].tolist(),
                              attention=attn[:T].tolist(), p_copy=p, step=step)


def plain_loss(core: Transformer, batch: Batch, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Standard encoder-decoder objective: NLL of the softmaxed generate logits."""
    enc = core.encode(batch.src, batch.src_mask, rng=rng)
    out = core.decode_forward(batch.tgt_in, enc, batch.tgt_mask, rng=rng)
    return pgn_loss(ag.softmax(out.gen_logits, axis=-1), batch.tgt_out, batch.tgt_mask)
