"""Pre-layer-norm Transformer encoder-decoder built on :mod:`pgnlab.autograd`.

Parameters live in a flat ordered ``dict`` of named leaf tensors, which is
what the optimiser and the checkpoint format consume. Forward passes are
batched: token ids are ``[batch, length]`` integer arrays plus boolean
padding masks (``True`` marks a PAD position).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NEG_INF = -1e9


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    num_layers: int = 6
    num_heads: int = 4
    hidden_size: int = 512
    ffn_size: int = 2048
    max_len: int = 256
    dropout: float = 0.1
    pgn_enabled: bool = True
    # "averaged" over heads, or "single:<head index>"
    pgn_head_mode: str = "averaged"
    # decoder layer whose cross-attention feeds the copy route
    pgn_attn_layer: int = -1
    # diagnostics only: pin p_copy to a constant instead of the learned gate
    forced_p_copy: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "num_layers", "num_heads", "hidden_size", "ffn_size", "max_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} is not divisible by "
                              f"num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        head = self.pgn_head()
        if head is not None and not 0 <= head < self.num_heads:
            raise ConfigError(f"pgn head index {head} out of range for {self.num_heads} heads")
        if not -self.num_layers <= self.pgn_attn_layer < self.num_layers:
            raise ConfigError(f"pgn_attn_layer {self.pgn_attn_layer} out of range")
        if self.forced_p_copy is not None and not 0.0 <= self.forced_p_copy <= 1.0:
            raise ConfigError("forced_p_copy must lie in [0, 1]")

    def pgn_head(self) -> Optional[int]:
        """Head index used for the copy route, or ``None`` for the head average."""
        mode = self.pgn_head_mode
        if mode == "averaged":
            return None
        if mode.startswith("single:"):
            try:
                return int(mode.split(":", 1)[1])
            except ValueError:
                pass
        raise ConfigError(f"pgn_head_mode must be 'averaged' or 'single:<index>', got {mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def parameter_count(config: ModelConfig, include_pgn: Optional[bool] = None) -> int:
    """Closed-form parameter count.

    With V vocab, D hidden, F ffn, L layers::

        embeddings       2VD
        encoder layer    4(D^2 + D) + (2DF + F + D) + 4D
        decoder layer    8(D^2 + D) + (2DF + F + D) + 6D
        final norms      4D
        output proj      DV + V
        gate (PGN)       3D + 1
    """
    V, D, F, L = config.vocab_size, config.hidden_size, config.ffn_size, config.num_layers
    ffn = 2 * D * F + F + D
    enc = 4 * (D * D + D) + ffn + 4 * D
    dec = 8 * (D * D + D) + ffn + 6 * D
    total = 2 * V * D + L * (enc + dec) + 4 * D + D * V + V
    pgn = config.pgn_enabled if include_pgn is None else include_pgn
    return total + (3 * D + 1 if pgn else 0)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2 + dim % 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Xavier-uniform matrices, zero biases, unit layer-norm gains.

    The gate parameters are drawn from a separate stream, so the core weights
    are identical whether or not the copy route is enabled.
    """
    rng = np.random.default_rng(seed)
    V, D, F = config.vocab_size, config.hidden_size, config.ffn_size
    arrays: dict[str, np.ndarray] = {}

    def attn(prefix: str):
        for w in ("q", "k", "v", "o"):
            arrays[f"{prefix}.w{w}"] = _xavier(rng, D, D)
            arrays[f"{prefix}.b{w}"] = np.zeros(D)

    def ffn(prefix: str):
        arrays[f"{prefix}.w1"] = _xavier(rng, D, F)
        arrays[f"{prefix}.b1"] = np.zeros(F)
        arrays[f"{prefix}.w2"] = _xavier(rng, F, D)
        arrays[f"{prefix}.b2"] = np.zeros(D)

    def norm(prefix: str):
        arrays[f"{prefix}.gamma"] = np.ones(D)
        arrays[f"{prefix}.beta"] = np.zeros(D)

    arrays["enc.embed"] = _xavier(rng, V, D)
    arrays["dec.embed"] = _xavier(rng, V, D)
    for i in range(config.num_layers):
        p = f"enc.{i}"
        norm(f"{p}.ln1")
        attn(f"{p}.self")
        norm(f"{p}.ln2")
        ffn(f"{p}.ffn")
    norm("enc.ln_f")
    for i in range(config.num_layers):
        p = f"dec.{i}"
        norm(f"{p}.ln1")
        attn(f"{p}.self")
        norm(f"{p}.ln2")
        attn(f"{p}.cross")
        norm(f"{p}.ln3")
        ffn(f"{p}.ffn")
    norm("dec.ln_f")
    arrays["out.w"] = _xavier(rng, D, V)
    arrays["out.b"] = np.zeros(V)

    if config.pgn_enabled:
        gate_rng = np.random.default_rng([seed, 1])
        arrays["pgn.W"] = _xavier(gate_rng, 3 * D, 1, shape=(3 * D,))
        arrays["pgn.B"] = np.zeros(())
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


@dataclass
class EncoderStates:
    e: Tensor                 # [B, S, D]
    src_mask: np.ndarray      # [B, S], True on PAD
    truncated: bool = False


@dataclass
class DecoderStepOutput:
    d: Tensor                 # [B, T, D] final decoder states
    s: Tensor                 # [B, T, D] decoder input embeddings (with positions)
    gen_logits: Tensor        # [B, T, V]
    cross_attn: list[Tensor] = field(default_factory=list)  # per layer [B, H, T, S]


class Dropout:
    """Draws keep-masks from a generator; inactive when ``rng`` is ``None``."""

    def __init__(self, p: float, rng: Optional[np.random.Generator]):
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None or self.p == 0.0:
            return x
        mask = self.rng.random(x.shape) >= self.p
        return ag.dropout(x, mask, self.p)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


class Transformer:
    """Encoder-decoder producing decoder states, generate logits and cross-attention."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._pe = sinusoidal_positions(config.max_len + 1, config.hidden_size)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "Transformer":
        return cls(config, init_params(config, seed))

    # -- building blocks --------------------------------------------------------
    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return ag.layer_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray):
        p = self.params
        H = self.config.num_heads
        B, Tq, D = xq.shape
        Tk = xkv.shape[1]
        dk = D // H

        def heads(x, name, T):
            y = _linear(x, p[f"{prefix}.w{name}"], p[f"{prefix}.b{name}"])
            return ag.transpose(ag.reshape(y, (B, T, H, dk)), (0, 2, 1, 3))

        q, k, v = heads(xq, "q", Tq), heads(xkv, "k", Tk), heads(xkv, "v", Tk)
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        weights = ag.softmax(ag.masked_fill(scores, mask, NEG_INF), axis=-1)
        ctx = ag.matmul(weights, v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, Tq, D))
        return _linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"]), weights

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = ag.relu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _embed(self, table: str, ids: np.ndarray) -> Tensor:
        T = ids.shape[1]
        scale = math.sqrt(self.config.hidden_size)
        x = ag.mul(ag.embedding(self.params[table], ids), scale)
        return ag.add(x, self._pe[:T])

    # -- public passes -------------------------------------------------------------
    def encode(self, src_ids, src_mask: Optional[np.ndarray] = None,
               rng: Optional[np.random.Generator] = None) -> EncoderStates:
        """Run the encoder. ``rng`` enables dropout (training mode)."""
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        if src_mask is None:
            src_mask = src_ids == 0
        src_mask = np.atleast_2d(np.asarray(src_mask, dtype=bool))
        truncated = False
        if src_ids.shape[1] > self.config.max_len:
            warnings.warn(f"source length {src_ids.shape[1]} exceeds max_len "
                          f"{self.config.max_len}; truncating", stacklevel=2)
            src_ids = src_ids[:, : self.config.max_len]
            src_mask = src_mask[:, : self.config.max_len]
            truncated = True
        drop = Dropout(self.config.dropout, rng)
        x = drop(self._embed("enc.embed", src_ids))
        key_mask = src_mask[:, None, None, :]
        for i in range(self.config.num_layers):
            pre = f"enc.{i}"
            n1 = self._norm(x, f"{pre}.ln1")
            h, _ = self._attention(f"{pre}.self", n1, n1, key_mask)
            x = ag.add(x, drop(h))
            x = ag.add(x, drop(self._ffn(self._norm(x, f"{pre}.ln2"), f"{pre}.ffn")))
        return EncoderStates(self._norm(x, "enc.ln_f"), src_mask, truncated)

    def decode_forward(self, tgt_in, enc: EncoderStates, tgt_mask: Optional[np.ndarray] = None,
                       rng: Optional[np.random.Generator] = None) -> DecoderStepOutput:
        """Teacher-forced decoder pass over ``tgt_in`` (BOS-prefixed target ids)."""
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        if enc.e.shape[-1] != self.config.hidden_size:
            raise ConfigError(f"encoder hidden size {enc.e.shape[-1]} does not match decoder "
                              f"hidden size {self.config.hidden_size}")
        if tgt_in.shape[1] > self.config.max_len:
            raise ConfigError(f"target length {tgt_in.shape[1]} exceeds max_len "
                              f"{self.config.max_len}")
        if tgt_mask is None:
            tgt_mask = np.zeros(tgt_in.shape, dtype=bool)
        T = tgt_in.shape[1]
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)[None, None]
        self_mask = causal | np.asarray(tgt_mask, dtype=bool)[:, None, None, :]
        cross_mask = enc.src_mask[:, None, None, :]

        drop = Dropout(self.config.dropout, rng)
        s = self._embed("dec.embed", tgt_in)
        x = drop(s)
        attn_stack = []
        for i in range(self.config.num_layers):
            pre = f"dec.{i}"
            n1 = self._norm(x, f"{pre}.ln1")
            h, _ = self._attention(f"{pre}.self", n1, n1, self_mask)
            x = ag.add(x, drop(h))
            h, w = self._attention(f"{pre}.cross", self._norm(x, f"{pre}.ln2"), enc.e, cross_mask)
            attn_stack.append(w)
            x = ag.add(x, drop(h))
            x = ag.add(x, drop(self._ffn(self._norm(x, f"{pre}.ln3"), f"{pre}.ffn")))
        d = self._norm(x, "dec.ln_f")
        logits = _linear(d, self.params["out.w"], self.params["out.b"])
        return DecoderStepOutput(d=d, s=s, gen_logits=logits, cross_attn=attn_stack)
