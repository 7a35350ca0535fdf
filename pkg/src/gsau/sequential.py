"""Causal self-attention sequence encoder (SASRec layout, post-LN blocks)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class SeqEncoderConfig:
    n_layers: int = 2
    n_heads: int = 2
    hidden_dim: int = 64
    ffn_dim: int | None = None  # defaults to 4 * hidden_dim
    max_seq_len: int = 50
    dropout: float = 0.2
    activation: str = "gelu"

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.hidden_dim


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_seq_params(config: SeqEncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    d, f = config.hidden_dim, config.ffn

    def w(*shape):
        return Tensor(truncated_normal(rng, shape, dtype=dtype), requires_grad=True)

    def const(value, n):
        return Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

    params = {"seq/pos": w(config.max_seq_len, d)}
    for n in range(config.n_layers):
        p = f"seq/block{n}/"
        for name in ("q", "k", "v", "o"):
            params[p + f"w_{name}"] = w(d, d)
            if name != "k":  # a key bias shifts every logit of a softmax row equally: no effect, zero gradient
                params[p + f"b_{name}"] = const(0.0, d)
        params[p + "ln1_g"] = const(1.0, d)
        params[p + "ln1_b"] = const(0.0, d)
        params[p + "w_ff1"] = w(d, f)
        params[p + "b_ff1"] = const(0.0, f)
        params[p + "w_ff2"] = w(f, d)
        params[p + "b_ff2"] = const(0.0, d)
        params[p + "ln2_g"] = const(1.0, d)
        params[p + "ln2_b"] = const(0.0, d)
    return params


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def _heads(x2d: Tensor, B: int, T: int, H: int) -> Tensor:
    dh = x2d.shape[1] // H
    return ad.transpose(ad.reshape(x2d, (B, T, H, dh)), (0, 2, 1, 3))


def encode(
    params: dict[str, Tensor],
    item_table: Tensor,
    prefixes: np.ndarray,
    mask: np.ndarray,
    config: SeqEncoderConfig,
    rng: np.random.Generator | None = None,
    all_positions: bool = False,
) -> Tensor:
    """Encode left-padded prefixes into their final-position hidden state [B, d].

    ``rng`` enables dropout (training mode); pass None for deterministic
    inference. With ``all_positions`` the full [B, T, d] output is returned.
    Positions are counted from the right edge, so extra left padding does not
    change the representation.
    """
    B, T = prefixes.shape
    d, H = item_table.shape[1], config.n_heads
    if T > config.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {config.max_seq_len}")
    if not mask[:, -1].all():
        raise ValueError("every prefix needs at least one item in the final position")
    drop = config.dropout if rng is not None else 0.0

    pad = ad.constant(np.broadcast_to(mask[..., None], (B, T, d)), like=item_table)
    pos_ids = np.broadcast_to(np.arange(config.max_seq_len - T, config.max_seq_len), (B, T))
    x = ad.add(ad.embedding_lookup(item_table, prefixes), ad.embedding_lookup(params["seq/pos"], pos_ids))
    x = ad.mul(ad.dropout(x, drop, rng), pad)

    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal[None, :, :] & mask[:, None, :]
    blocked = np.broadcast_to(~allowed[:, None, :, :], (B, H, T, T))
    inv_sqrt = 1.0 / math.sqrt(d // H)
    act = ad.gelu if config.activation == "gelu" else ad.relu

    for n in range(config.n_layers):
        p = f"seq/block{n}/"
        h = ad.reshape(x, (B * T, d))
        q = _heads(_linear(h, params[p + "w_q"], params[p + "b_q"]), B, T, H)
        k = _heads(ad.matmul(h, params[p + "w_k"]), B, T, H)
        v = _heads(_linear(h, params[p + "w_v"], params[p + "b_v"]), B, T, H)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt)
        attn = ad.softmax(ad.masked_fill(scores, blocked, MASK_VALUE))
        attn = ad.dropout(attn, drop, rng)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B * T, d))
        out = ad.dropout(_linear(ctx, params[p + "w_o"], params[p + "b_o"]), drop, rng)
        h = ad.layer_norm(ad.add(h, out), params[p + "ln1_g"], params[p + "ln1_b"])
        ff = _linear(act(_linear(h, params[p + "w_ff1"], params[p + "b_ff1"])), params[p + "w_ff2"], params[p + "b_ff2"])
        h = ad.layer_norm(ad.add(h, ad.dropout(ff, drop, rng)), params[p + "ln2_g"], params[p + "ln2_b"])
        x = ad.mul(ad.reshape(h, (B, T, d)), pad)

    if all_positions:
        return x
    last = np.arange(B) * T + (T - 1)
    return ad.embedding_lookup(ad.reshape(x, (B * T, d)), last)


def score_all_items(seq_reps: Tensor, item_table: Tensor) -> Tensor:
    """logits[b, i] = <seq_reps[b], item_table[i]>."""
    return ad.matmul(seq_reps, ad.transpose(item_table))
