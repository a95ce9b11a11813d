"""Autoregressive transformer decoder over token sequences.

Each layer runs masked multi-head self-attention followed by a
position-wise feed-forward block, both with residual connections and
post-norm layer normalization.  An output head maps final hidden states
to vocabulary logits.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_FILL, Tensor
from .trajectory_store import PAD, SOT


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ValueError("need at least one layer and one head")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class DecoderLayerParams:
    w_q: list[Tensor]  # per head (d_model, d_head)
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_out: Tensor  # (d_model, d_model)
    ffn_w1: Tensor  # (d_model, d_ff)
    ffn_b1: Tensor  # (d_ff,)
    ffn_w2: Tensor  # (d_ff, d_model)
    ffn_b2: Tensor  # (d_model,)
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self, prefix: str):
        for k in range(len(self.w_q)):
            yield f"{prefix}/head{k}/w_q", self.w_q[k]
            yield f"{prefix}/head{k}/w_k", self.w_k[k]
            yield f"{prefix}/head{k}/w_v", self.w_v[k]
        yield f"{prefix}/w_out", self.w_out
        yield f"{prefix}/ffn_w1", self.ffn_w1
        yield f"{prefix}/ffn_b1", self.ffn_b1
        yield f"{prefix}/ffn_w2", self.ffn_w2
        yield f"{prefix}/ffn_b2", self.ffn_b2
        yield f"{prefix}/ln1_gain", self.ln1_gain
        yield f"{prefix}/ln1_bias", self.ln1_bias
        yield f"{prefix}/ln2_gain", self.ln2_gain
        yield f"{prefix}/ln2_bias", self.ln2_bias


@dataclass
class OutputHead:
    weight: Tensor  # (d_model, vocab)
    bias: Tensor  # (vocab,)

    def named(self, prefix: str = "head"):
        yield f"{prefix}/weight", self.weight
        yield f"{prefix}/bias", self.bias


@dataclass
class DecoderParams:
    layers: list[DecoderLayerParams]
    head: OutputHead

    def named(self, prefix: str = "decoder"):
        for l, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}/layer{l}")
        yield from self.head.named(f"{prefix}/head")


def init_decoder_params(rng: np.random.Generator, config: DecoderConfig,
                        vocab_size: int) -> DecoderParams:
    from .gat_encoder import xavier_uniform

    d, dh, dff = config.d_model, config.d_head, config.d_ff
    layers = []
    for _ in range(config.layers):
        layers.append(
            DecoderLayerParams(
                w_q=[ad.parameter(xavier_uniform(rng, d, dh)) for _ in range(config.heads)],
                w_k=[ad.parameter(xavier_uniform(rng, d, dh)) for _ in range(config.heads)],
                w_v=[ad.parameter(xavier_uniform(rng, d, dh)) for _ in range(config.heads)],
                w_out=ad.parameter(xavier_uniform(rng, d, d)),
                ffn_w1=ad.parameter(xavier_uniform(rng, d, dff)),
                ffn_b1=ad.parameter(np.zeros(dff)),
                ffn_w2=ad.parameter(xavier_uniform(rng, dff, d)),
                ffn_b2=ad.parameter(np.zeros(d)),
                ln1_gain=ad.parameter(np.ones(d)),
                ln1_bias=ad.parameter(np.zeros(d)),
                ln2_gain=ad.parameter(np.ones(d)),
                ln2_bias=ad.parameter(np.zeros(d)),
            )
        )
    head = OutputHead(
        weight=ad.parameter(xavier_uniform(rng, d, vocab_size)),
        bias=ad.parameter(np.zeros(vocab_size)),
    )
    return DecoderParams(layers=layers, head=head)


def embed_inputs(tokens, token_rows: Tensor, positional: Tensor | None) -> Tensor:
    """Combine per-position token embeddings with positional rows."""
    n = len(tokens)
    if token_rows.data.shape[0] != n:
        raise ValueError("token embedding rows do not match the sequence length")
    if positional is None:
        return token_rows
    if positional.data.shape != token_rows.data.shape:
        raise ValueError("positional rows do not match the embedding shape")
    return ad.add(token_rows, positional)


@functools.lru_cache(maxsize=128)
def causal_mask(seq_len: int):
    """Boolean mask that is True strictly above the diagonal (future)."""
    return np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)


def decode(z: Tensor, params: DecoderParams, config: DecoderConfig,
           attn_bias: Tensor | None = None, rng: np.random.Generator | None = None,
           train: bool = False) -> Tensor:
    """Run the decoder stack; returns (seq_len, vocab) logits."""
    seq_len = z.data.shape[0]
    mask = causal_mask(seq_len)
    scale = 1.0 / math.sqrt(config.d_head)
    x = z
    for layer in params.layers:
        head_outs = []
        for k in range(config.heads):
            q = ad.matmul(x, layer.w_q[k])
            key = ad.matmul(x, layer.w_k[k])
            val = ad.matmul(x, layer.w_v[k])
            scores = ad.mul(ad.matmul(q, ad.transpose(key)), scale)
            if attn_bias is not None:
                scores = ad.add(scores, attn_bias)
            scores = ad.masked_fill(scores, mask, NEG_FILL)
            attn = ad.softmax(scores, axis=-1)
            head_outs.append(ad.matmul(attn, val))
        merged = ad.matmul(ad.concat(head_outs, axis=1), layer.w_out)
        if train and config.dropout > 0.0:
            merged = ad.dropout(merged, config.dropout, rng, train=True)
        x = ad.layer_norm(ad.add(x, merged), layer.ln1_gain, layer.ln1_bias)
        ff = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(x, layer.ffn_w1),
                                             ad.reshape(layer.ffn_b1, (1, -1)))),
                              layer.ffn_w2),
                    ad.reshape(layer.ffn_b2, (1, -1)))
        if train and config.dropout > 0.0:
            ff = ad.dropout(ff, config.dropout, rng, train=True)
        x = ad.layer_norm(ad.add(x, ff), layer.ln2_gain, layer.ln2_bias)
    return ad.add(ad.matmul(x, params.head.weight), ad.reshape(params.head.bias, (1, -1)))


def masked_logit_row(logits, position: int, masked_tokens=(PAD, SOT)) -> np.ndarray:
    row = (logits.data if isinstance(logits, Tensor) else np.asarray(logits))[position]
    row = row.astype(np.float64)
    row[list(masked_tokens)] = -np.inf
    return row


def next_token_dist(logits, position: int, masked_tokens=(PAD, SOT)) -> np.ndarray:
    """Probability distribution at one position with masked tokens at exactly 0."""
    row = masked_logit_row(logits, position, masked_tokens)
    shifted = row - row.max()
    e = np.exp(shifted)
    return e / e.sum()
