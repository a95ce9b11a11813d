"""Multi-head graph attention over road segments.

Attention logits between a segment and its out-neighbors are modulated by
the empirical transition probability of that move, so frequently driven
continuations attract more attention mass.  Neighborhoods include a
self-loop whose transition probability is fixed at 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .road_graph import RoadNetwork, TransitionStats


@dataclass(frozen=True)
class GatConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    activation: str = "elu"
    leaky_slope: float = 0.01
    self_loops: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ValueError("need at least one layer and one head")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")
        if self.activation not in ("elu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class GatHeadParams:
    w_src: Tensor  # projects the attending segment
    w_dst: Tensor  # projects the attended neighbor
    w_val: Tensor  # projects the message
    a_score: Tensor  # (d_head,) score vector
    a_prob: Tensor  # (d_head,) transition-probability direction


@dataclass
class GatLayerParams:
    heads: list[GatHeadParams]

    def named(self, prefix: str):
        for k, hp in enumerate(self.heads):
            yield f"{prefix}/head{k}/w_src", hp.w_src
            yield f"{prefix}/head{k}/w_dst", hp.w_dst
            yield f"{prefix}/head{k}/w_val", hp.w_val
            yield f"{prefix}/head{k}/a_score", hp.a_score
            yield f"{prefix}/head{k}/a_prob", hp.a_prob


@dataclass
class GatParams:
    input_proj: Tensor | None
    layers: list[GatLayerParams]

    def named(self, prefix: str = "gat"):
        if self.input_proj is not None:
            yield f"{prefix}/input_proj", self.input_proj
        for l, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}/layer{l}")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape)


def init_gat_params(rng: np.random.Generator, d_in: int, config: GatConfig) -> GatParams:
    proj = None
    if d_in != config.d_model:
        proj = ad.parameter(xavier_uniform(rng, d_in, config.d_model))
    layers = []
    dh = config.d_head
    for _ in range(config.layers):
        heads = []
        for _ in range(config.heads):
            heads.append(
                GatHeadParams(
                    w_src=ad.parameter(xavier_uniform(rng, config.d_model, dh)),
                    w_dst=ad.parameter(xavier_uniform(rng, config.d_model, dh)),
                    w_val=ad.parameter(xavier_uniform(rng, config.d_model, dh)),
                    a_score=ad.parameter(xavier_uniform(rng, dh, 1, shape=(dh,))),
                    a_prob=ad.parameter(xavier_uniform(rng, dh, 1, shape=(dh,))),
                )
            )
        layers.append(GatLayerParams(heads=heads))
    return GatParams(input_proj=proj, layers=layers)


@dataclass
class GatEdges:
    """Attention edge list: src attends dst with transition probability p."""

    src: np.ndarray
    dst: np.ndarray
    prob: np.ndarray
    n_nodes: int


def prepare_edges(network: RoadNetwork, stats: TransitionStats,
                  self_loops: bool = True) -> GatEdges:
    pairs = network.adjacency_index_pairs()
    src = list(pairs[:, 0]) if len(pairs) else []
    dst = list(pairs[:, 1]) if len(pairs) else []
    prob = [
        stats.prob(network.segments[u].segment_id, network.segments[v].segment_id)
        for u, v in zip(src, dst)
    ]
    if self_loops:
        for i in range(network.n_segments):
            src.append(i)
            dst.append(i)
            prob.append(1.0)
    else:
        present = set(src)
        missing = [i for i in range(network.n_segments) if i not in present]
        if missing:
            raise ValueError(
                f"segments without out-neighbors have empty attention sets: {missing[:5]}"
            )
    return GatEdges(
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        prob=np.asarray(prob, dtype=np.float64),
        n_nodes=network.n_segments,
    )


def edge_scores(h: Tensor, edges: GatEdges, head: GatHeadParams,
                leaky_slope: float = 0.01) -> Tensor:
    """Pre-softmax attention logits per edge for one head."""
    src_proj = ad.gather(ad.matmul(h, head.w_src), edges.src)
    dst_proj = ad.gather(ad.matmul(h, head.w_dst), edges.dst)
    prob_col = Tensor(edges.prob.astype(h.dtype).reshape(-1, 1))
    prob_term = ad.mul(prob_col, ad.reshape(head.a_prob, (1, -1)))
    pre = ad.leaky_relu(ad.add(ad.add(src_proj, dst_proj), prob_term), slope=leaky_slope)
    return ad.reshape(ad.matmul(pre, ad.reshape(head.a_score, (-1, 1))), (-1,))


def attention_weights(h: Tensor, edges: GatEdges, head: GatHeadParams,
                      leaky_slope: float = 0.01) -> Tensor:
    scores = edge_scores(h, edges, head, leaky_slope)
    return ad.segment_softmax(scores, edges.src, edges.n_nodes)


def gat_layer(h: Tensor, edges: GatEdges, params: GatLayerParams, config: GatConfig) -> Tensor:
    head_outputs = []
    for head in params.heads:
        alpha = attention_weights(h, edges, head, config.leaky_slope)
        values = ad.gather(ad.matmul(h, head.w_val), edges.dst)
        weighted = ad.mul(ad.reshape(alpha, (-1, 1)), values)
        head_outputs.append(ad.segment_sum(weighted, edges.src, edges.n_nodes))
    merged = ad.concat(head_outputs, axis=1)
    if config.activation == "elu":
        return ad.elu(merged)
    return ad.relu(merged)


def encode_segments(network: RoadNetwork, features, stats: TransitionStats,
                    params: GatParams, config: GatConfig,
                    edges: GatEdges | None = None) -> Tensor:
    """Run the full encoder: optional input projection then stacked layers."""
    if edges is None:
        edges = prepare_edges(network, stats, self_loops=config.self_loops)
    h = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float32))
    if params.input_proj is not None:
        h = ad.matmul(h, params.input_proj)
    elif h.data.shape[1] != config.d_model:
        raise ValueError(
            f"feature width {h.data.shape[1]} != d_model {config.d_model} and no input projection"
        )
    for layer in params.layers:
        h = gat_layer(h, edges, layer, config)
    return h
