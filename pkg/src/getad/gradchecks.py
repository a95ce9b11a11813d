"""Finite-difference verification battery for the autodiff engine.

Covers every primitive plus the composed model blocks (graph attention
layer, positional encoding, decoder block).  Inputs are sampled away from
activation kinks so central differences are informative.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradcheckReport, Tensor, gradcheck
from .gat_encoder import (GatConfig, GatEdges, GatHeadParams, GatLayerParams,
                          GatParams, gat_layer)
from .graph_pos_enc import GpeParams, PositionEntries, RpeParams, gpe, rpe_bias
from .traj_decoder import DecoderConfig, DecoderLayerParams, DecoderParams, OutputHead, decode
from .trajectory_store import EOT, SOT


def _kink_safe(rng: np.random.Generator, shape, low: float = 0.2, high: float = 1.5):
    """Values bounded away from zero so eps-perturbations cannot cross kinks."""
    magnitude = rng.uniform(low, high, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return magnitude * sign


def _scalarize(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Project to a scalar with a fixed random weighting, exercising all outputs."""
    weights = Tensor(rng.normal(size=t.data.shape))
    return ad.sum_(ad.mul(t, weights))


def primitive_checks(eps: float = 1e-3, tol: float = 1e-4) -> list[GradcheckReport]:
    rng = np.random.default_rng(20240817)
    reports: list[GradcheckReport] = []

    def run(name, fn, *inputs):
        reports.append(gradcheck(fn, list(inputs), eps=eps, tol=tol, name=name))

    a34 = _kink_safe(rng, (3, 4))
    b42 = _kink_safe(rng, (4, 2))
    run("matmul", lambda x, y: ad.sum_(ad.matmul(x, y)), a34, b42)
    run("transpose", lambda x: _scalarize(ad.transpose(x), np.random.default_rng(1)), a34)
    run("reshape", lambda x: _scalarize(ad.reshape(x, (4, 3)), np.random.default_rng(2)), a34)
    run("add_broadcast", lambda x, y: ad.sum_(ad.add(x, y)), a34, _kink_safe(rng, (1, 4)))
    run("sub", lambda x, y: ad.sum_(ad.sub(x, y)), a34, _kink_safe(rng, (3, 4)))
    run("mul_broadcast", lambda x, y: ad.sum_(ad.mul(x, y)), a34, _kink_safe(rng, (3, 1)))
    run("neg", lambda x: ad.sum_(ad.neg(x)), a34)
    run("concat", lambda x, y: _scalarize(ad.concat([x, y], axis=1), np.random.default_rng(3)),
        a34, _kink_safe(rng, (3, 2)))
    run("add_n", lambda x, y, z: ad.sum_(ad.add_n([x, y, z])),
        a34, _kink_safe(rng, (3, 4)), _kink_safe(rng, (3, 4)))
    run("narrow", lambda x: _scalarize(ad.narrow(x, (slice(1, 3), slice(0, 2))),
                                       np.random.default_rng(4)), a34)
    idx = np.array([0, 2, 2, 4, 1])
    run("gather", lambda t: _scalarize(ad.gather(t, idx), np.random.default_rng(5)),
        _kink_safe(rng, (5, 3)))
    ridx = np.array([1, 3, 0])
    run("gather_rows", lambda t: _scalarize(ad.gather_rows(t, ridx), np.random.default_rng(6)),
        a34)
    run("leaky_relu", lambda x: _scalarize(ad.leaky_relu(x), np.random.default_rng(7)), a34)
    run("relu", lambda x: _scalarize(ad.relu(x), np.random.default_rng(8)), a34)
    run("elu", lambda x: _scalarize(ad.elu(x), np.random.default_rng(9)), a34)
    run("sigmoid", lambda x: _scalarize(ad.sigmoid(x), np.random.default_rng(10)), a34)
    run("softmax", lambda x: _scalarize(ad.softmax(x), np.random.default_rng(11)), a34)
    run("log_softmax", lambda x: _scalarize(ad.log_softmax(x), np.random.default_rng(12)), a34)
    run("layer_norm",
        lambda x, g, b: _scalarize(ad.layer_norm(x, g, b), np.random.default_rng(13)),
        a34, _kink_safe(rng, (4,)), _kink_safe(rng, (4,)))
    mask = np.zeros((3, 4), dtype=bool)
    mask[0, 1] = mask[2, 3] = True
    run("masked_fill", lambda x: _scalarize(ad.masked_fill(x, mask, -5.0),
                                            np.random.default_rng(14)), a34)

    def dropout_fn(x):
        out = ad.dropout(x, 0.4, np.random.default_rng(99), train=True)
        return _scalarize(out, np.random.default_rng(15))

    run("dropout", dropout_fn, a34)
    run("sum_axis", lambda x: _scalarize(ad.sum_(x, axis=0), np.random.default_rng(16)), a34)
    run("mean", lambda x: _scalarize(ad.mean_(x, axis=1), np.random.default_rng(17)), a34)
    run("inner_product",
        lambda x, y: _scalarize(ad.inner_product(x, y), np.random.default_rng(18)),
        a34, _kink_safe(rng, (3, 4)))
    targets = np.array([0, 3, 1])
    run("cross_entropy", lambda x: ad.cross_entropy(x, targets), a34)
    labels = np.array([1.0, 0.0, 1.0, 1.0])
    run("bce_with_logits",
        lambda s: ad.sum_(ad.bce_with_logits(s, labels)), _kink_safe(rng, (4,)))
    seg_ids = np.array([0, 0, 1, 2, 2, 2])
    run("segment_sum",
        lambda v: _scalarize(ad.segment_sum(v, seg_ids, 3), np.random.default_rng(19)),
        _kink_safe(rng, (6, 2)))
    run("segment_softmax",
        lambda s: _scalarize(ad.segment_softmax(s, seg_ids, 3), np.random.default_rng(20)),
        _kink_safe(rng, (6,)))
    return reports


def composite_checks(eps: float = 1e-3, tol: float = 1e-4) -> list[GradcheckReport]:
    reports: list[GradcheckReport] = []
    rng = np.random.default_rng(20240818)

    # --- graph attention layer on a 5-node toy graph -----------------------
    config = GatConfig(layers=1, heads=2, d_model=8, activation="elu")
    edges = GatEdges(
        src=np.array([0, 0, 1, 2, 3, 0, 1, 2, 3, 4]),
        dst=np.array([1, 2, 3, 4, 0, 0, 1, 2, 3, 4]),
        prob=np.concatenate([rng.uniform(0.2, 0.8, size=5), np.ones(5)]),
        n_nodes=5,
    )
    feats = _kink_safe(rng, (5, 6))
    proj0 = _kink_safe(rng, (6, 8), 0.05, 0.4)
    head_shapes = [(8, 4), (8, 4), (8, 4), (4,), (4,)]
    head_inits = [[_kink_safe(rng, s, 0.05, 0.4) for s in head_shapes] for _ in range(2)]

    def gat_fn(f, proj, *flat):
        heads = []
        for k in range(2):
            w_src, w_dst, w_val, a_score, a_prob = flat[k * 5 : (k + 1) * 5]
            heads.append(GatHeadParams(w_src=w_src, w_dst=w_dst, w_val=w_val,
                                       a_score=a_score, a_prob=a_prob))
        h = ad.matmul(f, proj)
        out = gat_layer(h, edges, GatLayerParams(heads=heads), config)
        return _scalarize(out, np.random.default_rng(30))

    gat_inputs = [feats, proj0] + [arr for head in head_inits for arr in head]
    reports.append(gradcheck(gat_fn, gat_inputs, eps=eps, tol=tol, name="gat_layer"))

    # --- graph positional encoding -----------------------------------------
    d_max, d_model = 4, 8
    entries = PositionEntries([None, 0, 1, 2, None], [SOT, 3, 4, 5, EOT])
    distances = np.array(
        [
            [-1, -1, -1, -1, -1],
            [-1, 0, 1, 2, -1],
            [-1, 4, 0, 1, -1],
            [-1, 4, 4, 0, -1],
            [-1, -1, -1, -1, -1],
        ],
        dtype=np.int16,
    )

    def gpe_fn(e_dist, e_sot, e_eot, e_pad):
        params = GpeParams(e_dist=e_dist, e_sot=e_sot, e_eot=e_eot, e_pad=e_pad,
                           d_max=d_max, horizon="causal", aggregation="sum")
        return _scalarize(gpe(entries, distances, params), np.random.default_rng(31))

    gpe_inputs = [_kink_safe(rng, (d_max + 1, d_model), 0.05, 0.5),
                  _kink_safe(rng, (d_model,), 0.05, 0.5),
                  _kink_safe(rng, (d_model,), 0.05, 0.5),
                  _kink_safe(rng, (d_model,), 0.05, 0.5)]
    reports.append(gradcheck(gpe_fn, gpe_inputs, eps=eps, tol=tol, name="gpe"))

    # --- decoder block with relative-position bias --------------------------
    dconfig = DecoderConfig(layers=1, heads=2, d_model=8, d_ff=12)
    seq_len, vocab = 5, 9
    clip = 3

    def decoder_fn(z, table, *flat):
        it = iter(flat)
        layer = DecoderLayerParams(
            w_q=[next(it), next(it)], w_k=[next(it), next(it)], w_v=[next(it), next(it)],
            w_out=next(it), ffn_w1=next(it), ffn_b1=next(it), ffn_w2=next(it),
            ffn_b2=next(it), ln1_gain=next(it), ln1_bias=next(it),
            ln2_gain=next(it), ln2_bias=next(it),
        )
        head = OutputHead(weight=next(it), bias=next(it))
        params = DecoderParams(layers=[layer], head=head)
        bias = rpe_bias(seq_len, RpeParams(table=table, clip=clip))
        logits = decode(z, params, dconfig, attn_bias=bias)
        return _scalarize(logits, np.random.default_rng(32))

    small = lambda s: _kink_safe(rng, s, 0.05, 0.4)
    decoder_inputs = [
        _kink_safe(rng, (seq_len, 8), 0.1, 0.8),
        small((2 * clip + 1,)),
        small((8, 4)), small((8, 4)),  # w_q
        small((8, 4)), small((8, 4)),  # w_k
        small((8, 4)), small((8, 4)),  # w_v
        small((8, 8)),
        small((8, 12)), small((12,)), small((12, 8)), small((8,)),
        np.ones(8) + small((8,)) * 0.1, small((8,)),
        np.ones(8) + small((8,)) * 0.1, small((8,)),
        small((8, vocab)), small((vocab,)),
    ]
    reports.append(gradcheck(decoder_fn, decoder_inputs, eps=eps, tol=tol,
                             name="decoder_block"))
    return reports


def run_battery(eps: float = 1e-3, tol: float = 1e-4) -> list[GradcheckReport]:
    return primitive_checks(eps, tol) + composite_checks(eps, tol)
