"""Positional encodings: truncated hop distances, GPE rows, RPE bias."""

from __future__ import annotations

import numpy as np
import pytest

import getad.autodiff as ad
from getad.graph_pos_enc import (
    SENTINEL,
    GpeParams,
    PositionEntries,
    RpeParams,
    entries_for_tokens,
    gpe,
    init_gpe_params,
    init_rpe_params,
    pairwise_hops,
    rpe_bias,
)
from getad.road_graph import HopIndex
from getad.trajectory_store import EOT, PAD, SOT, Vocab


D_MAX = 4


def gpe_params(d_model=6, seed=0, **kwargs) -> GpeParams:
    return init_gpe_params(np.random.default_rng(seed), d_model, d_max=D_MAX, **kwargs)


# ---------------------------------------------------------------------------
# pairwise hop matrices
# ---------------------------------------------------------------------------


def test_pairwise_hops_on_one_way_chain(chain4):
    mat = pairwise_hops([0, 1, 2], chain4, d_max=D_MAX)
    # backward pairs are unreachable on a one-way chain -> saturate at d_max
    np.testing.assert_array_equal(mat, [[0, 1, 2], [D_MAX, 0, 1], [D_MAX, D_MAX, 0]])


def test_pairwise_hops_truncation(chain4):
    mat = pairwise_hops([0, 3], chain4, d_max=2)
    assert mat[0, 1] == 2  # true distance 3, beyond the horizon -> d_max
    assert mat[1, 0] == 2  # unreachable -> d_max
    np.testing.assert_array_equal(np.diag(mat), [0, 0])


def test_pairwise_hops_sentinel_rows(chain4):
    entries = PositionEntries([None, 0, 1, None], [SOT, 3, 4, EOT])
    mat = pairwise_hops(entries, chain4, d_max=D_MAX)
    assert np.all(mat[0] == SENTINEL) and np.all(mat[:, 0] == SENTINEL)
    assert np.all(mat[3] == SENTINEL) and np.all(mat[:, 3] == SENTINEL)
    np.testing.assert_array_equal(mat[1:3, 1:3], [[0, 1], [D_MAX, 0]])


def test_pairwise_hops_index_reuse(chain4):
    index = chain4.hop_index(D_MAX)
    mat = pairwise_hops([0, 1], index, d_max=D_MAX)
    np.testing.assert_array_equal(mat, [[0, 1], [D_MAX, 0]])
    with pytest.raises(ValueError, match="different d_max"):
        pairwise_hops([0, 1], index, d_max=D_MAX + 1)
    with pytest.raises(TypeError):
        pairwise_hops([0, 1], object(), d_max=D_MAX)


# ---------------------------------------------------------------------------
# GPE rows
# ---------------------------------------------------------------------------


def test_gpe_param_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="horizon"):
        init_gpe_params(rng, 4, horizon="sideways")
    with pytest.raises(ValueError, match="aggregation"):
        init_gpe_params(rng, 4, aggregation="max")
    with pytest.raises(ValueError, match="d_max \\+ 1 rows"):
        GpeParams(
            e_dist=ad.parameter(np.zeros((3, 4))),
            e_sot=ad.parameter(np.zeros(4)),
            e_eot=ad.parameter(np.zeros(4)),
            e_pad=ad.parameter(np.zeros(4)),
            d_max=8,
        )


def test_gpe_single_segment_is_zero_distance_row(chain4):
    params = gpe_params()
    mat = pairwise_hops([2], chain4, d_max=D_MAX)
    out = gpe([2], mat, params)
    np.testing.assert_allclose(out.data, params.e_dist.data[0][None, :], rtol=1e-6)


def test_gpe_special_positions_use_dedicated_rows(chain4):
    params = gpe_params()
    entries = PositionEntries([None, 0, None, None], [SOT, 3, EOT, PAD])
    mat = pairwise_hops(entries, chain4, d_max=D_MAX)
    out = gpe(entries, mat, params).data
    np.testing.assert_allclose(out[0], params.e_sot.data, rtol=1e-6)
    np.testing.assert_allclose(out[2], params.e_eot.data, rtol=1e-6)
    np.testing.assert_allclose(out[3], params.e_pad.data, rtol=1e-6)
    np.testing.assert_allclose(out[1], params.e_dist.data[0], rtol=1e-6)


def test_gpe_causal_sum_matches_hand_oracle(chain4):
    params = gpe_params()
    entries = PositionEntries([None, 0, 1, 2, None], [SOT, 3, 4, 5, EOT])
    mat = pairwise_hops(entries, chain4, d_max=D_MAX)
    out = gpe(entries, mat, params).data
    e = params.e_dist.data
    # position p sums embeddings of distances to itself and earlier segments
    np.testing.assert_allclose(out[1], e[0], rtol=1e-6)
    np.testing.assert_allclose(out[2], e[mat[2, 1]] + e[0], rtol=1e-6)
    np.testing.assert_allclose(out[3], e[mat[3, 1]] + e[mat[3, 2]] + e[0], rtol=1e-6)


def test_gpe_full_horizon_includes_later_segments(chain4):
    params = gpe_params(horizon="full")
    entries = PositionEntries([0, 1, 2], [3, 4, 5])
    mat = pairwise_hops(entries, chain4, d_max=D_MAX)
    out = gpe(entries, mat, params).data
    e = params.e_dist.data
    np.testing.assert_allclose(out[0], e[0] + e[mat[0, 1]] + e[mat[0, 2]], rtol=1e-6)
    np.testing.assert_allclose(out[2], e[mat[2, 0]] + e[mat[2, 1]] + e[0], rtol=1e-6)


def test_gpe_mean_aggregation_divides_by_count(chain4):
    summed = gpe_params(aggregation="sum")
    meaned = GpeParams(
        e_dist=ad.parameter(summed.e_dist.data.copy()),
        e_sot=ad.parameter(summed.e_sot.data.copy()),
        e_eot=ad.parameter(summed.e_eot.data.copy()),
        e_pad=ad.parameter(summed.e_pad.data.copy()),
        d_max=D_MAX,
        aggregation="mean",
    )
    entries = PositionEntries([0, 1, 2], [3, 4, 5])
    mat = pairwise_hops(entries, chain4, d_max=D_MAX)
    s = gpe(entries, mat, summed).data
    m = gpe(entries, mat, meaned).data
    for p in range(3):
        np.testing.assert_allclose(m[p], s[p] / (p + 1), rtol=1e-6)


def test_gpe_causal_rows_stable_under_extension(chain4):
    # appending future positions must not change earlier causal rows
    params = gpe_params()
    short = PositionEntries([None, 0, 1], [SOT, 3, 4])
    longer = PositionEntries([None, 0, 1, 2, None], [SOT, 3, 4, 5, EOT])
    out_short = gpe(short, pairwise_hops(short, chain4, D_MAX), params).data
    out_long = gpe(longer, pairwise_hops(longer, chain4, D_MAX), params).data
    np.testing.assert_allclose(out_long[:3], out_short, rtol=1e-6)


def test_gpe_rejects_bad_inputs(chain4):
    params = gpe_params()
    entries = PositionEntries([0, 1], [3, 4])
    with pytest.raises(ValueError, match="distance matrix"):
        gpe(entries, np.zeros((3, 3), dtype=np.int16), params)
    plain = [None, 0]
    mat = pairwise_hops(PositionEntries(plain, [SOT, 3]), chain4, D_MAX)
    with pytest.raises(ValueError, match="PositionEntries"):
        gpe(plain, mat, params)


def test_gpe_gradient_hits_only_used_distance_rows(chain4):
    params = gpe_params()
    entries = PositionEntries([0, 1], [3, 4])
    mat = pairwise_hops(entries, chain4, D_MAX)
    # causal distances: self-pairs use row 0, the backward pair saturates at d_max
    np.testing.assert_array_equal(mat, [[0, 1], [D_MAX, 0]])
    out = gpe(entries, mat, params)
    ad.sum_(out).backward()
    grad = params.e_dist.grad
    assert np.any(grad[0] != 0) and np.any(grad[D_MAX] != 0)
    np.testing.assert_array_equal(grad[1:D_MAX], np.zeros_like(grad[1:D_MAX]))


# ---------------------------------------------------------------------------
# token-entry mapping
# ---------------------------------------------------------------------------


def test_entries_for_tokens(chain4):
    vocab = Vocab(segment_ids=(0, 2))
    tokens = [SOT, vocab.token(0), vocab.token(2), EOT, PAD]
    entries = entries_for_tokens(tokens, vocab, chain4.index_of)
    assert list(entries) == [None, 0, 2, None, None]
    assert entries.tokens == tokens


# ---------------------------------------------------------------------------
# RPE bias
# ---------------------------------------------------------------------------


def test_rpe_bias_index_oracle():
    clip = 2
    table = np.arange(2 * clip + 1, dtype=np.float64) * 10
    params = RpeParams(table=ad.parameter(table), clip=clip)
    bias = rpe_bias(4, params).data
    offsets = np.arange(4)[None, :] - np.arange(4)[:, None]
    want = table[np.clip(offsets, -clip, clip) + clip]
    np.testing.assert_array_equal(bias, want)
    # explicit spot checks: offset 0 -> middle entry, clipped corners
    assert bias[0, 0] == table[clip]
    assert bias[0, 3] == table[2 * clip]  # offset +3 clips to +2
    assert bias[3, 0] == table[0]  # offset -3 clips to -2


def test_rpe_bias_shift_invariance():
    params = init_rpe_params(np.random.default_rng(1), clip=3)
    bias = rpe_bias(9, params).data
    # bias depends only on the clipped offset
    for i in range(8):
        np.testing.assert_array_equal(bias[i, : 9 - 1 - i], bias[i + 1, 1 : 9 - i])


def test_rpe_param_validation():
    with pytest.raises(ValueError, match="2 \\* clip \\+ 1"):
        RpeParams(table=ad.parameter(np.zeros(4)), clip=2)


def test_rpe_gradient_accumulates_over_shared_offsets():
    clip = 1
    params = RpeParams(table=ad.parameter(np.zeros(3)), clip=clip)
    bias = rpe_bias(3, params)
    ad.sum_(bias).backward()
    # offsets in a 3x3 grid: -2,-1,0,1,2 clipped to [-1,1]
    # count(-1)=2+1=3? offsets: row0 [0,1,2], row1 [-1,0,1], row2 [-2,-1,0]
    # clipped: [0,1,1], [-1,0,1], [-1,-1,0] -> idx+1 counts: 0:3, 1:3, 2:3
    np.testing.assert_array_equal(params.table.grad, [3.0, 3.0, 3.0])


def test_init_positional_params_deterministic():
    a = init_gpe_params(np.random.default_rng(5), 8)
    b = init_gpe_params(np.random.default_rng(5), 8)
    for (na, ta), (nb, tb) in zip(a.named(), b.named()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    ra = init_rpe_params(np.random.default_rng(5))
    rb = init_rpe_params(np.random.default_rng(5))
    np.testing.assert_array_equal(ra.table.data, rb.table.data)
    assert ra.clip == 16 and a.d_max == 8
