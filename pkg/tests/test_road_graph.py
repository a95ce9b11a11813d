"""Road-segment graph: adjacency, transition stats, features, hop distances."""

from __future__ import annotations

import collections

import numpy as np
import pytest

from getad.road_graph import (
    HopIndex,
    RoadNetwork,
    SegmentRecord,
    build_features,
    hop_distances,
    load_network,
    transition_stats,
    validate_trajectory,
    write_edges_csv,
)
from getad.trajectory_store import Trajectory

from conftest import path_network


def brute_adjacency(segments: list[SegmentRecord]) -> set[tuple[int, int]]:
    """Independent oracle: (u, v) adjacent iff head(u) == tail(v), u != v."""
    return {
        (a.segment_id, b.segment_id)
        for a in segments
        for b in segments
        if a.segment_id != b.segment_id and a.head_node == b.tail_node
    }


def bfs_hops(segments: list[SegmentRecord], src_id: int) -> dict[int, int]:
    """Independent BFS on segment ids built straight from the records."""
    succ = collections.defaultdict(list)
    for a in segments:
        for b in segments:
            if a.segment_id != b.segment_id and a.head_node == b.tail_node:
                succ[a.segment_id].append(b.segment_id)
    dist = {src_id: 0}
    queue = collections.deque([src_id])
    while queue:
        u = queue.popleft()
        for v in succ[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


# ---------------------------------------------------------------------------
# construction and adjacency
# ---------------------------------------------------------------------------


def test_chain_adjacency(chain4):
    assert chain4.n_segments == 4
    for i in range(3):
        assert chain4.out_neighbors[i] == [i + 1]
    assert chain4.out_neighbors[3] == []
    assert chain4.adjacency == {(0, 1), (1, 2), (2, 3)}
    np.testing.assert_array_equal(chain4.in_degree, [0, 1, 1, 1])
    np.testing.assert_array_equal(chain4.out_degree, [1, 1, 1, 0])


def test_adjacency_matches_brute_force_on_grid(grid3):
    assert grid3.adjacency == brute_adjacency(grid3.segments)
    # dense index pairs agree with the id-level set
    pairs = grid3.adjacency_index_pairs()
    as_ids = {(grid3.segments[i].segment_id, grid3.segments[j].segment_id) for i, j in pairs}
    assert as_ids == grid3.adjacency


def test_two_way_street_segments_are_not_mutually_adjacent():
    # u: a->b and v: b->a chain in both directions, but u->u is excluded
    segs = [
        SegmentRecord(0, 10, 11, 100.0, 0, 1, 50.0),
        SegmentRecord(1, 11, 10, 100.0, 0, 1, 50.0),
    ]
    net = RoadNetwork(segs, class_names=["residential"])
    # a->b can chain into b->a (a U-turn) but not into itself
    assert net.adjacency == {(0, 1), (1, 0)}


def test_segments_sorted_by_id_regardless_of_input_order():
    segs = [
        SegmentRecord(5, 0, 1, 10.0, 0, 1, 30.0),
        SegmentRecord(2, 1, 2, 10.0, 0, 1, 30.0),
    ]
    net = RoadNetwork(segs, class_names=["residential"])
    assert [s.segment_id for s in net.segments] == [2, 5]
    assert net.index_of == {2: 0, 5: 1}


def test_duplicate_ids_rejected():
    segs = [SegmentRecord(1, 0, 1, 10.0, 0, 1, 30.0)] * 2
    with pytest.raises(ValueError, match="duplicate"):
        RoadNetwork(segs, class_names=["residential"])


def test_empty_network_rejected():
    with pytest.raises(ValueError, match="at least one segment"):
        RoadNetwork([], class_names=[])


# ---------------------------------------------------------------------------
# trajectory validation
# ---------------------------------------------------------------------------


def test_validate_trajectory(chain4):
    assert validate_trajectory(chain4, [0, 1, 2, 3]) == []
    problems = validate_trajectory(chain4, [0, 2])
    assert problems == ["position 0: 0 -> 2 not adjacent"]
    problems = validate_trajectory(chain4, [0, 99])
    assert problems == ["position 1: unknown segment 99"]
    assert validate_trajectory(chain4, []) == ["empty trajectory"]


# ---------------------------------------------------------------------------
# transition statistics
# ---------------------------------------------------------------------------


def test_transition_counts_hand_oracle(chain4):
    trajs = [
        Trajectory("a", [0, 1, 2, 3]),
        Trajectory("b", [0, 1, 2]),
        Trajectory("c", [1, 2]),
    ]
    stats = transition_stats(chain4, trajs)
    assert stats.count_pair(0, 1) == 2
    assert stats.count_pair(1, 2) == 3
    assert stats.count_pair(2, 3) == 1
    assert stats.count_src(0) == 2
    assert stats.count_src(1) == 3
    assert stats.count_src(2) == 1  # final positions do not count as sources
    assert stats.count_src(3) == 0
    assert stats.prob(0, 1) == 1.0
    assert stats.prob(2, 3) == 1.0
    assert stats.prob(3, 0) == 0.0  # unseen source


def test_transition_probs_row_stochastic(grid3):
    from getad.synth_world import GridSpec, generate_trajectories

    spec = GridSpec(width=3, height=3, n_agents=3, trips_per_agent=8, seed=7)
    trajs = generate_trajectories(grid3, spec)
    stats = transition_stats(grid3, trajs)
    srcs = {u for (u, _) in stats.pair_counts}
    assert srcs  # corpus produced transitions
    for u in srcs:
        total = sum(p for (a, _), c in stats.pair_counts.items() if a == u
                    for p in [c / stats.count_src(u)])
        assert abs(total - 1.0) <= 1e-9
    # probabilities recompute from raw counts
    for (u, v), c in stats.pair_counts.items():
        assert stats.prob(u, v) == pytest.approx(c / stats.count_src(u), abs=1e-12)


def test_transition_stats_rejects_unknown_segment(chain4):
    with pytest.raises(ValueError, match="position 1: unknown segment 42"):
        transition_stats(chain4, [Trajectory("x", [0, 42])])


# ---------------------------------------------------------------------------
# feature matrix
# ---------------------------------------------------------------------------


def test_feature_columns_and_zscores(chain4):
    trajs = [Trajectory("a", [0, 1]), Trajectory("b", [0, 1, 2, 3])]
    stats = transition_stats(chain4, trajs)
    with pytest.warns(UserWarning, match="maxspeed_kmh"):
        fm = build_features(chain4, stats, trajs)
    names = [name for name, _ in fm.column_spec]
    assert names == [
        "length_m",
        "road_class=residential",
        "road_class=primary",
        "lanes",
        "maxspeed_kmh",
        "in_degree",
        "out_degree",
        "visit_freq",
    ]
    assert fm.values.shape == (4, 8)
    assert fm.values.dtype == np.float32

    # z-score columns: recompute from the raw attributes
    length = np.array([100.0, 101.0, 102.0, 103.0])
    expected = (length - length.mean()) / length.std()
    np.testing.assert_allclose(fm.values[:, 0], expected, rtol=1e-6)
    # zero-variance maxspeed collapses to zeros
    np.testing.assert_array_equal(fm.values[:, 4], np.zeros(4))
    # one-hot columns partition the segments
    onehot = fm.values[:, 1:3]
    np.testing.assert_array_equal(onehot.sum(axis=1), np.ones(4))
    np.testing.assert_array_equal(onehot[:, 1], [0.0, 1.0, 0.0, 1.0])  # odd ids are primary
    # visit counts: seg0 2x, seg1 2x, seg2 1x, seg3 1x -> normalize by max=2
    np.testing.assert_allclose(fm.values[:, 7], [1.0, 1.0, 0.5, 0.5])


def test_zscore_columns_standardized_on_grid(grid3):
    trajs = [Trajectory("a", [grid3.segments[0].segment_id])]
    stats = transition_stats(grid3, trajs)
    fm = build_features(grid3, stats, trajs)
    for col, (name, kind) in enumerate(fm.column_spec):
        if kind != "zscore":
            continue
        vals = fm.values[:, col].astype(np.float64)
        if np.allclose(vals, 0.0):
            continue  # zero-variance column
        assert abs(vals.mean()) < 1e-5, name
        assert abs(vals.std() - 1.0) < 1e-5, name


def test_visit_freq_zero_when_corpus_empty(chain4):
    stats = transition_stats(chain4, [])
    with pytest.warns(UserWarning):
        fm = build_features(chain4, stats, [])
    np.testing.assert_array_equal(fm.values[:, -1], np.zeros(4))


# ---------------------------------------------------------------------------
# hop distances
# ---------------------------------------------------------------------------


def test_hop_rows_on_chain(chain4):
    index = chain4.hop_index(d_max=3)
    np.testing.assert_array_equal(index.row(0), [0, 1, 2, 3])
    np.testing.assert_array_equal(index.row(3), [-1, -1, -1, 0])
    truncated = chain4.hop_index(d_max=2)
    np.testing.assert_array_equal(truncated.row(0), [0, 1, 2, HopIndex.UNREACHED])
    assert truncated.hops(0, 3) == HopIndex.UNREACHED


def test_hop_index_rejects_bad_dmax():
    with pytest.raises(ValueError, match="d_max"):
        HopIndex([[1], []], d_max=0)


def test_hops_match_independent_bfs(grid3):
    index = grid3.hop_index(d_max=50)  # large enough to reach everything
    for src in range(grid3.n_segments):
        oracle = bfs_hops(grid3.segments, grid3.segments[src].segment_id)
        row = index.row(src)
        for dst in range(grid3.n_segments):
            want = oracle.get(grid3.segments[dst].segment_id, HopIndex.UNREACHED)
            assert row[dst] == want, (src, dst)


def test_hops_truncate_at_dmax(grid5):
    d_max = 3
    index = grid5.hop_index(d_max)
    got = index.row(0)
    full = grid5.hop_index(40).row(0)
    for dst in range(grid5.n_segments):
        if full[dst] != HopIndex.UNREACHED and full[dst] <= d_max:
            assert got[dst] == full[dst]
        else:
            assert got[dst] == HopIndex.UNREACHED


def test_hop_distances_dict(chain4):
    dists = hop_distances(chain4, sources=[0, 2], d_max=2)
    assert dists == {(0, 0): 0, (0, 1): 1, (0, 2): 2, (2, 2): 0, (2, 3): 1}


# ---------------------------------------------------------------------------
# CSV round-trip
# ---------------------------------------------------------------------------


def test_edges_csv_round_trip(tmp_path, grid3):
    path = tmp_path / "edges.csv"
    write_edges_csv(grid3, path)
    # preserving the original class coding makes the round trip exact
    coding = {name: i for i, name in enumerate(grid3.class_names)}
    loaded = load_network(path, class_map=coding)
    assert loaded.class_names == grid3.class_names
    assert len(loaded.segments) == len(grid3.segments)
    for a, b in zip(loaded.segments, grid3.segments):
        assert a == b
    # without a map, classes are recoded but the graph is unchanged
    recoded = load_network(path)
    assert sorted(recoded.class_names) == sorted(grid3.class_names)
    assert recoded.adjacency == grid3.adjacency


def test_load_network_respects_class_map(tmp_path, chain4):
    path = tmp_path / "edges.csv"
    write_edges_csv(chain4, path)
    loaded = load_network(path, class_map={"primary": 0, "residential": 1})
    assert loaded.class_names == ["primary", "residential"]
    # chain4 codes residential=0; under the remap, residential segments carry code 1
    assert loaded.segments[0].road_class == 1


def test_load_network_header_mismatch(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("edge_id,from,to\n1,2,3\n")
    with pytest.raises(ValueError, match="expected header"):
        load_network(path)


@pytest.mark.parametrize(
    "row,message",
    [
        ("7,0,1,not-a-number,residential,1,50", "line 3: malformed row"),
        ("7,0,1,-5,residential,1,50", "line 3: length_m must be positive"),
        ("7,0,1,10,residential,0,50", "line 3: lanes must be >= 1"),
        ("7,0,1,10,residential,1,0", "line 3: maxspeed_kmh must be positive"),
        ("6,0,1,10,residential,1,50", "line 3: duplicate edge_id 6"),
    ],
)
def test_load_network_row_errors(tmp_path, row, message):
    path = tmp_path / "bad.csv"
    header = "edge_id,from_node,to_node,length_m,highway_class,lanes,maxspeed_kmh"
    path.write_text(f"{header}\n6,0,1,10,residential,1,50\n{row}\n")
    with pytest.raises(ValueError, match=message):
        load_network(path)
