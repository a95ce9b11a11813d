"""Detour anomalies: window replacement, feasibility, labeled eval sets."""

from __future__ import annotations

import collections
import math

import numpy as np
import pytest

from getad.anomaly_forge import (
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    DetourSpec,
    _blocked_shortest_path,
    _detour_with_window,
    build_eval_set,
    load_labeled,
    make_detour,
    save_labeled,
)
from getad.road_graph import validate_trajectory
from getad.synth_world import GridSpec, generate_trajectories, grid_network
from getad.trajectory_store import Trajectory

from conftest import path_network


def min_hop_paths(out_neighbors, src: int, dst: int, blocked: set[int]):
    """Every minimum-hop src..dst path avoiding blocked (brute force)."""
    if src in blocked or dst in blocked:
        return []
    if src == dst:
        return [[src]]
    # BFS layering
    dist = {src: 0}
    frontier = [src]
    while frontier and dst not in dist:
        nxt = []
        for u in frontier:
            for v in out_neighbors[u]:
                if v in blocked or v in dist:
                    continue
                dist[v] = dist[u] + 1
                nxt.append(v)
        frontier = nxt
    if dst not in dist:
        return []
    # walk the layered DAG backwards, enumerating every chain
    paths = []

    def back(v, chain):
        if v == src:
            paths.append(chain[::-1])
            return
        for u in range(len(out_neighbors)):
            if dist.get(u) == dist[v] - 1 and v in out_neighbors[u]:
                back(u, chain + [u])

    back(dst, [dst])
    return paths


def sample_trips(w=5, h=5, n_agents=4, trips=4, seed=3, noise=0.0):
    spec = GridSpec(width=w, height=h, n_agents=n_agents, trips_per_agent=trips,
                    route_noise=noise, seed=seed)
    net = grid_network(spec)
    return net, generate_trajectories(net, spec)


# ---------------------------------------------------------------------------
# spec validation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"mode": "weird"},
        {"bound": "weird"},
        {"max_fraction": 0.0},
        {"max_fraction": 1.5},
        {"max_retries": 0},
    ],
)
def test_detour_spec_validation(kwargs):
    with pytest.raises(ValueError):
        DetourSpec(**kwargs)


def test_unconstrained_mode_ignores_fraction():
    DetourSpec(mode="unconstrained", max_fraction=5.0)  # no error


# ---------------------------------------------------------------------------
# blocked shortest path against brute force
# ---------------------------------------------------------------------------


def test_blocked_path_matches_brute_force(grid3):
    rng = np.random.default_rng(0)
    n = grid3.n_segments
    checked = 0
    for _ in range(150):
        src, dst = int(rng.integers(n)), int(rng.integers(n))
        blocked = {int(x) for x in rng.choice(n, size=5, replace=False)}
        blocked -= {src, dst}
        got = _blocked_shortest_path(grid3, src, dst, blocked)
        want = min_hop_paths(grid3.out_neighbors, src, dst, blocked)
        if not want:
            assert got is None
            continue
        checked += 1
        # deterministic tie-break: smallest parent at every level going back
        best = min(want, key=lambda p: tuple(reversed(p)))
        assert got == best
    assert checked > 50  # the sweep exercised plenty of feasible pairs


def test_blocked_path_handles_degenerate_cases(chain4):
    assert _blocked_shortest_path(chain4, 0, 0, set()) == [0]
    assert _blocked_shortest_path(chain4, 0, 3, set()) == [0, 1, 2, 3]
    assert _blocked_shortest_path(chain4, 0, 3, {2}) is None
    assert _blocked_shortest_path(chain4, 0, 3, {0}) is None
    assert _blocked_shortest_path(chain4, 3, 0, set()) is None  # one-way chain


# ---------------------------------------------------------------------------
# detours
# ---------------------------------------------------------------------------


def test_no_detour_on_a_path_graph(chain4):
    traj = Trajectory("t", [0, 1, 2, 3])
    spec = DetourSpec(max_retries=50)
    assert make_detour(chain4, traj, spec, np.random.default_rng(0)) is None


def test_detour_requires_four_segments(chain4):
    spec = DetourSpec()
    with pytest.raises(ValueError, match="at least 4 segments"):
        make_detour(chain4, Trajectory("t", [0, 1, 2]), spec, np.random.default_rng(0))


def test_detour_rejects_unknown_segments(chain4):
    spec = DetourSpec()
    with pytest.raises(ValueError, match="unknown segment 77"):
        make_detour(chain4, Trajectory("t", [0, 1, 77, 3]), spec, np.random.default_rng(0))


def test_detours_preserve_endpoints_and_validity():
    net, trips = sample_trips()
    spec = DetourSpec(max_fraction=0.3, max_retries=40)
    made = 0
    for k, traj in enumerate(trips):
        out = make_detour(net, traj, spec, np.random.default_rng(k))
        if out is None:
            continue
        made += 1
        assert out.id == f"{traj.id}#detour"
        assert out.agent == traj.agent
        assert out.segments != traj.segments
        assert out.segments[0] == traj.segments[0]
        assert out.segments[-1] == traj.segments[-1]
        assert validate_trajectory(net, out.segments) == []
    assert made >= len(trips) // 2


def test_detour_window_matches_blocked_bfs_oracle():
    net, trips = sample_trips(seed=11)
    spec = DetourSpec(max_fraction=0.5, max_retries=40)
    checked = 0
    for k, traj in enumerate(trips):
        result = _detour_with_window(net, traj, spec, np.random.default_rng(k))
        if result is None:
            continue
        new_segs, i, j, replacement = result
        window = traj.segments[i : j + 1]
        # replacement stitches between the segments flanking the window
        assert new_segs == traj.segments[:i] + replacement + traj.segments[j + 1 :]
        a = net.index_of[traj.segments[i - 1]]
        b = net.index_of[traj.segments[j + 1]]
        blocked = {net.index_of[s] for s in window} - {a, b}
        oracle = min_hop_paths(net.out_neighbors, a, b, blocked)
        assert oracle, "accepted detour must correspond to a feasible path"
        best = min(oracle, key=lambda p: tuple(reversed(p)))
        assert [net.segments[x].segment_id for x in best[1:-1]] == replacement
        checked += 1
    assert checked >= 5


def test_constrained_window_and_replacement_bounded():
    net, trips = sample_trips(w=8, h=8, n_agents=2, trips=6, seed=13)
    assert all(len(t.segments) >= 8 for t in trips)
    spec = DetourSpec(max_fraction=0.2, max_retries=60)
    for k, traj in enumerate(trips):
        m = len(traj.segments)
        cap = math.ceil(spec.max_fraction * m)
        result = _detour_with_window(net, traj, spec, np.random.default_rng(100 + k))
        if result is None:
            continue
        _, i, j, replacement = result
        assert 1 <= i <= m - 2
        assert j <= m - 2
        assert (j - i + 1) <= cap
        assert len(replacement) <= cap


def test_unconstrained_window_may_span_interior():
    net, trips = sample_trips(w=6, h=6, seed=17)
    spec = DetourSpec(mode="unconstrained", max_retries=80)
    widths = []
    for k, traj in enumerate(trips):
        result = _detour_with_window(net, traj, spec, np.random.default_rng(k))
        if result is None:
            continue
        _, i, j, _ = result
        widths.append((j - i + 1) / (len(traj.segments) - 2))
    # with no cap, some windows cover most of the interior
    assert widths and max(widths) > 0.5


# ---------------------------------------------------------------------------
# labeled evaluation sets
# ---------------------------------------------------------------------------


def test_build_eval_set_rate_and_alignment():
    net, trips = sample_trips(w=6, h=6, n_agents=10, trips=10, seed=19)
    assert len(trips) == 100
    spec = DetourSpec(rng_seed=5)
    labeled = build_eval_set(net, trips, rate=0.05, spec=spec,
                             rng=np.random.default_rng(1))
    assert len(labeled.items) == 100
    assert labeled.n_anomalous == 5
    for item, original in zip(labeled.items, trips):
        assert item.provenance == original.id
        if item.label == LABEL_NORMAL:
            assert item.trajectory is original
        else:
            assert item.label == LABEL_ANOMALOUS
            assert item.trajectory.segments != original.segments
            assert item.trajectory.segments[0] == original.segments[0]
            assert item.trajectory.segments[-1] == original.segments[-1]
            assert validate_trajectory(net, item.trajectory.segments) == []


def test_build_eval_set_is_deterministic():
    net, trips = sample_trips(w=6, h=6, n_agents=6, trips=8, seed=23)
    spec = DetourSpec(rng_seed=2)
    a = build_eval_set(net, trips, 0.1, spec, np.random.default_rng(7))
    b = build_eval_set(net, trips, 0.1, spec, np.random.default_rng(7))
    assert a == b
    c = build_eval_set(net, trips, 0.1, spec, np.random.default_rng(8))
    assert [i.label for i in a.items] != [i.label for i in c.items]


def test_build_eval_set_degenerate_rate():
    net, trips = sample_trips()
    with pytest.raises(ValueError, match="empty anomaly class"):
        build_eval_set(net, trips, 0.0001, DetourSpec(), np.random.default_rng(0))
    with pytest.raises(ValueError, match="no normal trajectories"):
        build_eval_set(net, [], 0.5, DetourSpec(), np.random.default_rng(0))


def test_build_eval_set_reports_infeasibility(chain4):
    trips = [Trajectory(f"t{i}", [0, 1, 2, 3]) for i in range(10)]
    with pytest.raises(ValueError, match="could only generate 0 of 1"):
        build_eval_set(chain4, trips, 0.1, DetourSpec(max_retries=5),
                       np.random.default_rng(0))


def test_labeled_round_trip(tmp_path):
    net, trips = sample_trips(w=6, h=6, n_agents=4, trips=6, seed=29)
    labeled = build_eval_set(net, trips, 0.1, DetourSpec(), np.random.default_rng(3))
    path = tmp_path / "eval.jsonl"
    save_labeled(labeled, path)
    loaded = load_labeled(path)
    assert loaded == labeled


def test_load_labeled_rejects_bad_label(tmp_path):
    path = tmp_path / "eval.jsonl"
    path.write_text('{"id": "x", "segments": [1, 2], "label": "odd"}\n')
    with pytest.raises(ValueError, match="line 1: malformed record"):
        load_labeled(path)


def test_load_labeled_rejects_missing_fields(tmp_path):
    path = tmp_path / "eval.jsonl"
    path.write_text('{"id": "x", "label": "normal"}\n')
    with pytest.raises(ValueError, match="line 1"):
        load_labeled(path)
