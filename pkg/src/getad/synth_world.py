"""Synthetic grid world: a rectangular street network plus commuting agents.

Every undirected street becomes two directed segments.  Each agent owns a
fixed origin/destination pair and alternates direction trip by trip,
following the deterministic shortest route except when route noise swaps
in the second-shortest route.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .road_graph import RoadNetwork, SegmentRecord
from .trajectory_store import Trajectory

ROAD_CLASSES = ("residential", "primary")
_CLASS_PROPS = {
    # name -> (length_m, lanes, maxspeed_kmh)
    "residential": (80.0, 1, 30.0),
    "primary": (120.0, 2, 80.0),
}


@dataclass(frozen=True)
class GridSpec:
    width: int = 10
    height: int = 10
    n_agents: int = 20
    trips_per_agent: int = 40
    route_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.width < 3 or self.height < 3:
            raise ValueError("grid width and height must both be >= 3")
        if not 0.0 <= self.route_noise < 0.5:
            raise ValueError("route_noise must be in [0, 0.5)")
        if self.n_agents < 1 or self.trips_per_agent < 0:
            raise ValueError("need at least one agent and non-negative trips")


def grid_network(spec: GridSpec) -> RoadNetwork:
    """Build the grid's segment graph.

    Streets alternate class by row (horizontal) or column (vertical)
    parity, which keeps every feature column non-constant.  Street lengths
    jitter around their class baseline so that no two structurally
    symmetric blocks are identical, as in a real city.
    """
    w, h = spec.width, spec.height
    length_rng = np.random.default_rng([spec.seed, 2])

    def node(x: int, y: int) -> int:
        return y * w + x

    segments: list[SegmentRecord] = []

    def add_street(a: int, b: int, cls_name: str) -> None:
        base, lanes, maxspeed = _CLASS_PROPS[cls_name]
        length = round(base * float(length_rng.uniform(0.7, 1.3)), 1)
        code = ROAD_CLASSES.index(cls_name)
        for tail, head in ((a, b), (b, a)):
            segments.append(
                SegmentRecord(
                    segment_id=len(segments),
                    tail_node=tail,
                    head_node=head,
                    length_m=length,
                    road_class=code,
                    lanes=lanes,
                    maxspeed_kmh=maxspeed,
                )
            )

    for y in range(h):
        for x in range(w):
            if x + 1 < w:
                add_street(node(x, y), node(x + 1, y), "primary" if y % 2 == 0 else "residential")
            if y + 1 < h:
                add_street(node(x, y), node(x, y + 1), "primary" if x % 2 == 0 else "residential")

    return RoadNetwork(segments, class_names=list(ROAD_CLASSES))


def _node_adjacency(network: RoadNetwork) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {}
    for seg in network.segments:
        adj.setdefault(seg.tail_node, []).append(seg.head_node)
    return {n: sorted(set(vs)) for n, vs in adj.items()}


def _segment_lookup(network: RoadNetwork) -> dict[tuple[int, int], int]:
    return {(s.tail_node, s.head_node): s.segment_id for s in network.segments}


def _shortest_node_path(adj, src: int, dst: int, blocked: set[tuple[int, int]] = frozenset()):
    """Level-synchronized BFS; parents resolve to the smallest node id."""
    if src == dst:
        return [src]
    parent: dict[int, int] = {src: src}
    frontier = [src]
    while frontier:
        nxt: set[int] = set()
        for u in sorted(frontier):
            for v in adj.get(u, ()):
                if (u, v) in blocked or v in parent:
                    continue
                parent[v] = u
                nxt.add(v)
        # Re-pick parents within the level so ties go to the smallest id.
        for v in nxt:
            candidates = [u for u in frontier if v in adj.get(u, ()) and (u, v) not in blocked]
            parent[v] = min(candidates)
        if dst in nxt:
            path = [dst]
            while path[-1] != src:
                path.append(parent[path[-1]])
            return path[::-1]
        frontier = sorted(nxt)
    return None


def _second_shortest(adj, src: int, dst: int, shortest: list[int]):
    """Best alternative route found by excluding one shortest-path edge."""
    best = None
    for i in range(len(shortest) - 1):
        blocked = {(shortest[i], shortest[i + 1])}
        alt = _shortest_node_path(adj, src, dst, blocked=blocked)
        if alt is None or alt == shortest:
            continue
        if best is None or (len(alt), alt) < (len(best), best):
            best = alt
    return best


def _route_to_segments(node_path, lookup) -> list[int]:
    return [lookup[(node_path[i], node_path[i + 1])] for i in range(len(node_path) - 1)]


def generate_trajectories(network: RoadNetwork, spec: GridSpec, trip_stream: int = 0,
                          trips_per_agent: int | None = None) -> list[Trajectory]:
    """Generate commuting trips.

    The agent roster (origin/destination assignments) depends only on
    spec.seed, so different trip streams share the same routines; this is
    how held-out normal trips for evaluation are produced.
    """
    w, h = spec.width, spec.height
    n_trips = spec.trips_per_agent if trips_per_agent is None else trips_per_agent
    adj = _node_adjacency(network)
    lookup = _segment_lookup(network)

    # Endpoints at least half the grid apart keep routes long enough for
    # interesting detours.  Agents are grouped onto a small set of shared
    # home/work hub pairs so that each corridor (and its occasional
    # second-shortest variant) recurs across the dataset, the way real
    # commute arteries do.
    min_dist = (w + h) // 2
    agent_rng = np.random.default_rng([spec.seed, 0])
    n_hub_pairs = max(1, (spec.n_agents + 3) // 4)
    hub_pairs: list[tuple[int, int]] = []
    while len(hub_pairs) < n_hub_pairs:
        home = int(agent_rng.integers(0, w * h))
        work = int(agent_rng.integers(0, w * h))
        manhattan = abs(home % w - work % w) + abs(home // w - work // w)
        if manhattan >= min_dist and (home, work) not in hub_pairs:
            hub_pairs.append((home, work))
    routes: list[tuple[list[int], list[int], list[int] | None, list[int] | None]] = []
    for a in range(spec.n_agents):
        home, work = hub_pairs[a % n_hub_pairs]
        out_path = _shortest_node_path(adj, home, work)
        back_path = _shortest_node_path(adj, work, home)
        out_alt = _second_shortest(adj, home, work, out_path)
        back_alt = _second_shortest(adj, work, home, back_path)
        routes.append(
            (
                _route_to_segments(out_path, lookup),
                _route_to_segments(back_path, lookup),
                _route_to_segments(out_alt, lookup) if out_alt else None,
                _route_to_segments(back_alt, lookup) if back_alt else None,
            )
        )

    trip_rng = np.random.default_rng([spec.seed, 1, trip_stream])
    trajectories: list[Trajectory] = []
    for a, (out_main, back_main, out_alt, back_alt) in enumerate(routes):
        agent_name = f"agent{a:03d}"
        for t in range(n_trips):
            outbound = t % 2 == 0
            main = out_main if outbound else back_main
            alt = out_alt if outbound else back_alt
            take_alt = alt is not None and trip_rng.random() < spec.route_noise
            segments = list(alt if take_alt else main)
            trajectories.append(
                Trajectory(
                    id=f"s{trip_stream}-a{a:03d}-t{t:03d}",
                    segments=segments,
                    agent=agent_name,
                )
            )
    return trajectories
