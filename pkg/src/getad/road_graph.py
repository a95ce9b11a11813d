"""Road-network segment graph: loading, adjacency, transition statistics,
segment features, and truncated hop distances.

Directed road segments are the nodes of the working graph.  Two segments
are adjacent when the head intersection of the first is the tail
intersection of the second, so trajectories are walks over this graph.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

EDGE_CSV_FIELDS = (
    "edge_id",
    "from_node",
    "to_node",
    "length_m",
    "highway_class",
    "lanes",
    "maxspeed_kmh",
)


@dataclass(frozen=True)
class SegmentRecord:
    """One directed road segment."""

    segment_id: int
    tail_node: int
    head_node: int
    length_m: float
    road_class: int
    lanes: int
    maxspeed_kmh: float


class RoadNetwork:
    """Directed segment graph with dense indexing by ascending segment id."""

    def __init__(self, segments: list[SegmentRecord], class_names: list[str]):
        if not segments:
            raise ValueError("network must contain at least one segment")
        self.segments = sorted(segments, key=lambda s: s.segment_id)
        ids = [s.segment_id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate segment ids")
        self.class_names = list(class_names)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.index_of = {sid: i for i, sid in enumerate(ids)}
        # (u, v) adjacent iff head(u) == tail(v) and u != v.
        by_tail: dict[int, list[int]] = {}
        for i, seg in enumerate(self.segments):
            by_tail.setdefault(seg.tail_node, []).append(i)
        self.out_neighbors: list[list[int]] = []
        for i, seg in enumerate(self.segments):
            succ = [j for j in by_tail.get(seg.head_node, []) if j != i]
            self.out_neighbors.append(sorted(succ))
        self.adjacency: set[tuple[int, int]] = {
            (self.segments[i].segment_id, self.segments[j].segment_id)
            for i in range(len(self.segments))
            for j in self.out_neighbors[i]
        }
        self.in_degree = np.zeros(len(self.segments), dtype=np.int64)
        self.out_degree = np.zeros(len(self.segments), dtype=np.int64)
        for i, succ in enumerate(self.out_neighbors):
            self.out_degree[i] = len(succ)
            for j in succ:
                self.in_degree[j] += 1
        self._hop_indexes: dict[int, HopIndex] = {}

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def adjacency_index_pairs(self) -> np.ndarray:
        """All adjacent (u, v) as dense index pairs, sorted."""
        pairs = [(i, j) for i in range(self.n_segments) for j in self.out_neighbors[i]]
        return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    def hop_index(self, d_max: int) -> "HopIndex":
        if d_max not in self._hop_indexes:
            self._hop_indexes[d_max] = HopIndex(self.out_neighbors, d_max)
        return self._hop_indexes[d_max]


def load_network(path, class_map: dict[str, int] | None = None) -> RoadNetwork:
    """Load a network from an edge CSV.

    Columns: edge_id,from_node,to_node,length_m,highway_class,lanes,maxspeed_kmh.
    Road classes are coded in first-seen order unless a map is supplied.
    """
    codes: dict[str, int] = dict(class_map) if class_map else {}
    segments: list[SegmentRecord] = []
    seen_ids: set[int] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != EDGE_CSV_FIELDS:
            raise ValueError(
                f"{path}: expected header {','.join(EDGE_CSV_FIELDS)}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                seg_id = int(row["edge_id"])
                tail = int(row["from_node"])
                head = int(row["to_node"])
                length = float(row["length_m"])
                lanes = int(row["lanes"])
                maxspeed = float(row["maxspeed_kmh"])
                cls = row["highway_class"]
            except (TypeError, ValueError, KeyError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed row ({exc})") from None
            if seg_id in seen_ids:
                raise ValueError(f"{path}: line {lineno}: duplicate edge_id {seg_id}")
            seen_ids.add(seg_id)
            if length <= 0:
                raise ValueError(f"{path}: line {lineno}: length_m must be positive")
            if lanes < 1:
                raise ValueError(f"{path}: line {lineno}: lanes must be >= 1")
            if maxspeed <= 0:
                raise ValueError(f"{path}: line {lineno}: maxspeed_kmh must be positive")
            if cls not in codes:
                codes[cls] = len(codes)
            segments.append(
                SegmentRecord(
                    segment_id=seg_id,
                    tail_node=tail,
                    head_node=head,
                    length_m=length,
                    road_class=codes[cls],
                    lanes=lanes,
                    maxspeed_kmh=maxspeed,
                )
            )
    names = [None] * len(codes)
    for name, code in codes.items():
        names[code] = name
    return RoadNetwork(segments, class_names=names)


def write_edges_csv(network: RoadNetwork, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EDGE_CSV_FIELDS)
        for seg in network.segments:
            writer.writerow(
                [
                    seg.segment_id,
                    seg.tail_node,
                    seg.head_node,
                    f"{seg.length_m:g}",
                    network.class_names[seg.road_class],
                    seg.lanes,
                    f"{seg.maxspeed_kmh:g}",
                ]
            )


def validate_trajectory(network: RoadNetwork, segments) -> list[str]:
    """Return human-readable violations (unknown ids, broken adjacency)."""
    problems: list[str] = []
    if len(segments) == 0:
        return ["empty trajectory"]
    for pos, sid in enumerate(segments):
        if sid not in network.index_of:
            problems.append(f"position {pos}: unknown segment {sid}")
    for pos in range(len(segments) - 1):
        u, v = segments[pos], segments[pos + 1]
        if u in network.index_of and v in network.index_of:
            if (u, v) not in network.adjacency:
                problems.append(f"position {pos}: {u} -> {v} not adjacent")
    return problems


# ---------------------------------------------------------------------------
# transition statistics
# ---------------------------------------------------------------------------


@dataclass
class TransitionStats:
    """Empirical transition counts and probabilities between segments."""

    pair_counts: dict[tuple[int, int], int] = field(default_factory=dict)
    src_counts: dict[int, int] = field(default_factory=dict)

    def count_pair(self, u: int, v: int) -> int:
        return self.pair_counts.get((u, v), 0)

    def count_src(self, u: int) -> int:
        return self.src_counts.get(u, 0)

    def prob(self, u: int, v: int) -> float:
        src = self.src_counts.get(u, 0)
        if src == 0:
            return 0.0
        return self.pair_counts.get((u, v), 0) / src


def transition_stats(network: RoadNetwork, trajectories) -> TransitionStats:
    """Count observed consecutive transitions over a trajectory corpus.

    count_src(u) is the number of occurrences of u in any non-final
    position, so probabilities form a row-stochastic map per observed u.
    """
    stats = TransitionStats()
    for traj in trajectories:
        segs = traj.segments
        for pos, sid in enumerate(segs):
            if sid not in network.index_of:
                raise ValueError(
                    f"trajectory {traj.id}: position {pos}: unknown segment {sid}"
                )
        for pos in range(len(segs) - 1):
            u, v = segs[pos], segs[pos + 1]
            stats.pair_counts[(u, v)] = stats.pair_counts.get((u, v), 0) + 1
            stats.src_counts[u] = stats.src_counts.get(u, 0) + 1
    return stats


# ---------------------------------------------------------------------------
# segment features
# ---------------------------------------------------------------------------


@dataclass
class FeatureMatrix:
    """Per-segment feature rows aligned with the network's dense index."""

    values: np.ndarray
    column_spec: list[tuple[str, str]]


def _zscore(column: np.ndarray, name: str) -> np.ndarray:
    mean = column.mean(dtype=np.float64)
    std = column.std(dtype=np.float64)
    if std == 0.0:
        warnings.warn(f"feature column {name!r} has zero variance; emitting zeros")
        return np.zeros_like(column, dtype=np.float64)
    return (column - mean) / std


def build_features(network: RoadNetwork, stats: TransitionStats, trajectories) -> FeatureMatrix:
    """Assemble the fixed-order feature matrix.

    Columns: z-scored length, one-hot road class, z-scored lanes, z-scored
    speed limit, z-scored in/out degree, and visit frequency normalized to
    [0, 1] by the maximum observed count.
    """
    n = network.n_segments
    length = np.asarray([s.length_m for s in network.segments], dtype=np.float64)
    lanes = np.asarray([s.lanes for s in network.segments], dtype=np.float64)
    maxspeed = np.asarray([s.maxspeed_kmh for s in network.segments], dtype=np.float64)
    classes = np.asarray([s.road_class for s in network.segments], dtype=np.int64)

    visits = np.zeros(n, dtype=np.float64)
    for traj in trajectories:
        for sid in traj.segments:
            visits[network.index_of[sid]] += 1
    max_visits = visits.max() if n else 0.0
    visit_freq = visits / max_visits if max_visits > 0 else visits

    columns: list[np.ndarray] = [_zscore(length, "length_m")]
    spec: list[tuple[str, str]] = [("length_m", "zscore")]
    for code, name in enumerate(network.class_names):
        columns.append((classes == code).astype(np.float64))
        spec.append((f"road_class={name}", "onehot"))
    columns.append(_zscore(lanes, "lanes"))
    spec.append(("lanes", "zscore"))
    columns.append(_zscore(maxspeed, "maxspeed_kmh"))
    spec.append(("maxspeed_kmh", "zscore"))
    columns.append(_zscore(network.in_degree.astype(np.float64), "in_degree"))
    spec.append(("in_degree", "zscore"))
    columns.append(_zscore(network.out_degree.astype(np.float64), "out_degree"))
    spec.append(("out_degree", "zscore"))
    columns.append(visit_freq)
    spec.append(("visit_freq", "raw"))

    values = np.stack(columns, axis=1).astype(np.float32)
    return FeatureMatrix(values=values, column_spec=spec)


# ---------------------------------------------------------------------------
# truncated hop distances
# ---------------------------------------------------------------------------


class HopIndex:
    """Lazy per-source BFS over the segment graph, truncated at d_max.

    Rows are dense int16 arrays where -1 marks nodes not reached within
    d_max hops; the distance from a node to itself is 0.
    """

    UNREACHED = -1

    def __init__(self, out_neighbors, d_max: int):
        if d_max < 1:
            raise ValueError("d_max must be >= 1")
        self.out_neighbors = out_neighbors
        self.d_max = d_max
        self._rows: dict[int, np.ndarray] = {}

    def row(self, src: int) -> np.ndarray:
        cached = self._rows.get(src)
        if cached is not None:
            return cached
        n = len(self.out_neighbors)
        dist = np.full(n, self.UNREACHED, dtype=np.int16)
        dist[src] = 0
        frontier = [src]
        depth = 0
        while frontier and depth < self.d_max:
            depth += 1
            nxt: list[int] = []
            for u in frontier:
                for v in self.out_neighbors[u]:
                    if dist[v] == self.UNREACHED:
                        dist[v] = depth
                        nxt.append(v)
            frontier = nxt
        self._rows[src] = dist
        return dist

    def hops(self, src: int, dst: int) -> int:
        val = int(self.row(src)[dst])
        return val


def hop_distances(network: RoadNetwork, sources, d_max: int) -> dict[tuple[int, int], int]:
    """Hop distances from each source index, truncated at d_max.

    Pairs farther than d_max are absent.  Keys are dense index pairs.
    """
    index = network.hop_index(d_max)
    out: dict[tuple[int, int], int] = {}
    for src in sources:
        row = index.row(src)
        for dst in np.nonzero(row != HopIndex.UNREACHED)[0]:
            out[(src, int(dst))] = int(row[dst])
    return out
