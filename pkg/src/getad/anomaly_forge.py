"""Synthetic detour anomalies: replace an interior window of a trajectory
with a road-constrained alternative path between the same anchor segments.

The result is always a connected walk on the segment graph with the
original endpoints preserved.  Constrained mode additionally bounds the
replacement so detours stay subtle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .road_graph import RoadNetwork
from .trajectory_store import Trajectory

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"


@dataclass(frozen=True)
class DetourSpec:
    mode: str = "constrained"
    max_fraction: float = 0.2
    max_retries: int = 20
    rng_seed: int = 0
    # "replacement": the new window itself obeys the length bound;
    # "growth": only the net length increase does.
    bound: str = "replacement"

    def __post_init__(self):
        if self.mode not in ("constrained", "unconstrained"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.bound not in ("replacement", "growth"):
            raise ValueError(f"unknown bound semantics {self.bound!r}")
        if self.mode == "constrained" and not 0.0 < self.max_fraction <= 1.0:
            raise ValueError("max_fraction must be in (0, 1] for constrained mode")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


def _blocked_shortest_path(network: RoadNetwork, src: int, dst: int, blocked: set[int]):
    """Min-hop path src..dst over segment indices, skipping blocked nodes.

    Level-synchronized BFS with parents resolved to the smallest segment
    index, so results are deterministic.
    """
    if src in blocked or dst in blocked:
        return None
    if src == dst:
        return [src]
    parent: dict[int, int] = {src: src}
    frontier = [src]
    while frontier:
        nxt: set[int] = set()
        for u in frontier:
            for v in network.out_neighbors[u]:
                if v in blocked or v in parent:
                    continue
                parent[v] = u
                nxt.add(v)
        for v in nxt:
            parent[v] = min(
                u for u in frontier if v in network.out_neighbors[u]
            )
        if dst in nxt:
            path = [dst]
            while path[-1] != src:
                path.append(parent[path[-1]])
            return path[::-1]
        frontier = sorted(nxt)
    return None


def _detour_with_window(network: RoadNetwork, trajectory: Trajectory, spec: DetourSpec,
                        rng: np.random.Generator):
    """One accepted detour as (segments, i, j, replacement), or None."""
    segs = trajectory.segments
    m = len(segs)
    if m < 4:
        raise ValueError(
            f"trajectory {trajectory.id}: need at least 4 segments to detour, got {m}"
        )
    for sid in segs:
        if sid not in network.index_of:
            raise ValueError(f"trajectory {trajectory.id}: unknown segment {sid}")

    cap = math.ceil(spec.max_fraction * m)
    for _ in range(spec.max_retries):
        i = int(rng.integers(1, m - 1))  # window start, interior
        max_here = (m - 2) - i + 1
        if spec.mode == "constrained":
            max_here = min(max_here, cap)
        window_len = int(rng.integers(1, max_here + 1))
        j = i + window_len - 1

        window = segs[i : j + 1]
        blocked = {network.index_of[s] for s in window}
        a = network.index_of[segs[i - 1]]
        b = network.index_of[segs[j + 1]]
        blocked.discard(a)
        blocked.discard(b)
        path = _blocked_shortest_path(network, a, b, blocked)
        if path is None:
            continue
        replacement = [network.segments[k].segment_id for k in path[1:-1]]
        if replacement == window:
            continue
        if spec.mode == "constrained":
            if spec.bound == "replacement" and len(replacement) > cap:
                continue
            if spec.bound == "growth" and len(replacement) - window_len > cap:
                continue
        new_segs = segs[:i] + replacement + segs[j + 1 :]
        if new_segs == segs:
            continue
        return new_segs, i, j, replacement
    return None


def make_detour(network: RoadNetwork, trajectory: Trajectory, spec: DetourSpec,
                rng: np.random.Generator) -> Trajectory | None:
    """Detoured copy of a trajectory, or None when no feasible detour exists."""
    result = _detour_with_window(network, trajectory, spec, rng)
    if result is None:
        return None
    new_segs, _, _, _ = result
    return Trajectory(id=f"{trajectory.id}#detour", segments=new_segs, agent=trajectory.agent)


@dataclass
class LabeledItem:
    trajectory: Trajectory
    label: str
    provenance: str


@dataclass
class LabeledSet:
    items: list[LabeledItem]

    @property
    def n_anomalous(self) -> int:
        return sum(1 for it in self.items if it.label == LABEL_ANOMALOUS)


def build_eval_set(network: RoadNetwork, normals, rate: float, spec: DetourSpec,
                   rng: np.random.Generator) -> LabeledSet:
    """Convert floor(rate * N) of the normals into detour anomalies.

    Selection order comes from the supplied rng; each selected trajectory
    gets its own rng derived from (spec.rng_seed, position) so results do
    not depend on generation order.  Failures fall through to the next
    candidate; running out of candidates is an error.
    """
    normals = list(normals)
    n = len(normals)
    if n == 0:
        raise ValueError("no normal trajectories supplied")
    wanted = int(rate * n)
    if wanted < 1:
        raise ValueError(
            f"rate {rate} over {n} trajectories yields an empty anomaly class"
        )

    converted: dict[int, Trajectory] = {}
    for idx in rng.permutation(n):
        if len(converted) == wanted:
            break
        item_rng = np.random.default_rng([spec.rng_seed, int(idx)])
        try:
            detoured = make_detour(network, normals[idx], spec, item_rng)
        except ValueError:
            detoured = None
        if detoured is not None:
            converted[int(idx)] = detoured
    if len(converted) < wanted:
        raise ValueError(
            f"could only generate {len(converted)} of {wanted} requested anomalies"
        )

    items: list[LabeledItem] = []
    for idx, traj in enumerate(normals):
        if idx in converted:
            items.append(LabeledItem(converted[idx], LABEL_ANOMALOUS, provenance=traj.id))
        else:
            items.append(LabeledItem(traj, LABEL_NORMAL, provenance=traj.id))
    return LabeledSet(items=items)


def save_labeled(labeled: LabeledSet, path) -> None:
    with open(path, "w") as fh:
        for item in labeled.items:
            obj = {
                "id": item.trajectory.id,
                "segments": list(map(int, item.trajectory.segments)),
                "label": item.label,
                "provenance": item.provenance,
            }
            if item.trajectory.agent is not None:
                obj["agent"] = item.trajectory.agent
            fh.write(json.dumps(obj) + "\n")


def load_labeled(path) -> LabeledSet:
    items: list[LabeledItem] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                traj = Trajectory(
                    id=str(obj["id"]),
                    segments=[int(s) for s in obj["segments"]],
                    agent=obj.get("agent"),
                )
                label = obj["label"]
                if label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
                    raise ValueError(f"bad label {label!r}")
                items.append(LabeledItem(traj, label, provenance=obj.get("provenance", traj.id)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed record ({exc})") from None
    return LabeledSet(items=items)
