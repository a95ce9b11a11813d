"""Positional encodings for trajectory sequences.

The graph positional encoding (GPE) embeds truncated hop distances between
the segments a trajectory visits and aggregates them per position over a
causal (default) or full horizon.  The baseline relative positional
encoding (RPE) is a learned additive attention bias over clipped index
offsets, used when GPE is disabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .road_graph import HopIndex, RoadNetwork

SENTINEL = -1  # marks special-token positions in the distance matrix


@dataclass
class GpeParams:
    e_dist: Tensor  # (d_max + 1, d_model) hop-distance embedding table
    e_sot: Tensor  # (d_model,)
    e_eot: Tensor  # (d_model,)
    e_pad: Tensor  # (d_model,)
    d_max: int = 8
    horizon: str = "causal"  # or "full"
    aggregation: str = "sum"  # or "mean"

    def __post_init__(self):
        if self.horizon not in ("causal", "full"):
            raise ValueError(f"unknown horizon {self.horizon!r}")
        if self.aggregation not in ("sum", "mean"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.e_dist.data.shape[0] != self.d_max + 1:
            raise ValueError("e_dist must have d_max + 1 rows")

    def named(self, prefix: str = "gpe"):
        yield f"{prefix}/e_dist", self.e_dist
        yield f"{prefix}/e_sot", self.e_sot
        yield f"{prefix}/e_eot", self.e_eot
        yield f"{prefix}/e_pad", self.e_pad


def init_gpe_params(rng: np.random.Generator, d_model: int, d_max: int = 8,
                    horizon: str = "causal", aggregation: str = "sum") -> GpeParams:
    scale = 0.02
    return GpeParams(
        e_dist=ad.parameter(rng.normal(0.0, scale, size=(d_max + 1, d_model))),
        e_sot=ad.parameter(rng.normal(0.0, scale, size=d_model)),
        e_eot=ad.parameter(rng.normal(0.0, scale, size=d_model)),
        e_pad=ad.parameter(rng.normal(0.0, scale, size=d_model)),
        d_max=d_max,
        horizon=horizon,
        aggregation=aggregation,
    )


def pairwise_hops(entries, source, d_max: int) -> np.ndarray:
    """Truncated hop-distance matrix for one sequence.

    ``entries`` holds a dense segment index per position, or None at
    special-token positions, whose rows and columns are set to a sentinel.
    Unreachable pairs within the horizon get d_max; the diagonal is 0.
    """
    if isinstance(source, RoadNetwork):
        index = source.hop_index(d_max)
    elif isinstance(source, HopIndex):
        if source.d_max != d_max:
            raise ValueError("hop index was built with a different d_max")
        index = source
    else:
        raise TypeError("source must be a RoadNetwork or HopIndex")
    n = len(entries)
    mat = np.full((n, n), SENTINEL, dtype=np.int16)
    seg_positions = [i for i, e in enumerate(entries) if e is not None]
    cols = np.asarray([entries[i] for i in seg_positions], dtype=np.int64)
    for i in seg_positions:
        row = index.row(entries[i])[cols]
        mat[i, seg_positions] = np.where(row == HopIndex.UNREACHED, d_max, row)
    return mat


def gpe(entries, distances: np.ndarray, params: GpeParams) -> Tensor:
    """Per-position positional rows for one sequence.

    Segment positions aggregate hop-distance embeddings over their
    horizon; special positions use their dedicated embeddings.
    """
    from .trajectory_store import EOT, PAD, SOT  # cycle-free import of token ids

    n = len(entries)
    if distances.shape != (n, n):
        raise ValueError("distance matrix does not match the sequence length")
    seg_mask = np.asarray([e is not None for e in entries])

    horizon = np.broadcast_to(seg_mask, (n, n)).copy()
    if params.horizon == "causal":
        horizon &= np.tril(np.ones((n, n), dtype=bool))

    idx = np.where(distances >= 0, distances, 0).astype(np.int64)
    gathered = ad.gather(params.e_dist, idx)  # (n, n, d)
    mask = Tensor(horizon.astype(params.e_dist.dtype)[:, :, None])
    summed = ad.sum_(ad.mul(gathered, mask), axis=1)  # (n, d)
    if params.aggregation == "mean":
        counts = horizon.sum(axis=1).astype(np.float64)
        inv = (1.0 / np.maximum(counts, 1.0)).astype(params.e_dist.dtype)
        summed = ad.mul(summed, Tensor(inv[:, None]))
    summed = ad.mul(summed, Tensor(seg_mask.astype(params.e_dist.dtype)[:, None]))

    # Dedicated rows for special positions, scattered by token kind.
    special_rows = np.zeros(n, dtype=np.int64)
    special_mask = np.zeros(n, dtype=bool)
    for i, e in enumerate(entries):
        if e is None:
            special_mask[i] = True
    if special_mask.any():
        table = ad.concat(
            [ad.reshape(t, (1, -1)) for t in (params.e_sot, params.e_eot, params.e_pad)],
            axis=0,
        )
        kinds = {SOT: 0, EOT: 1, PAD: 2}
        for i in np.nonzero(special_mask)[0]:
            special_rows[i] = kinds[_special_kind(entries, int(i))]
        picked = ad.gather(table, special_rows)
        picked = ad.mul(picked, Tensor(special_mask.astype(params.e_dist.dtype)[:, None]))
        return ad.add(summed, picked)
    return summed


class PositionEntries(list):
    """Per-position dense segment indices (None at specials) plus token ids."""

    def __init__(self, values, tokens):
        super().__init__(values)
        self.tokens = list(tokens)


def _special_kind(entries, position: int) -> int:
    tokens = getattr(entries, "tokens", None)
    if tokens is None:
        raise ValueError(
            "entries with special positions must be a PositionEntries carrying token ids"
        )
    return int(tokens[position])


def entries_for_tokens(tokens, vocab, index_of_segment) -> PositionEntries:
    """Map token ids to dense network rows; specials become None."""
    from .trajectory_store import N_SPECIAL

    values = []
    for t in tokens:
        t = int(t)
        if t < N_SPECIAL:
            values.append(None)
        else:
            values.append(index_of_segment[vocab.segment(t)])
    return PositionEntries(values, tokens)


@dataclass
class RpeParams:
    table: Tensor  # (2 * clip + 1,) additive bias per clipped offset
    clip: int = 16

    def __post_init__(self):
        if self.table.data.shape != (2 * self.clip + 1,):
            raise ValueError("bias table must have 2 * clip + 1 entries")

    def named(self, prefix: str = "rpe"):
        yield f"{prefix}/table", self.table


def init_rpe_params(rng: np.random.Generator, clip: int = 16) -> RpeParams:
    return RpeParams(table=ad.parameter(rng.normal(0.0, 0.02, size=2 * clip + 1)), clip=clip)


def rpe_bias(seq_len: int, params: RpeParams) -> Tensor:
    """(seq_len, seq_len) additive attention bias from clipped offsets."""
    offsets = np.arange(seq_len)[None, :] - np.arange(seq_len)[:, None]
    idx = np.clip(offsets, -params.clip, params.clip) + params.clip
    return ad.gather(params.table, idx)
