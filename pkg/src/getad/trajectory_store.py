"""Trajectory datasets: JSONL persistence, filtering, tokenization, batching.

Token ids: SOT=0, EOT=1, PAD=2; segment tokens follow in ascending
segment-id order, so the vocabulary size is 3 plus the number of distinct
segments seen in training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SOT = 0
EOT = 1
PAD = 2
N_SPECIAL = 3


@dataclass
class Trajectory:
    id: str
    segments: list[int]
    agent: str | None = None

    def __post_init__(self):
        if len(self.segments) == 0:
            raise ValueError(f"trajectory {self.id}: empty segment list")


class OOVError(ValueError):
    """A trajectory references segments outside the vocabulary."""

    def __init__(self, trajectory_id: str, positions: list[int], segments: list[int]):
        self.trajectory_id = trajectory_id
        self.positions = positions
        self.segments = segments
        pretty = ", ".join(f"{s}@{p}" for p, s in zip(positions, segments))
        super().__init__(f"trajectory {trajectory_id}: out-of-vocabulary segments: {pretty}")


def load_trajectories(path) -> list[Trajectory]:
    """Read one JSON object per line: {"id", "segments", optional "agent"}."""
    out: list[Trajectory] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                traj = Trajectory(
                    id=str(obj["id"]),
                    segments=[int(s) for s in obj["segments"]],
                    agent=obj.get("agent"),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed record ({exc})") from None
            out.append(traj)
    return out


def save_trajectories(trajectories, path) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            obj = {"id": traj.id, "segments": list(map(int, traj.segments))}
            if traj.agent is not None:
                obj["agent"] = traj.agent
            fh.write(json.dumps(obj) + "\n")


def filter_dataset(trajectories, min_segments: int = 1, min_agent_trajs: int | None = None):
    """Drop short trajectories, then agents with too few remaining trips.

    Trajectories without an agent are kept regardless of the agent rule.
    """
    kept = [t for t in trajectories if len(t.segments) >= min_segments]
    if min_agent_trajs is not None:
        counts: dict[str, int] = {}
        for t in kept:
            if t.agent is not None:
                counts[t.agent] = counts.get(t.agent, 0) + 1
        kept = [t for t in kept if t.agent is None or counts[t.agent] >= min_agent_trajs]
    return kept


@dataclass(frozen=True)
class Vocab:
    """Segment-id vocabulary with fixed special tokens."""

    segment_ids: tuple[int, ...]
    _token_of: dict[int, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if list(self.segment_ids) != sorted(set(self.segment_ids)):
            raise ValueError("segment ids must be distinct and ascending")
        object.__setattr__(
            self, "_token_of", {sid: N_SPECIAL + i for i, sid in enumerate(self.segment_ids)}
        )

    @property
    def size(self) -> int:
        return N_SPECIAL + len(self.segment_ids)

    def token(self, segment_id: int) -> int | None:
        return self._token_of.get(segment_id)

    def segment(self, token: int) -> int:
        if token < N_SPECIAL or token >= self.size:
            raise KeyError(f"token {token} is not a segment token")
        return self.segment_ids[token - N_SPECIAL]

    def __contains__(self, segment_id: int) -> bool:
        return segment_id in self._token_of


def build_vocab(trajectories) -> Vocab:
    ids = sorted({sid for traj in trajectories for sid in traj.segments})
    return Vocab(segment_ids=tuple(ids))


@dataclass
class TokenSeq:
    """An encoded trajectory: [SOT, segments..., EOT, PAD...]."""

    tokens: np.ndarray
    true_length: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError("tokens must be 1-D")


def validate_token_seq(seq: TokenSeq, vocab_size: int) -> list[str]:
    """Structural violations of the [SOT, ..., EOT, PAD*] layout."""
    t = seq.tokens
    problems: list[str] = []
    if seq.true_length < 3 or seq.true_length > len(t):
        problems.append("true_length out of range")
        return problems
    if t[0] != SOT:
        problems.append("missing SOT at position 0")
    if np.count_nonzero(t == SOT) != 1:
        problems.append("SOT must appear exactly once")
    if np.count_nonzero(t == EOT) != 1 or t[seq.true_length - 1] != EOT:
        problems.append("exactly one EOT, at position true_length-1")
    if np.any(t[: seq.true_length] == PAD) or np.any(t[seq.true_length :] != PAD):
        problems.append("PAD only after EOT")
    if np.any(t < 0) or np.any(t >= vocab_size):
        problems.append("token outside vocabulary range")
    return problems


def encode(trajectory: Trajectory, vocab: Vocab) -> TokenSeq:
    """Map segments to tokens, framing with SOT/EOT.

    Raises OOVError listing every unknown segment and its position.
    """
    tokens = [SOT]
    bad_pos: list[int] = []
    bad_seg: list[int] = []
    for pos, sid in enumerate(trajectory.segments):
        tok = vocab.token(sid)
        if tok is None:
            bad_pos.append(pos)
            bad_seg.append(sid)
        else:
            tokens.append(tok)
    if bad_pos:
        raise OOVError(trajectory.id, bad_pos, bad_seg)
    tokens.append(EOT)
    return TokenSeq(tokens=np.asarray(tokens, dtype=np.int64), true_length=len(tokens))


def decode_tokens(seq: TokenSeq, vocab: Vocab) -> list[int]:
    """Strip framing and map segment tokens back to segment ids."""
    return [vocab.segment(int(t)) for t in seq.tokens[: seq.true_length] if t >= N_SPECIAL]


def truncate(seq: TokenSeq, max_len: int) -> TokenSeq:
    """Tail-truncate to max_len tokens, re-appending EOT."""
    if seq.true_length <= max_len:
        return seq
    if max_len < 3:
        raise ValueError("max_len must leave room for SOT, one segment, and EOT")
    tokens = np.empty(max_len, dtype=np.int64)
    tokens[: max_len - 1] = seq.tokens[: max_len - 1]
    tokens[max_len - 1] = EOT
    return TokenSeq(tokens=tokens, true_length=max_len)


def make_batches(token_seqs, batch_size: int, max_len: int = 512, seed: int = 0):
    """Shuffle deterministically and pack into PAD-aligned token matrices.

    Each batch is an int64 matrix whose width is the longest (possibly
    truncated) sequence it contains; the final batch may be smaller.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(token_seqs))
    batches: list[np.ndarray] = []
    for start in range(0, len(order), batch_size):
        chunk = [truncate(token_seqs[i], max_len) for i in order[start : start + batch_size]]
        width = max(seq.true_length for seq in chunk)
        mat = np.full((len(chunk), width), PAD, dtype=np.int64)
        for r, seq in enumerate(chunk):
            mat[r, : seq.true_length] = seq.tokens[: seq.true_length]
        batches.append(mat)
    return batches
