"""Trajectory anomaly scores from a trained checkpoint.

Per scored position the model emits a next-token distribution over the
effective vocabulary (PAD and SOT removed).  The negative log-likelihood
of the realized token is weighted by the model's confidence, one minus
the normalized entropy of that distribution, so hesitant predictions
contribute less than confidently wrong ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .trajectory_store import PAD, SOT, TokenSeq, Trajectory, encode
from .train_engine import Checkpoint, runtime_from_checkpoint


@dataclass
class ScoreBreakdown:
    """Per-position scoring terms for one trajectory."""

    nll_terms: np.ndarray  # -log p of each realized token
    entropies: np.ndarray  # entropy of each predictive distribution, in nats
    confidences: np.ndarray  # 1 - entropy / h_max, in [0, 1]
    h_max: float
    targets: np.ndarray

    @property
    def n(self) -> int:
        return len(self.nll_terms)


def nll(breakdown: ScoreBreakdown) -> float:
    if breakdown.n == 0:
        raise ValueError("empty score breakdown")
    return float(np.sum(breakdown.nll_terms))


def perplexity(breakdown: ScoreBreakdown) -> float:
    if breakdown.n == 0:
        raise ValueError("empty score breakdown")
    return float(np.exp(np.mean(breakdown.nll_terms)))


def cw_nll(breakdown: ScoreBreakdown) -> float:
    if breakdown.n == 0:
        raise ValueError("empty score breakdown")
    return float(np.sum(breakdown.confidences * breakdown.nll_terms))


METRICS = {"nll": nll, "perplexity": perplexity, "cw_nll": cw_nll}


class Scorer:
    """Runs a checkpoint on token sequences and computes score breakdowns."""

    def __init__(self, checkpoint: Checkpoint):
        self.checkpoint = checkpoint
        self.model, self.h_ext = runtime_from_checkpoint(checkpoint)
        self.config = checkpoint.train_config()
        self.vocab = checkpoint.vocab
        v_eff = self.vocab.size - 2  # PAD and SOT are never predictable
        if v_eff < 2:
            raise ValueError("vocabulary too small to score")
        self.v_eff = v_eff
        self.h_max = float(np.log(np.float64(v_eff)))

    def breakdown(self, token_seq: TokenSeq) -> ScoreBreakdown:
        tokens = np.asarray(token_seq.tokens[: token_seq.true_length], dtype=np.int64)
        if len(tokens) < 2:
            raise ValueError("need at least one scored position after SOT")
        if tokens[0] != SOT:
            raise ValueError("sequence must start with SOT")
        if np.any(tokens >= self.vocab.size) or np.any(tokens < 0):
            raise ValueError("token outside the checkpoint vocabulary")
        if np.any(tokens[1:] == PAD) or np.any(tokens[1:] == SOT):
            raise ValueError("PAD/SOT cannot appear at scored positions")
        with ad.no_grad():
            logits = self.model.forward(tokens[:-1], self.h_ext)
        raw = logits.data.astype(np.float64)
        targets = tokens[1:]
        n = len(targets)
        terms = np.empty(n)
        entropies = np.empty(n)
        confidences = np.empty(n)
        for k in range(n):
            row = raw[k].copy()
            row[[PAD, SOT]] = -np.inf
            shifted = row - row.max()
            expd = np.exp(shifted)
            total = expd.sum()
            log_total = np.log(total)
            terms[k] = max(log_total - shifted[targets[k]], 0.0)
            probs = expd / total
            finite = np.isfinite(shifted)
            entropy = log_total - float(np.sum(probs[finite] * shifted[finite]))
            entropies[k] = entropy
            confidences[k] = min(max(1.0 - entropy / self.h_max, 0.0), 1.0)
        return ScoreBreakdown(
            nll_terms=terms,
            entropies=entropies,
            confidences=confidences,
            h_max=self.h_max,
            targets=targets.copy(),
        )

    def score_trajectory(self, trajectory: Trajectory) -> ScoreBreakdown:
        return self.breakdown(encode(trajectory, self.vocab))


def _scorer_for(checkpoint) -> Scorer:
    if isinstance(checkpoint, Scorer):
        return checkpoint
    cached = getattr(checkpoint, "_scorer", None)
    if cached is None:
        cached = Scorer(checkpoint)
        checkpoint._scorer = cached
    return cached


def token_scores(checkpoint, token_seq: TokenSeq) -> ScoreBreakdown:
    """Per-position scores for one encoded sequence."""
    return _scorer_for(checkpoint).breakdown(token_seq)


@dataclass
class StreamStep:
    """Result of consuming one more token during online scoring."""

    nll_term: float
    entropy: float
    confidence: float
    n: int
    running_nll: float
    running_perplexity: float
    running_cw_nll: float


def score_stream(checkpoint, prefix_tokens, next_token: int) -> StreamStep:
    """Score the next token given a prefix, with running aggregates.

    The running values equal the batch computation over the full extended
    prefix, so finishing a trajectory step by step reproduces the batch
    scores exactly.
    """
    scorer = _scorer_for(checkpoint)
    if scorer.config.use_gpe and scorer.config.gpe_horizon != "causal":
        raise ValueError(
            "online scoring requires a causal positional horizon; "
            "this checkpoint was trained with the full horizon"
        )
    prefix = [int(t) for t in prefix_tokens]
    if len(prefix) == 0:
        raise ValueError("empty prefix; streams start from [SOT]")
    if prefix[0] != SOT:
        raise ValueError("stream prefix must start with SOT")
    next_token = int(next_token)
    if not 0 <= next_token < scorer.vocab.size:
        raise ValueError(f"next token {next_token} outside the vocabulary")
    if next_token in (SOT, PAD):
        raise ValueError("cannot score a SOT/PAD transition")
    tokens = np.asarray(prefix + [next_token], dtype=np.int64)
    bd = scorer.breakdown(TokenSeq(tokens=tokens, true_length=len(tokens)))
    return StreamStep(
        nll_term=float(bd.nll_terms[-1]),
        entropy=float(bd.entropies[-1]),
        confidence=float(bd.confidences[-1]),
        n=bd.n,
        running_nll=nll(bd),
        running_perplexity=perplexity(bd),
        running_cw_nll=cw_nll(bd),
    )


# ---------------------------------------------------------------------------
# score records (JSONL)
# ---------------------------------------------------------------------------


def score_record(scorer: Scorer, trajectory: Trajectory, label: str | None = None,
                 per_token: bool = False) -> dict:
    bd = scorer.score_trajectory(trajectory)
    row = {
        "id": trajectory.id,
        "nll": nll(bd),
        "perplexity": perplexity(bd),
        "cw_nll": cw_nll(bd),
        "n": bd.n,
    }
    if label is not None:
        row["label"] = label
    if per_token:
        row["per_token"] = [
            {"l": float(l), "H": float(h), "c": float(c)}
            for l, h, c in zip(bd.nll_terms, bd.entropies, bd.confidences)
        ]
    return row


def write_scores(rows, path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_scores(path) -> list[dict]:
    rows: list[dict] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            rows.append(row)
    return rows
