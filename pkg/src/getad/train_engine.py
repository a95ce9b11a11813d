"""Joint training of the segment encoder and trajectory decoder.

The objective combines next-token cross-entropy with a link-prediction
loss on segment embeddings; both are recomputed against the full graph
every optimizer step so gradients reach the encoder through either path.
Checkpoints are fully self-contained: scoring needs no other artifact.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_FILL, Tensor
from .gat_encoder import (GatConfig, GatParams, encode_segments, init_gat_params,
                          prepare_edges)
from .graph_pos_enc import (GpeParams, RpeParams, entries_for_tokens, gpe,
                            init_gpe_params, init_rpe_params, pairwise_hops, rpe_bias)
from .road_graph import HopIndex, RoadNetwork
from .traj_decoder import (DecoderConfig, DecoderParams, decode, embed_inputs,
                           init_decoder_params)
from .trajectory_store import (N_SPECIAL, PAD, SOT, Vocab, build_vocab, encode,
                               make_batches)

logger = logging.getLogger("getad.train")

CHECKPOINT_MAGIC = b"GETADCKPT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Flat hyperparameter record; every key is addressable from config files."""

    d_model: int = 64
    gat_layers: int = 2
    gat_heads: int = 4
    gat_activation: str = "elu"
    decoder_layers: int = 2
    decoder_heads: int = 4
    d_ff: int = 256
    dropout: float = 0.0
    d_max: int = 8
    gpe_horizon: str = "causal"
    gpe_aggregation: str = "sum"
    rpe_clip: int = 16
    use_gat: bool = True
    use_gpe: bool = True
    use_rpe: bool = False
    use_link_loss: bool = True
    lambda_ce: float = 1.0
    lambda_link: float = 1.0
    neg_ratio: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    epochs: int = 15
    batch_size: int = 32
    max_len: int = 512
    seed: int = 0
    min_segments: int = 1
    min_agent_trajs: int = 0

    def __post_init__(self):
        if self.use_gpe and self.use_rpe:
            raise ValueError("relative position bias is a fallback; disable use_gpe first")
        if self.lambda_ce < 0 or self.lambda_link < 0:
            raise ValueError("loss weights must be non-negative")
        if self.neg_ratio < 1:
            raise ValueError("neg_ratio must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.max_len < 3:
            raise ValueError("bad training schedule")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def gat_config(self) -> GatConfig:
        return GatConfig(
            layers=self.gat_layers,
            heads=self.gat_heads,
            d_model=self.d_model,
            activation=self.gat_activation,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            layers=self.decoder_layers,
            heads=self.decoder_heads,
            d_model=self.d_model,
            d_ff=self.d_ff,
            dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_strings(cls, raw: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from string key=value pairs, coercing to field types."""
        base_dict = (base or cls()).to_dict()
        by_name = {f.name: f for f in fields(cls)}
        for key, value in raw.items():
            if key not in by_name:
                raise ValueError(f"unknown config key: {key}")
            base_dict[key] = _coerce_value(by_name[key].type, value, key)
        return cls(**base_dict)


def _coerce_value(field_type, value: str, key: str):
    if isinstance(value, (bool, int, float)):
        return value
    text = str(value).strip()
    if field_type in (bool, "bool"):
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {text!r}")
    if field_type in (int, "int"):
        return int(text)
    if field_type in (float, "float"):
        return float(text)
    return text


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    specials: Tensor  # (3, d_model) learned SOT/EOT/PAD embeddings
    decoder: DecoderParams
    gat: GatParams | None = None
    plain_segments: Tensor | None = None  # used instead of the GAT when disabled
    gpe: GpeParams | None = None
    rpe: RpeParams | None = None

    def named(self):
        if self.gat is not None:
            yield from self.gat.named("gat")
        yield "token_embed/specials", self.specials
        if self.plain_segments is not None:
            yield "token_embed/segments", self.plain_segments
        if self.gpe is not None:
            yield from self.gpe.named("gpe")
        if self.rpe is not None:
            yield from self.rpe.named("rpe")
        yield from self.decoder.named("decoder")

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def init_model_params(rng: np.random.Generator, config: TrainConfig, d_in: int,
                      vocab_size: int, n_net_segments: int) -> ModelParams:
    gat = init_gat_params(rng, d_in, config.gat_config()) if config.use_gat else None
    plain = None
    if not config.use_gat:
        plain = ad.parameter(rng.normal(0.0, 0.02, size=(n_net_segments, config.d_model)))
    specials = ad.parameter(rng.normal(0.0, 0.02, size=(N_SPECIAL, config.d_model)))
    gpe_params = None
    if config.use_gpe:
        gpe_params = init_gpe_params(rng, config.d_model, d_max=config.d_max,
                                     horizon=config.gpe_horizon,
                                     aggregation=config.gpe_aggregation)
    rpe_params = init_rpe_params(rng, clip=config.rpe_clip) if config.use_rpe else None
    decoder = init_decoder_params(rng, config.decoder_config(), vocab_size)
    return ModelParams(specials=specials, decoder=decoder, gat=gat,
                       plain_segments=plain, gpe=gpe_params, rpe=rpe_params)


# ---------------------------------------------------------------------------
# sequence model (shared by training and scoring)
# ---------------------------------------------------------------------------


class SequenceModel:
    """Maps an input token sequence to next-token logits."""

    def __init__(self, params: ModelParams, config: TrainConfig, vocab: Vocab,
                 token_net_row: np.ndarray, hop_index: HopIndex | None):
        self.params = params
        self.config = config
        self.vocab = vocab
        self.token_net_row = token_net_row  # token id -> dense segment row, -1 for specials
        self.hop_index = hop_index
        self.decoder_config = config.decoder_config()
        # Token id -> row in concat([specials, segment matrix]).
        concat_rows = np.where(token_net_row >= 0, token_net_row + N_SPECIAL,
                               np.arange(len(token_net_row)))
        self.concat_rows = concat_rows.astype(np.int64)

    def embedding_table(self, h: Tensor) -> Tensor:
        return ad.concat([self.params.specials, h], axis=0)

    def forward(self, input_tokens: np.ndarray, h_ext: Tensor,
                train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        input_tokens = np.asarray(input_tokens, dtype=np.int64)
        token_rows = ad.gather(h_ext, self.concat_rows[input_tokens])
        positional = None
        if self.params.gpe is not None:
            entries = entries_for_tokens(input_tokens, self.vocab,
                                         _RowLookup(self.token_net_row, self.vocab))
            distances = pairwise_hops(entries, self.hop_index, self.params.gpe.d_max)
            positional = gpe(entries, distances, self.params.gpe)
        z = embed_inputs(input_tokens, token_rows, positional)
        bias = None
        if self.params.rpe is not None:
            bias = rpe_bias(len(input_tokens), self.params.rpe)
        return decode(z, self.params.decoder, self.decoder_config, attn_bias=bias,
                      rng=rng, train=train)


class _RowLookup:
    """dict-like view mapping segment id -> dense row via the token table."""

    def __init__(self, token_net_row: np.ndarray, vocab: Vocab):
        self._rows = token_net_row
        self._vocab = vocab

    def __getitem__(self, segment_id: int) -> int:
        token = self._vocab.token(segment_id)
        if token is None:
            raise KeyError(segment_id)
        return int(self._rows[token])


def token_row_map(vocab: Vocab, index_of_segment: dict[int, int]) -> np.ndarray:
    rows = np.full(vocab.size, -1, dtype=np.int64)
    for token in range(N_SPECIAL, vocab.size):
        rows[token] = index_of_segment[vocab.segment(token)]
    return rows


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def ce_loss(logits: Tensor, targets, pad_token: int = PAD,
            masked_tokens=(SOT, PAD)) -> tuple[Tensor, int]:
    """Summed next-token NLL over non-PAD positions.

    The masked tokens are removed from the softmax support, matching the
    distribution used at scoring time.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab_size = logits.data.shape[1]
    col_mask = np.zeros(vocab_size, dtype=bool)
    col_mask[list(masked_tokens)] = True
    masked = ad.masked_fill(logits, np.broadcast_to(col_mask, logits.data.shape), NEG_FILL)
    weights = (targets != pad_token).astype(logits.dtype)
    n_positions = int(weights.sum())
    if n_positions == 0:
        raise ValueError("no unmasked target positions")
    loss = ad.cross_entropy(masked, targets, position_weights=weights)
    return loss, n_positions


@dataclass
class LinkSample:
    positives: np.ndarray  # (P, 2) dense index pairs
    negatives: np.ndarray  # (Q, 2)

    @property
    def pairs(self) -> np.ndarray:
        return np.concatenate([self.positives, self.negatives], axis=0)

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate(
            [np.ones(len(self.positives)), np.zeros(len(self.negatives))]
        )


def sample_link_pairs(network: RoadNetwork, rng: np.random.Generator,
                      neg_ratio: int = 1, max_positives: int = 50000) -> LinkSample:
    """All edges as positives (subsampled above max_positives) plus uniform
    non-adjacent ordered pairs as negatives."""
    positives = network.adjacency_index_pairs()
    n = network.n_segments
    n_non_edges = n * (n - 1) - len(positives)
    if n_non_edges < 1:
        raise ValueError("graph is complete; no negative pairs exist")
    if len(positives) > max_positives:
        keep = rng.choice(len(positives), size=max_positives, replace=False)
        positives = positives[np.sort(keep)]
    edge_set = {(int(u), int(v)) for u, v in positives} | network_adjacency_index_set(network)
    wanted = neg_ratio * len(positives)
    negatives: list[tuple[int, int]] = []
    while len(negatives) < wanted:
        draw = max(16, 2 * (wanted - len(negatives)))
        us = rng.integers(0, n, size=draw)
        vs = rng.integers(0, n, size=draw)
        for u, v in zip(us, vs):
            u, v = int(u), int(v)
            if u != v and (u, v) not in edge_set:
                negatives.append((u, v))
                if len(negatives) == wanted:
                    break
    return LinkSample(positives=positives,
                      negatives=np.asarray(negatives, dtype=np.int64).reshape(-1, 2))


def network_adjacency_index_set(network: RoadNetwork) -> set[tuple[int, int]]:
    return {
        (network.index_of[u], network.index_of[v]) for u, v in network.adjacency
    }


def link_loss(embeddings: Tensor, pairs: np.ndarray, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on inner products of embedding pairs."""
    if len(pairs) == 0:
        raise ValueError("no link pairs supplied")
    left = ad.gather(embeddings, pairs[:, 0])
    right = ad.gather(embeddings, pairs[:, 1])
    scores = ad.inner_product(left, right, axis=-1)
    return ad.mean_(ad.bce_with_logits(scores, labels))


def total_loss(ce: Tensor | None, link: Tensor | None, config: TrainConfig) -> Tensor:
    terms = []
    if ce is not None:
        terms.append(ad.mul(ce, config.lambda_ce))
    if link is not None:
        terms.append(ad.mul(link, config.lambda_link))
    if not terms:
        raise ValueError("no loss terms")
    return terms[0] if len(terms) == 1 else ad.add_n(terms)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]
        self._t = [0] * len(params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._t[i] += 1
            t = self._t[i]
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / (1.0 - self.beta1**t)
            v_hat = self._v[i] / (1.0 - self.beta2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    vocab: Vocab
    class_names: list[str]
    segment_ids: list[int]
    adjacency: list[tuple[int, int]]  # dense index pairs
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    directory = []
    offset = 0
    blobs = []
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    header = {
        "config": ckpt.config,
        "vocab_segments": list(map(int, ckpt.vocab.segment_ids)),
        "class_names": list(ckpt.class_names),
        "segment_ids": list(map(int, ckpt.segment_ids)),
        "adjacency": [[int(u), int(v)] for u, v in ckpt.adjacency],
        "tensors": directory,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return Checkpoint(
        config=header["config"],
        vocab=Vocab(segment_ids=tuple(header["vocab_segments"])),
        class_names=list(header["class_names"]),
        segment_ids=[int(s) for s in header["segment_ids"]],
        adjacency=[(int(u), int(v)) for u, v in header["adjacency"]],
        tensors=tensors,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _true_length(row: np.ndarray) -> int:
    return int(np.count_nonzero(row != PAD))


def train(dataset, network: RoadNetwork, features, stats, config: TrainConfig,
          vocab: Vocab | None = None) -> Checkpoint:
    """Train on normal trajectories and return a self-contained checkpoint."""
    if vocab is None:
        vocab = build_vocab(dataset)
    token_seqs = [encode(t, vocab) for t in dataset]
    if not token_seqs:
        raise ValueError("empty training dataset")

    feat = features.values if hasattr(features, "values") else np.asarray(features)
    init_rng = np.random.default_rng([config.seed, 0])
    params = init_model_params(init_rng, config, d_in=feat.shape[1],
                               vocab_size=vocab.size, n_net_segments=network.n_segments)
    gat_config = config.gat_config()
    edges = prepare_edges(network, stats, self_loops=gat_config.self_loops) if config.use_gat else None
    hop_index = network.hop_index(config.d_max) if config.use_gpe else None
    rows = token_row_map(vocab, network.index_of)
    model = SequenceModel(params, config, vocab, rows, hop_index)

    feat_tensor = Tensor(feat.astype(np.float32))
    trainable = params.trainable()
    optimizer = Adam(trainable, lr=config.lr, beta1=config.beta1,
                     beta2=config.beta2, eps=config.adam_eps)
    dropout_rng = np.random.default_rng([config.seed, 3])

    def segment_matrix() -> Tensor:
        if config.use_gat:
            return encode_segments(network, feat_tensor, stats, params.gat,
                                   gat_config, edges=edges)
        return params.plain_segments

    step = 0
    for epoch in range(config.epochs):
        batches = make_batches(token_seqs, config.batch_size, config.max_len,
                               seed=[config.seed, 1, epoch])
        link_sample = None
        if config.use_link_loss:
            link_rng = np.random.default_rng([config.seed, 2, epoch])
            link_sample = sample_link_pairs(network, link_rng, neg_ratio=config.neg_ratio)
        epoch_ce = 0.0
        epoch_positions = 0
        for batch in batches:
            optimizer.zero_grad()
            h = segment_matrix()
            h_ext = model.embedding_table(h)
            seq_losses = []
            for row in batch:
                true_len = _true_length(row)
                tokens = row[:true_len]
                logits = model.forward(tokens[:-1], h_ext, train=True, rng=dropout_rng)
                loss_sum, n_pos = ce_loss(logits, tokens[1:])
                seq_losses.append(loss_sum)
                epoch_ce += float(loss_sum.data)
                epoch_positions += n_pos
            ce_mean = ad.mul(ad.add_n(seq_losses), 1.0 / len(seq_losses))
            link = None
            if link_sample is not None:
                link = link_loss(h, link_sample.pairs, link_sample.labels)
            loss = total_loss(ce_mean, link, config)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: ce={float(ce_mean.data)!r}, "
                    f"link={None if link is None else float(link.data)!r}"
                )
            loss.backward()
            ad.clip_grad_norm(trainable, config.clip_norm)
            optimizer.step()
            step += 1
        logger.info(
            "epoch %d: mean token NLL %.4f over %d positions",
            epoch, epoch_ce / max(epoch_positions, 1), epoch_positions,
        )

    with ad.no_grad():
        final_h = segment_matrix()
    tensors = {name: t.data.copy() for name, t in params.named()}
    tensors["segment_embeddings"] = final_h.data.astype(np.float32)
    return Checkpoint(
        config=config.to_dict(),
        vocab=vocab,
        class_names=list(network.class_names),
        segment_ids=[int(s) for s in network.ids],
        adjacency=[(int(u), int(v)) for u, v in network.adjacency_index_pairs()],
        tensors=tensors,
    )


# ---------------------------------------------------------------------------
# checkpoint -> runnable model
# ---------------------------------------------------------------------------


def runtime_from_checkpoint(ckpt: Checkpoint) -> tuple[SequenceModel, Tensor]:
    """Rebuild the scoring model: (sequence model, combined embedding table)."""
    config = ckpt.train_config()
    vocab = ckpt.vocab
    throwaway = np.random.default_rng(0)
    # Scoring never re-runs the graph encoder; the stored segment matrix is
    # the source of truth, so GAT parameters are not reconstructed.
    scoring_config = dataclasses.replace(config, use_gat=False)
    params = init_model_params(throwaway, scoring_config, d_in=1,
                               vocab_size=vocab.size,
                               n_net_segments=len(ckpt.segment_ids))
    params.plain_segments = None
    for name, tensor in params.named():
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        loaded = ckpt.tensors[name]
        if loaded.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {loaded.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = loaded.copy()
        tensor.requires_grad = False
    if "segment_embeddings" not in ckpt.tensors:
        raise ValueError("checkpoint is missing tensor 'segment_embeddings'")
    h = Tensor(ckpt.tensors["segment_embeddings"].copy())

    hop_index = None
    if config.use_gpe:
        neighbors: list[list[int]] = [[] for _ in ckpt.segment_ids]
        for u, v in ckpt.adjacency:
            neighbors[u].append(v)
        hop_index = HopIndex([sorted(set(ns)) for ns in neighbors], config.d_max)
    index_of = {sid: i for i, sid in enumerate(ckpt.segment_ids)}
    rows = token_row_map(vocab, index_of)
    model = SequenceModel(params, config, vocab, rows, hop_index)
    with ad.no_grad():
        h_ext = model.embedding_table(h)
    return model, h_ext
