"""Scikit-learn style outlier-detector facade over the training and
scoring pipeline.

Fit on normal trajectories for a road network, then score new ones;
`score_samples` follows the sklearn convention that larger values mean
more normal, so it returns the negated anomaly score.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin

from .anomaly_scores import METRICS, Scorer
from .road_graph import RoadNetwork, build_features, transition_stats, validate_trajectory
from .train_engine import TrainConfig, train
from .trajectory_store import Trajectory


def _as_trajectories(X) -> list[Trajectory]:
    """Accept Trajectory objects or plain segment-id sequences."""
    out: list[Trajectory] = []
    for i, item in enumerate(X):
        if isinstance(item, Trajectory):
            out.append(item)
        else:
            segments = [int(s) for s in item]
            out.append(Trajectory(id=f"x{i}", segments=segments))
    if not out:
        raise ValueError("need at least one trajectory")
    return out


def _check_on_network(network: RoadNetwork, trajectories: list[Trajectory]) -> None:
    for traj in trajectories:
        problems = validate_trajectory(network, traj.segments)
        if problems:
            raise ValueError(f"trajectory {traj.id}: {problems[0]}")


class GetadDetector(BaseEstimator, OutlierMixin):
    """Trajectory anomaly detector over a fixed road network.

    Parameters mirror the training configuration; `contamination` sets the
    decision threshold at that quantile of the training scores.
    """

    def __init__(self, network: RoadNetwork = None, *, scoring: str = "cw_nll",
                 contamination: float = 0.05, epochs: int = 15, batch_size: int = 32,
                 lr: float = 1e-3, d_model: int = 64, gat_layers: int = 2,
                 gat_heads: int = 4, decoder_layers: int = 2, decoder_heads: int = 4,
                 d_ff: int = 256, d_max: int = 8, use_gat: bool = True,
                 use_gpe: bool = True, use_rpe: bool = False, use_link_loss: bool = True,
                 lambda_ce: float = 1.0, lambda_link: float = 1.0, neg_ratio: int = 1,
                 max_len: int = 512, random_state: int = 0):
        self.network = network
        self.scoring = scoring
        self.contamination = contamination
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.d_model = d_model
        self.gat_layers = gat_layers
        self.gat_heads = gat_heads
        self.decoder_layers = decoder_layers
        self.decoder_heads = decoder_heads
        self.d_ff = d_ff
        self.d_max = d_max
        self.use_gat = use_gat
        self.use_gpe = use_gpe
        self.use_rpe = use_rpe
        self.use_link_loss = use_link_loss
        self.lambda_ce = lambda_ce
        self.lambda_link = lambda_link
        self.neg_ratio = neg_ratio
        self.max_len = max_len
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            d_model=self.d_model,
            gat_layers=self.gat_layers,
            gat_heads=self.gat_heads,
            decoder_layers=self.decoder_layers,
            decoder_heads=self.decoder_heads,
            d_ff=self.d_ff,
            d_max=self.d_max,
            use_gat=self.use_gat,
            use_gpe=self.use_gpe,
            use_rpe=self.use_rpe,
            use_link_loss=self.use_link_loss,
            lambda_ce=self.lambda_ce,
            lambda_link=self.lambda_link,
            neg_ratio=self.neg_ratio,
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            max_len=self.max_len,
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        """Train on normal trajectories (lists of segment ids or Trajectory)."""
        if self.network is None:
            raise ValueError("a RoadNetwork is required")
        if self.scoring not in METRICS:
            raise ValueError(f"scoring must be one of {sorted(METRICS)}")
        if not 0.0 < self.contamination < 0.5:
            raise ValueError("contamination must be in (0, 0.5)")
        trajectories = _as_trajectories(X)
        _check_on_network(self.network, trajectories)
        stats = transition_stats(self.network, trajectories)
        features = build_features(self.network, stats, trajectories)
        self.checkpoint_ = train(trajectories, self.network, features, stats,
                                 self._train_config())
        self.scorer_ = Scorer(self.checkpoint_)
        train_scores = self._anomaly_scores(trajectories)
        # sklearn convention: decision_function < 0 marks outliers.
        self.offset_ = float(np.quantile(-train_scores, self.contamination))
        return self

    def _anomaly_scores(self, trajectories: list[Trajectory]) -> np.ndarray:
        metric = METRICS[self.scoring]
        return np.asarray(
            [metric(self.scorer_.score_trajectory(t)) for t in trajectories]
        )

    def score_samples(self, X) -> np.ndarray:
        """Negated anomaly score; larger is more normal."""
        if not hasattr(self, "scorer_"):
            raise ValueError("detector is not fitted")
        trajectories = _as_trajectories(X)
        return -self._anomaly_scores(trajectories)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        """+1 for normal, -1 for anomalous."""
        return np.where(self.decision_function(X) < 0, -1, 1)
