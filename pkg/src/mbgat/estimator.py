"""scikit-learn style estimator facade over the training pipeline.

MBGATRecommender.fit consumes an interaction log (array-like rows of
user, item, behavior[, timestamp], a list of Interaction, or a prebuilt
graph), trains the attention model, and exposes ranking through predict /
score_items / recommend. Hyperparameters are plain constructor arguments so
get_params / set_params / clone compose with the sklearn ecosystem.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evaluation import EvalSpec, MetricsTable, evaluate
from .graph import DataError, Interaction, MultiBehaviorGraph, build_graph
from .model import ModelConfig, TemporalEncoder, forward, score
from .sampling import PriorityRank
from .training import TrainConfig, train


def validate_interactions(X, behaviors: Sequence[str]) -> list[Interaction]:
    """Coerce rows of (user, item, behavior[, timestamp]) to Interaction.

    Behaviors may be names from the vocabulary or integer indices.
    """
    b_index = {name: i for i, name in enumerate(behaviors)}
    out: list[Interaction] = []
    for row_no, row in enumerate(X):
        if isinstance(row, Interaction):
            out.append(row)
            continue
        row = tuple(row)
        if len(row) not in (3, 4):
            raise DataError(
                f"row {row_no}: expected (user, item, behavior[, timestamp]), got {row!r}"
            )
        u, i, b = row[0], row[1], row[2]
        if isinstance(b, str):
            if b not in b_index:
                raise DataError(f"row {row_no}: unknown behavior {b!r} (vocabulary {list(behaviors)})")
            b = b_index[b]
        b = int(b)
        if not 0 <= b < len(behaviors):
            raise DataError(f"row {row_no}: behavior index {b} out of range [0, {len(behaviors)})")
        u, i = int(u), int(i)
        if u < 0 or i < 0:
            raise DataError(f"row {row_no}: negative user or item id in {row!r}")
        t = None
        if len(row) == 4 and row[3] is not None:
            t = int(row[3])
        out.append(Interaction(u, i, b, t))
    return out


class MBGATRecommender(BaseEstimator):
    """Multi-behavior graph attention recommender.

    Parameters mirror the library configs; see ModelConfig / TrainConfig for
    semantics. ``priority_rank`` lists behaviors from highest to lowest for
    the hierarchy-aware negative sampling.
    """

    def __init__(
        self,
        dim: int = 32,
        num_layers: int = 2,
        paradigm: str = "intra",
        alpha: float = 0.5,
        use_temporal: bool = False,
        behaviors: tuple = ("view", "cart", "buy"),
        priority_rank: tuple = ("buy", "cart", "view"),
        learning_rate: float = 0.05,
        lambda_reg: float = 1e-4,
        epochs: int = 10,
        batch_size: int = 1024,
        n_negatives: int = 1,
        seed: int = 0,
    ):
        self.dim = dim
        self.num_layers = num_layers
        self.paradigm = paradigm
        self.alpha = alpha
        self.use_temporal = use_temporal
        self.behaviors = behaviors
        self.priority_rank = priority_rank
        self.learning_rate = learning_rate
        self.lambda_reg = lambda_reg
        self.epochs = epochs
        self.batch_size = batch_size
        self.n_negatives = n_negatives
        self.seed = seed

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this MBGATRecommender is not fitted yet; call fit before ranking"
            )

    def fit(self, X, y=None):
        """Train on an interaction log (rows, Interactions, or a graph)."""
        if isinstance(X, MultiBehaviorGraph):
            graph = X
        else:
            interactions = validate_interactions(X, self.behaviors)
            if not interactions:
                raise DataError("cannot fit on an empty interaction log")
            num_users = 1 + max(x.user for x in interactions)
            num_items = 1 + max(x.item for x in interactions)
            graph = build_graph(interactions, num_users, num_items, self.behaviors)
        config = ModelConfig(
            dim=self.dim,
            num_layers=self.num_layers,
            paradigm=self.paradigm,
            alpha=self.alpha,
            use_temporal=self.use_temporal,
            behaviors=tuple(self.behaviors),
        )
        tconfig = TrainConfig(
            learning_rate=self.learning_rate,
            lambda_reg=self.lambda_reg,
            epochs=self.epochs,
            batch_size=self.batch_size,
            n_negatives=self.n_negatives,
            seed=self.seed,
        )
        rank = PriorityRank(tuple(self.priority_rank))
        result = train(graph, config, tconfig, rank)
        self.graph_ = graph
        self.config_ = config
        self.params_ = result.params
        self.report_ = result.report
        self.temporal_ = TemporalEncoder(graph, config.dim) if config.use_temporal else None
        self.output_ = forward(graph, config, self.params_, self.temporal_)
        return self

    def predict(self, X) -> np.ndarray:
        """Scores f(u, b, i) for rows of (user, behavior, item)."""
        self._check_fitted()
        scores = []
        for row_no, row in enumerate(X):
            u, b, i = tuple(row)
            if isinstance(b, str):
                if b not in self.behaviors:
                    raise DataError(f"row {row_no}: unknown behavior {b!r}")
                b = self.behaviors.index(b)
            scores.append(score(int(u), int(b), int(i), self.output_, self.params_, self.alpha))
        return np.array(scores)

    def score_items(self, user: int, behavior) -> np.ndarray:
        """All item scores for one (user, behavior)."""
        self._check_fitted()
        if isinstance(behavior, str):
            behavior = self.behaviors.index(behavior)
        from .model import score_all_items

        return score_all_items(int(user), int(behavior), self.output_, self.params_, self.alpha)

    def recommend(self, user: int, behavior, k: int = 10, exclude_seen: bool = True) -> np.ndarray:
        """Top-k item ids; by default items the user already has under that
        behavior are excluded."""
        self._check_fitted()
        if isinstance(behavior, str):
            behavior = self.behaviors.index(behavior)
        from .evaluation import rank_items

        exclusions = (
            self.graph_.neighbors(int(user), "user", int(behavior)) if exclude_seen else ()
        )
        ranked = rank_items(int(user), int(behavior), self.output_, self.params_,
                            self.alpha, exclusions)
        return ranked[:k]

    def evaluate(self, X_test, ks=(10, 50, 100), exclude_train_positives: bool = True) -> MetricsTable:
        """Recall@K / NDCG@K of the fitted model against held-out interactions."""
        self._check_fitted()
        test = validate_interactions(X_test, self.behaviors)
        spec = EvalSpec(ks=tuple(ks), exclude_train_positives=exclude_train_positives)
        return evaluate(self.graph_, test, self.config_, self.params_, spec,
                        self.temporal_, out=self.output_)
