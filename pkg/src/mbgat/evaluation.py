"""Top-K ranking evaluation: Recall@K and NDCG@K per behavior.

Recall divides hits by min(K, |test positives|), so Recall@K is not
monotone in K once a user has more test positives than K. Ties in scores
break toward the smaller item index; users without test positives for a
behavior are skipped, not zero-scored.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .graph import DataError, Interaction, MultiBehaviorGraph
from .model import (
    LayerOutput,
    ModelConfig,
    ModelParams,
    TemporalEncoder,
    forward,
    score_all_items,
)


@dataclass(frozen=True)
class EvalSpec:
    ks: tuple[int, ...] = (10, 50, 100)
    behaviors: tuple[str, ...] | None = None  # None means every behavior
    exclude_train_positives: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if not self.ks or any(k < 1 for k in self.ks):
            raise DataError(f"cutoffs must be positive, got {self.ks!r}")
        if self.behaviors is not None:
            object.__setattr__(self, "behaviors", tuple(self.behaviors))


def rank_items(
    user: int,
    behavior: int,
    out: LayerOutput,
    params: ModelParams,
    alpha: float,
    exclusions: Sequence[int] = (),
) -> np.ndarray:
    """Item ids in descending score order, excluded ids removed.

    Equal scores are ordered by ascending item index (stable sort over an
    ascending candidate list).
    """
    scores = score_all_items(user, behavior, out, params, alpha)
    num_items = scores.shape[0]
    if len(exclusions):
        keep = np.ones(num_items, dtype=bool)
        keep[np.asarray(list(exclusions), dtype=np.intp)] = False
        candidates = np.nonzero(keep)[0]
    else:
        candidates = np.arange(num_items, dtype=np.intp)
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order]


# items absent from the ranked list (e.g. excluded train positives) must never
# count as hits, whatever the cutoff
_MISSING_RANK = np.iinfo(np.int64).max


def _ranks_of(ranked: np.ndarray, positives: np.ndarray, num_items: int) -> np.ndarray:
    """1-based rank of each positive; absent items get a sentinel past any K."""
    inv = np.full(num_items, _MISSING_RANK, dtype=np.int64)
    inv[ranked] = np.arange(1, len(ranked) + 1)
    return inv[positives]


def recall_at_k(ranked: np.ndarray, positives: Sequence[int], k: int) -> float:
    """Hits in the top K over min(K, number of positives)."""
    positives = np.asarray(list(positives), dtype=np.intp)
    if len(positives) == 0:
        raise DataError("recall is undefined for an empty positive set")
    num_items = max(int(ranked.max(initial=-1)), int(positives.max())) + 1
    ranks = _ranks_of(np.asarray(ranked, dtype=np.intp), positives, num_items)
    hits = int(np.sum(ranks <= k))
    return hits / min(k, len(positives))


def ndcg_at_k(ranked: np.ndarray, positives: Sequence[int], k: int) -> float:
    """Binary-gain NDCG with the ideal DCG over min(K, positives) slots."""
    positives = np.asarray(list(positives), dtype=np.intp)
    if len(positives) == 0:
        raise DataError("ndcg is undefined for an empty positive set")
    num_items = max(int(ranked.max(initial=-1)), int(positives.max())) + 1
    ranks = _ranks_of(np.asarray(ranked, dtype=np.intp), positives, num_items)
    hit_ranks = ranks[ranks <= k]
    dcg = float(np.sum(1.0 / np.log2(hit_ranks + 1.0)))
    ideal_slots = np.arange(1, min(k, len(positives)) + 1)
    idcg = float(np.sum(1.0 / np.log2(ideal_slots + 1.0)))
    return dcg / idcg


class MetricsRow(NamedTuple):
    behavior: str
    k: int
    recall: float
    ndcg: float
    n_users: int


@dataclass
class MetricsTable:
    rows: list[MetricsRow]

    def get(self, behavior: str, k: int) -> MetricsRow:
        for row in self.rows:
            if row.behavior == behavior and row.k == k:
                return row
        raise KeyError((behavior, k))

    def to_json(self, path=None) -> str:
        payload = json.dumps([row._asdict() for row in self.rows], indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(payload + "\n")
        return payload

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["behavior", "k", "recall", "ndcg", "n_users"])
            for row in self.rows:
                writer.writerow([row.behavior, row.k, repr(row.recall), repr(row.ndcg), row.n_users])


def collect_positives(
    data: Sequence[Interaction] | MultiBehaviorGraph, num_behaviors: int
) -> dict[tuple[int, int], np.ndarray]:
    """Map (user, behavior) to the sorted unique positive item ids."""
    if isinstance(data, MultiBehaviorGraph):
        interactions = data.interactions()
    else:
        interactions = list(data)
    grouped: dict[tuple[int, int], set[int]] = {}
    for x in interactions:
        if not 0 <= x.behavior < num_behaviors:
            raise DataError(f"behavior index {x.behavior} out of range [0, {num_behaviors})")
        grouped.setdefault((x.user, x.behavior), set()).add(x.item)
    return {k: np.array(sorted(v), dtype=np.intp) for k, v in grouped.items()}


def evaluate(
    train_graph: MultiBehaviorGraph,
    test_data: Sequence[Interaction] | MultiBehaviorGraph,
    config: ModelConfig,
    params: ModelParams,
    spec: EvalSpec = EvalSpec(),
    temporal: TemporalEncoder | None = None,
    out: LayerOutput | None = None,
) -> MetricsTable:
    """Mean Recall@K / NDCG@K over users with test positives, per behavior.

    Representations are propagated over ``train_graph``; with exclusion on,
    each user's candidate list drops their train positives of the same
    behavior.
    """
    if out is None:
        out = forward(train_graph, config, params, temporal)
    test_pos = collect_positives(test_data, train_graph.num_behaviors)
    if spec.behaviors is None:
        targets = list(train_graph.behaviors)
    else:
        for name in spec.behaviors:
            if name not in train_graph.behaviors:
                raise DataError(f"unknown behavior '{name}' in eval spec")
        targets = list(spec.behaviors)

    rows: list[MetricsRow] = []
    for name in targets:
        b = train_graph.behaviors.index(name)
        users = sorted(u for (u, bb) in test_pos if bb == b)
        sums = {k: [0.0, 0.0] for k in spec.ks}
        n_users = 0
        for u in users:
            positives = test_pos[(u, b)]
            if u >= train_graph.num_users or positives.max() >= train_graph.num_items:
                # nodes unseen at train time cannot be scored; skip them
                continue
            exclusions = (
                train_graph.neighbors(u, "user", b) if spec.exclude_train_positives else ()
            )
            ranked = rank_items(u, b, out, params, config.alpha, exclusions)
            n_users += 1
            for k in spec.ks:
                sums[k][0] += recall_at_k(ranked, positives, k)
                sums[k][1] += ndcg_at_k(ranked, positives, k)
        for k in spec.ks:
            if n_users:
                rows.append(MetricsRow(name, k, sums[k][0] / n_users, sums[k][1] / n_users, n_users))
            else:
                rows.append(MetricsRow(name, k, float("nan"), float("nan"), 0))
    return MetricsTable(rows)
