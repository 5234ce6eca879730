"""Hierarchy-aware triple sampling and kernel-based sub-graph sampling.

Negatives for (u, b) exclude u's positives under b and under every behavior
that outranks b: once a user acted at a higher level on an item, that item
cannot serve as a negative for the lower levels. Sub-graphs grow per
behavior from a kernel user set (full one-hop items, then fanout-capped
expansion), keep every full-graph edge between retained nodes, and restrict
positives to kernel edges.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .graph import DataError, Interaction, MultiBehaviorGraph, load_graph, save_graph


@dataclass(frozen=True)
class PriorityRank:
    """Total order over a subset of behaviors, highest priority first.

    Behaviors missing from the order are the lowest level and mutually
    unordered: every listed behavior outranks them, they outrank nothing.
    """

    order: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        if len(set(self.order)) != len(self.order):
            raise DataError(f"priority order has duplicates: {self.order!r}")

    def resolve(self, behaviors: Sequence[str]) -> list[frozenset[int]]:
        """Per behavior id, the set of behavior ids strictly outranking it."""
        behaviors = tuple(behaviors)
        index = {name: i for i, name in enumerate(behaviors)}
        for name in self.order:
            if name not in index:
                raise DataError(f"rank lists unknown behavior '{name}' (vocabulary {list(behaviors)})")
        listed_ids = [index[name] for name in self.order]
        higher: list[frozenset[int]] = []
        for b, name in enumerate(behaviors):
            if name in self.order:
                k = self.order.index(name)
                higher.append(frozenset(index[n] for n in self.order[:k]))
            else:
                # unlisted behaviors sit below every listed one
                higher.append(frozenset(listed_ids))
        return higher


class HbprTriple(NamedTuple):
    user: int
    behavior: int
    pos_item: int
    neg_item: int


@dataclass
class TripleBatch:
    triples: list[HbprTriple]
    skipped_pairs: int          # (u, b) pairs dropped for lack of compatible negatives
    counts: dict[int, int]      # emitted triples per behavior id

    def __len__(self) -> int:
        return len(self.triples)


def compatible_negatives(
    graph: MultiBehaviorGraph,
    user: int,
    behavior: int,
    rank: PriorityRank,
    item_pool: np.ndarray | None = None,
) -> np.ndarray:
    """Sorted item ids usable as negatives for (user, behavior)."""
    higher = rank.resolve(graph.behaviors)[behavior]
    if item_pool is None:
        pool = np.arange(graph.num_items, dtype=np.intp)
    else:
        pool = np.asarray(item_pool, dtype=np.intp)
    excluded = graph.neighbors(user, "user", behavior)
    for hb in sorted(higher):
        excluded = np.union1d(excluded, graph.neighbors(user, "user", hb))
    return np.setdiff1d(pool, excluded, assume_unique=False)


def _group_pool(pool: Iterable[tuple[int, int, int]]) -> dict[tuple[int, int], list[int]]:
    grouped: dict[tuple[int, int], list[int]] = {}
    for u, b, i in pool:
        grouped.setdefault((u, b), []).append(i)
    return grouped


def _negatives_per_behavior(n_negatives, behaviors: Sequence[str]) -> list[int]:
    if isinstance(n_negatives, Mapping):
        out = []
        for name in behaviors:
            n = int(n_negatives.get(name, 0))
            if n < 0:
                raise DataError(f"negative count for '{name}' must be >= 0, got {n}")
            out.append(n)
        return out
    n = int(n_negatives)
    if n < 1:
        raise DataError(f"n_negatives must be >= 1, got {n}")
    return [n] * len(behaviors)


def sample_hbpr_triples(
    graph: MultiBehaviorGraph,
    rank: PriorityRank,
    n_negatives=1,
    seed: int = 0,
    positive_pool: Iterable[tuple[int, int, int]] | None = None,
    negative_items: np.ndarray | None = None,
    salt: int = 0,
) -> TripleBatch:
    """Emit (u, b, i+, i-) triples with uniform-with-replacement negatives.

    ``n_negatives`` is an int or a per-behavior-name mapping. The RNG stream
    is derived per (seed, salt, user, behavior), so restricting the positive
    pool never changes the negatives drawn for the surviving pairs.
    ``positive_pool`` restricts which (u, b, i) edges yield positives;
    ``negative_items`` restricts the candidate negative item set. Pairs with
    no compatible negatives are skipped and counted.
    """
    per_b = _negatives_per_behavior(n_negatives, graph.behaviors)
    grouped = _group_pool(positive_pool) if positive_pool is not None else None
    higher_sets = rank.resolve(graph.behaviors)

    triples: list[HbprTriple] = []
    skipped = 0
    counts = {b: 0 for b in range(graph.num_behaviors)}
    if grouped is not None:
        pairs = sorted(grouped)
    else:
        pairs = [
            (u, b)
            for u in range(graph.num_users)
            for b in range(graph.num_behaviors)
            if len(graph.neighbors(u, "user", b))
        ]
    for u, b in pairs:
        if per_b[b] == 0:
            continue
        if grouped is not None:
            positives = np.unique(np.asarray(grouped[(u, b)], dtype=np.intp))
        else:
            positives = graph.neighbors(u, "user", b)
        if len(positives) == 0:
            continue
        negatives_pool = compatible_negatives(graph, u, b, rank, negative_items)
        if len(negatives_pool) == 0:
            skipped += 1
            continue
        rng = np.random.default_rng([seed, salt, u, b])
        draws = rng.integers(0, len(negatives_pool), size=len(positives) * per_b[b])
        j = 0
        for i_pos in positives:
            for _ in range(per_b[b]):
                triples.append(HbprTriple(int(u), int(b), int(i_pos), int(negatives_pool[draws[j]])))
                j += 1
        counts[b] += len(positives) * per_b[b]
    return TripleBatch(triples=triples, skipped_pairs=skipped, counts=counts)


def triples_to_arrays(triples: Sequence[HbprTriple]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    users = np.array([t.user for t in triples], dtype=np.intp)
    behaviors = np.array([t.behavior for t in triples], dtype=np.intp)
    pos = np.array([t.pos_item for t in triples], dtype=np.intp)
    neg = np.array([t.neg_item for t in triples], dtype=np.intp)
    return users, behaviors, pos, neg


def dump_triples_csv(triples: Sequence[HbprTriple], behaviors: Sequence[str], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "behavior", "pos_item", "neg_item"])
        for t in triples:
            writer.writerow([t.user, behaviors[t.behavior], t.pos_item, t.neg_item])


# ---------------------------------------------------------------------------
# sub-graph sampling


@dataclass
class SubGraph:
    """Induced sub-graph plus the kernel that seeded it.

    ``graph`` keeps the parent's index spaces; nodes outside the retained
    sets simply have empty neighborhoods. ``kernel_edges`` are the parent
    edges between kernel users and kernel items (any behavior); positives for
    training come from there.
    """

    graph: MultiBehaviorGraph
    users: np.ndarray
    items: np.ndarray
    kernel_users: np.ndarray
    kernel_items: np.ndarray
    kernel_edges: list[tuple[int, int, int]]  # (user, behavior, item)
    parent_edge_counts: dict[str, int]

    def __post_init__(self):
        users = set(self.users.tolist())
        items = set(self.items.tolist())
        if not set(self.kernel_users.tolist()) <= users:
            raise DataError("kernel users escape the retained user set")
        if not set(self.kernel_items.tolist()) <= items:
            raise DataError("kernel items escape the retained item set")
        for u, b, i in self.kernel_edges:
            if u not in users or i not in items:
                raise DataError(f"kernel edge ({u}, {b}, {i}) escapes the retained node sets")

    @property
    def num_nodes(self) -> int:
        return len(self.users) + len(self.items)


def _resolve_fanout(fanout, behaviors: Sequence[str]) -> list[int]:
    if isinstance(fanout, Mapping):
        out = []
        for name in behaviors:
            f = int(fanout.get(name, 0))
            if f < 1:
                raise DataError(f"fanout for '{name}' must be >= 1, got {f}")
            out.append(f)
        return out
    f = int(fanout)
    if f < 1:
        raise DataError(f"fanout must be >= 1, got {f}")
    return [f] * len(behaviors)


def sample_subgraph(
    graph: MultiBehaviorGraph,
    kernel_users: Sequence[int],
    hops: int = 2,
    fanout=10,
    seed: int = 0,
) -> SubGraph:
    """Kernel-seeded layered expansion, one traversal per behavior.

    Hop 1 takes every one-hop item of the kernel users in that behavior (the
    kernel items, uncapped); further hops alternate sides and cap each node's
    newly sampled neighbors at the per-behavior fanout. The final node set is
    the union over behaviors; all parent edges between retained nodes are
    kept.
    """
    if hops < 1:
        raise DataError(f"hops must be >= 1, got {hops}")
    kernel = np.unique(np.asarray(list(kernel_users), dtype=np.intp))
    if len(kernel) == 0:
        raise DataError("kernel user set is empty")
    if kernel.min() < 0 or kernel.max() >= graph.num_users:
        raise DataError(f"kernel user id out of range [0, {graph.num_users})")
    fanouts = _resolve_fanout(fanout, graph.behaviors)

    retained_users: set[int] = set(kernel.tolist())
    retained_items: set[int] = set()
    kernel_items_all: set[int] = set()

    for b in range(graph.num_behaviors):
        rng = np.random.default_rng([seed, b])
        users_b: set[int] = set(kernel.tolist())
        items_b: set[int] = set()
        # hop 1: full one-hop item neighborhood of the kernel
        frontier: set[int] = set()
        for u in kernel.tolist():
            frontier.update(graph.neighbors(u, "user", b).tolist())
        items_b |= frontier
        kernel_items_all |= frontier
        side = "item"
        for _hop in range(2, hops + 1):
            nxt: set[int] = set()
            for node in sorted(frontier):
                nbrs = graph.neighbors(node, side, b)
                if len(nbrs) > fanouts[b]:
                    nbrs = rng.choice(nbrs, size=fanouts[b], replace=False)
                nxt.update(int(x) for x in nbrs)
            if side == "item":
                nxt -= users_b
                users_b |= nxt
                side = "user"
            else:
                nxt -= items_b
                items_b |= nxt
                side = "item"
            frontier = nxt
            if not frontier:
                break
        retained_users |= users_b
        retained_items |= items_b

    ru = np.array(sorted(retained_users), dtype=np.intp)
    ri = np.array(sorted(retained_items), dtype=np.intp)
    u_mask = np.zeros(graph.num_users, dtype=bool)
    u_mask[ru] = True
    i_mask = np.zeros(graph.num_items, dtype=bool)
    i_mask[ri] = True
    k_mask_u = np.zeros(graph.num_users, dtype=bool)
    k_mask_u[kernel] = True
    ki = np.array(sorted(kernel_items_all), dtype=np.intp)
    k_mask_i = np.zeros(graph.num_items, dtype=bool)
    if len(ki):
        k_mask_i[ki] = True

    induced: list[Interaction] = []
    kernel_edges: list[tuple[int, int, int]] = []
    for b in range(graph.num_behaviors):
        eu, ei, et = graph.edges(b)
        keep = u_mask[eu] & i_mask[ei]
        for j in np.nonzero(keep)[0]:
            t = int(et[j]) if et is not None else None
            induced.append(Interaction(int(eu[j]), int(ei[j]), b, t))
        k_keep = k_mask_u[eu] & k_mask_i[ei]
        for j in np.nonzero(k_keep)[0]:
            kernel_edges.append((int(eu[j]), b, int(ei[j])))

    sub = MultiBehaviorGraph(graph.num_users, graph.num_items, graph.behaviors, induced)
    return SubGraph(
        graph=sub,
        users=ru,
        items=ri,
        kernel_users=kernel,
        kernel_items=ki,
        kernel_edges=kernel_edges,
        parent_edge_counts={name: graph.edge_count(b) for b, name in enumerate(graph.behaviors)},
    )


def subgraph_hbpr_training_set(
    sub: SubGraph,
    rank: PriorityRank,
    n_negatives=1,
    seed: int = 0,
    salt: int = 0,
) -> TripleBatch:
    """Triples with positives from kernel edges and negatives from retained items.

    Compatibility exclusions use the sub-graph's own edge sets.
    """
    return sample_hbpr_triples(
        sub.graph,
        rank,
        n_negatives=n_negatives,
        seed=seed,
        positive_pool=sub.kernel_edges,
        negative_items=sub.items,
        salt=salt,
    )


def behavior_distribution_report(obj) -> dict:
    """Edge counts and ratios per behavior; deltas vs the parent for sub-graphs."""
    if isinstance(obj, SubGraph):
        graph = obj.graph
        parent = obj.parent_edge_counts
    else:
        graph = obj
        parent = None
    total = graph.edge_count()
    report = {}
    parent_total = sum(parent.values()) if parent else 0
    for b, name in enumerate(graph.behaviors):
        count = graph.edge_count(b)
        ratio = count / total if total else 0.0
        entry = {"count": count, "ratio": ratio}
        if parent is not None:
            parent_ratio = parent[name] / parent_total if parent_total else 0.0
            entry["parent_ratio"] = parent_ratio
            entry["delta"] = ratio - parent_ratio
        report[name] = entry
    return report


# ---------------------------------------------------------------------------
# persistence


def save_subgraph(sub: SubGraph, directory) -> None:
    directory = Path(directory)
    save_graph(sub.graph, directory)
    manifest = {
        "kernel_users": [int(x) for x in sub.kernel_users],
        "kernel_items": [int(x) for x in sub.kernel_items],
        "kernel_edge_count": len(sub.kernel_edges),
        "kernel_edges": [[int(u), int(b), int(i)] for u, b, i in sub.kernel_edges],
        "retained_users": [int(x) for x in sub.users],
        "retained_items": [int(x) for x in sub.items],
        "parent_edge_counts": sub.parent_edge_counts,
    }
    (directory / "kernel.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_subgraph(directory) -> SubGraph:
    directory = Path(directory)
    manifest_path = directory / "kernel.json"
    if not manifest_path.exists():
        raise DataError(f"sub-graph directory missing kernel.json: {directory}")
    manifest = json.loads(manifest_path.read_text())
    graph = load_graph(directory)
    return SubGraph(
        graph=graph,
        users=np.array(manifest["retained_users"], dtype=np.intp),
        items=np.array(manifest["retained_items"], dtype=np.intp),
        kernel_users=np.array(manifest["kernel_users"], dtype=np.intp),
        kernel_items=np.array(manifest["kernel_items"], dtype=np.intp),
        kernel_edges=[tuple(e) for e in manifest["kernel_edges"]],
        parent_edge_counts=manifest["parent_edge_counts"],
    )
