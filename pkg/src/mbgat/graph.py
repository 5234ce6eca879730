"""Multi-behavior user-item interaction graph.

CSV ingest with validation and dedup, temporal three-way splits, per-behavior
and union adjacency (kept transpose-consistent), and a directory-based
persistence format that round-trips indices and timestamps exactly.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

BehaviorId = int


class DataError(Exception):
    """Unreadable, malformed, or out-of-contract input data."""


class Interaction(NamedTuple):
    user: int
    item: int
    behavior: BehaviorId
    timestamp: int | None = None


@dataclass(frozen=True)
class ColumnSchema:
    """Column-name mapping for interaction CSVs."""

    user: str = "user_id"
    item: str = "item_id"
    behavior: str = "behavior"
    timestamp: str | None = "timestamp"


@dataclass(frozen=True)
class TemporalSplit:
    """Half-open boundaries: train [min, train_end), val [train_end, val_end), test [val_end, max]."""

    train_end: int
    val_end: int

    def __post_init__(self):
        if self.train_end >= self.val_end:
            raise DataError(
                f"split boundaries must satisfy train_end < val_end, got {self.train_end} >= {self.val_end}"
            )


@dataclass
class IngestResult:
    interactions: list[Interaction]
    behaviors: tuple[str, ...]
    num_users: int
    num_items: int
    counts: dict[str, int]
    user_map: dict[str, int]
    item_map: dict[str, int]


def _parse_id(token: str, line_no: int, col: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise DataError(
            f"line {line_no}: column '{col}' has non-integer id '{token}' "
            f"(use remap_ids=True for arbitrary ids)"
        ) from None
    if value < 0:
        raise DataError(f"line {line_no}: column '{col}' has negative id {value}")
    return value


def load_interactions(
    path,
    behaviors: Sequence[str],
    schema: ColumnSchema = ColumnSchema(),
    remap_ids: bool = False,
) -> IngestResult:
    """Read an interaction CSV, validate rows, and drop duplicate edges.

    Duplicate (user, item, behavior) rows collapse to one interaction keeping
    the earliest timestamp. Behavior tokens must come from ``behaviors``.
    With ``remap_ids`` user/item ids are remapped to dense 0-based indices in
    first-seen order and the external-to-internal maps are returned; without
    it ids must already be non-negative integers and are used as-is.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"interaction file not found: {path}")
    behaviors = tuple(behaviors)
    if len(set(behaviors)) != len(behaviors) or not behaviors:
        raise DataError(f"behavior vocabulary must be non-empty and unique, got {behaviors!r}")
    b_index = {name: i for i, name in enumerate(behaviors)}

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    dedup: dict[tuple[int, int, int], int | None] = {}

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (missing header)") from None
        header = [h.strip() for h in header]
        col = {}
        for name in (schema.user, schema.item, schema.behavior):
            if name not in header:
                raise DataError(f"{path}: missing required column '{name}' in header {header}")
            col[name] = header.index(name)
        ts_col = None
        if schema.timestamp is not None and schema.timestamp in header:
            ts_col = header.index(schema.timestamp)

        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            u_tok = row[col[schema.user]].strip()
            i_tok = row[col[schema.item]].strip()
            b_tok = row[col[schema.behavior]].strip()
            if b_tok not in b_index:
                raise DataError(f"line {line_no}: unknown behavior '{b_tok}' (vocabulary {list(behaviors)})")
            if remap_ids:
                u = user_map.setdefault(u_tok, len(user_map))
                i = item_map.setdefault(i_tok, len(item_map))
            else:
                u = _parse_id(u_tok, line_no, schema.user)
                i = _parse_id(i_tok, line_no, schema.item)
            t: int | None = None
            if ts_col is not None:
                t_tok = row[ts_col].strip()
                if t_tok:
                    try:
                        t = int(t_tok)
                    except ValueError:
                        raise DataError(
                            f"line {line_no}: non-integer timestamp '{t_tok}'"
                        ) from None
            key = (u, i, b_index[b_tok])
            if key in dedup:
                old = dedup[key]
                if t is not None and (old is None or t < old):
                    dedup[key] = t
            else:
                dedup[key] = t

    interactions = [Interaction(u, i, b, t) for (u, i, b), t in dedup.items()]
    counts = {name: 0 for name in behaviors}
    for x in interactions:
        counts[behaviors[x.behavior]] += 1
    if remap_ids:
        num_users, num_items = len(user_map), len(item_map)
    else:
        num_users = 1 + max((x.user for x in interactions), default=-1)
        num_items = 1 + max((x.item for x in interactions), default=-1)
        user_map = {str(u): u for u in sorted({x.user for x in interactions})}
        item_map = {str(i): i for i in sorted({x.item for x in interactions})}
    return IngestResult(
        interactions=interactions,
        behaviors=behaviors,
        num_users=num_users,
        num_items=num_items,
        counts=counts,
        user_map=user_map,
        item_map=item_map,
    )


def temporal_split(
    interactions: Sequence[Interaction], split: TemporalSplit
) -> tuple[list[Interaction], list[Interaction], list[Interaction]]:
    """Partition interactions by timestamp into train/val/test lists."""
    train: list[Interaction] = []
    val: list[Interaction] = []
    test: list[Interaction] = []
    for x in interactions:
        if x.timestamp is None:
            raise DataError(
                f"temporal split requires timestamps; interaction {x} has none"
            )
        if x.timestamp < split.train_end:
            train.append(x)
        elif x.timestamp < split.val_end:
            val.append(x)
        else:
            test.append(x)
    if not val:
        warnings.warn("temporal split produced an empty validation set", stacklevel=2)
    if not test:
        warnings.warn("temporal split produced an empty test set", stacklevel=2)
    return train, val, test


class MultiBehaviorGraph:
    """Per-behavior bipartite adjacency over dense user/item index spaces.

    At most one edge per (user, item, behavior); neighbor lists are sorted and
    duplicate free, and the item-to-user view is the exact transpose of the
    user-to-item view by construction. Unused trailing indices are allowed
    (nodes that appear only in val/test keep their ids and simply have empty
    neighborhoods here).
    """

    def __init__(
        self,
        num_users: int,
        num_items: int,
        behaviors: Sequence[str],
        interactions: Iterable[Interaction],
    ):
        if num_users < 0 or num_items < 0:
            raise DataError(f"negative node counts: {num_users} users, {num_items} items")
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.behaviors = tuple(behaviors)
        if not self.behaviors:
            raise DataError("graph needs at least one behavior")
        nb = len(self.behaviors)

        # dedup keeps the earliest timestamp; idempotent over already-clean input
        dedup: dict[tuple[int, int, int], int | None] = {}
        for x in interactions:
            if not (0 <= x.user < self.num_users):
                raise DataError(f"user index {x.user} out of range [0, {self.num_users})")
            if not (0 <= x.item < self.num_items):
                raise DataError(f"item index {x.item} out of range [0, {self.num_items})")
            if not (0 <= x.behavior < nb):
                raise DataError(f"behavior index {x.behavior} out of range [0, {nb})")
            key = (x.behavior, x.user, x.item)
            if key in dedup:
                old = dedup[key]
                if x.timestamp is not None and (old is None or x.timestamp < old):
                    dedup[key] = x.timestamp
            else:
                dedup[key] = x.timestamp

        ts_flags = {t is not None for t in dedup.values()}
        if len(ts_flags) > 1:
            raise DataError("mixed presence of timestamps across edges")
        self.has_timestamps = ts_flags == {True}

        self._edges_u: list[np.ndarray] = []
        self._edges_i: list[np.ndarray] = []
        self._edges_t: list[np.ndarray | None] = []
        for b in range(nb):
            keys = sorted(k for k in dedup if k[0] == b)
            eu = np.array([k[1] for k in keys], dtype=np.intp)
            ei = np.array([k[2] for k in keys], dtype=np.intp)
            self._edges_u.append(eu)
            self._edges_i.append(ei)
            if self.has_timestamps:
                self._edges_t.append(np.array([dedup[k] for k in keys], dtype=np.int64))
            else:
                self._edges_t.append(None)

        self._build_indexes()

    # -- construction helpers ------------------------------------------------

    def _build_indexes(self) -> None:
        nb = len(self.behaviors)
        self._u_indptr = []
        self._i_perm = []
        self._i_indptr = []
        for b in range(nb):
            eu, ei = self._edges_u[b], self._edges_i[b]
            self._u_indptr.append(np.searchsorted(eu, np.arange(self.num_users + 1)))
            perm = np.lexsort((eu, ei))
            self._i_perm.append(perm)
            self._i_indptr.append(np.searchsorted(ei[perm], np.arange(self.num_items + 1)))

        # union pairs across behaviors, sorted by (user, item)
        if any(len(e) for e in self._edges_u):
            all_u = np.concatenate(self._edges_u)
            all_i = np.concatenate(self._edges_i)
            all_b = np.concatenate(
                [np.full(len(self._edges_u[b]), b, dtype=np.intp) for b in range(nb)]
            )
            if self.has_timestamps:
                all_t = np.concatenate(self._edges_t)
            else:
                all_t = np.zeros(len(all_u), dtype=np.int64)
            order = np.lexsort((all_b, all_i, all_u))
            su, si, sb, st = all_u[order], all_i[order], all_b[order], all_t[order]
            new_pair = np.ones(len(su), dtype=bool)
            new_pair[1:] = (su[1:] != su[:-1]) | (si[1:] != si[:-1])
            pair_idx = np.cumsum(new_pair) - 1
            self._pair_u = su[new_pair]
            self._pair_i = si[new_pair]
            self._rec_pair = pair_idx
            self._rec_behavior = sb
            self._rec_time = st if self.has_timestamps else None
        else:
            self._pair_u = np.empty(0, dtype=np.intp)
            self._pair_i = np.empty(0, dtype=np.intp)
            self._rec_pair = np.empty(0, dtype=np.intp)
            self._rec_behavior = np.empty(0, dtype=np.intp)
            self._rec_time = None

        self._pair_u_indptr = np.searchsorted(self._pair_u, np.arange(self.num_users + 1))
        pperm = np.lexsort((self._pair_u, self._pair_i))
        self._pair_i_perm = pperm
        self._pair_i_indptr = np.searchsorted(
            self._pair_i[pperm], np.arange(self.num_items + 1)
        )

    # -- queries ---------------------------------------------------------------

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)

    def edge_count(self, behavior: BehaviorId | None = None) -> int:
        if behavior is None:
            return int(np.sum([len(e) for e in self._edges_u]))
        return len(self._edges_u[behavior])

    def edges(self, behavior: BehaviorId) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """Edge arrays (users, items, timestamps) sorted by (user, item)."""
        return self._edges_u[behavior], self._edges_i[behavior], self._edges_t[behavior]

    def edges_item_order(self, behavior: BehaviorId) -> np.ndarray:
        """Permutation putting edges(behavior) into (item, user) order."""
        return self._i_perm[behavior]

    def union_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct connected (user, item) pairs, sorted by (user, item)."""
        return self._pair_u, self._pair_i

    def pair_records(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """One record per edge: (pair index, behavior, timestamp), pair-sorted."""
        return self._rec_pair, self._rec_behavior, self._rec_time

    def pairs_item_order(self) -> np.ndarray:
        """Permutation putting union_pairs() into (item, user) order."""
        return self._pair_i_perm

    def neighbors(
        self, node: int, side: str = "user", behavior: BehaviorId | None = None
    ) -> np.ndarray:
        """Sorted neighbor ids of a node; union across behaviors when behavior is None."""
        if side == "user":
            if not (0 <= node < self.num_users):
                raise DataError(f"user index {node} out of range [0, {self.num_users})")
            if behavior is None:
                lo, hi = self._pair_u_indptr[node], self._pair_u_indptr[node + 1]
                return self._pair_i[lo:hi]
            lo, hi = self._u_indptr[behavior][node], self._u_indptr[behavior][node + 1]
            return self._edges_i[behavior][lo:hi]
        if side == "item":
            if not (0 <= node < self.num_items):
                raise DataError(f"item index {node} out of range [0, {self.num_items})")
            if behavior is None:
                perm = self._pair_i_perm
                lo, hi = self._pair_i_indptr[node], self._pair_i_indptr[node + 1]
                return np.sort(self._pair_u[perm[lo:hi]])
            perm = self._i_perm[behavior]
            lo, hi = self._i_indptr[behavior][node], self._i_indptr[behavior][node + 1]
            return np.sort(self._edges_u[behavior][perm[lo:hi]])
        raise DataError(f"side must be 'user' or 'item', got {side!r}")

    def interactions(self) -> list[Interaction]:
        """All edges as Interaction tuples, behavior-major then (user, item)."""
        out = []
        for b in range(self.num_behaviors):
            eu, ei, et = self.edges(b)
            for j in range(len(eu)):
                t = int(et[j]) if et is not None else None
                out.append(Interaction(int(eu[j]), int(ei[j]), b, t))
        return out

    def all_timestamps(self) -> np.ndarray:
        if not self.has_timestamps:
            raise DataError("graph has no timestamps")
        parts = [t for t in self._edges_t if t is not None and len(t)]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(parts)


def build_graph(
    interactions: Iterable[Interaction],
    num_users: int,
    num_items: int,
    behaviors: Sequence[str],
) -> MultiBehaviorGraph:
    return MultiBehaviorGraph(num_users, num_items, behaviors, interactions)


def neighbors(
    graph: MultiBehaviorGraph, node: int, side: str = "user", behavior: BehaviorId | None = None
) -> np.ndarray:
    return graph.neighbors(node, side, behavior)


# ---------------------------------------------------------------------------
# persistence: directory with meta.json and edges.csv


def save_graph(graph: MultiBehaviorGraph, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": 1,
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "behaviors": list(graph.behaviors),
        "has_timestamps": graph.has_timestamps,
        "counts": {name: graph.edge_count(b) for b, name in enumerate(graph.behaviors)},
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with (directory / "edges.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "behavior", "timestamp"])
        for b in range(graph.num_behaviors):
            eu, ei, et = graph.edges(b)
            for j in range(len(eu)):
                t = int(et[j]) if et is not None else ""
                writer.writerow([int(eu[j]), int(ei[j]), b, t])


def load_graph(directory) -> MultiBehaviorGraph:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DataError(f"graph directory missing meta.json: {directory}")
    meta = json.loads(meta_path.read_text())
    interactions = []
    with (directory / "edges.csv").open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            t = int(row[3]) if row[3] != "" else None
            interactions.append(Interaction(int(row[0]), int(row[1]), int(row[2]), t))
    return MultiBehaviorGraph(
        meta["num_users"], meta["num_items"], meta["behaviors"], interactions
    )


def save_id_maps(result: IngestResult, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"users": result.user_map, "items": result.item_map}
    (directory / "id_map.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_interactions_csv(interactions: Sequence[Interaction], behaviors: Sequence[str], path) -> None:
    """Write interactions back out in the ingest CSV schema."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id", "behavior", "timestamp"])
        for x in interactions:
            writer.writerow([x.user, x.item, behaviors[x.behavior],
                             x.timestamp if x.timestamp is not None else ""])
