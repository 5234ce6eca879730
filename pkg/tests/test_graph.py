import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbgat.graph import (
    ColumnSchema,
    DataError,
    Interaction,
    MultiBehaviorGraph,
    TemporalSplit,
    build_graph,
    load_graph,
    load_interactions,
    save_graph,
    save_interactions_csv,
    temporal_split,
)
from util import graph_from_edges, random_edges

BEHAVIORS = ("view", "cart", "buy")


def write_csv(tmp_path, text, name="rows.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# ingest


def test_load_interactions_basic_counts(tmp_path):
    path = write_csv(tmp_path, (
        "user_id,item_id,behavior,timestamp\n"
        "0,0,view,1\n"
        "0,1,cart,2\n"
        "1,0,buy,3\n"
        "1,0,view,4\n"
    ))
    result = load_interactions(path, BEHAVIORS)
    assert result.counts == {"view": 2, "cart": 1, "buy": 1}
    assert result.num_users == 2 and result.num_items == 2
    assert Interaction(1, 0, 2, 3) in result.interactions


def test_duplicate_rows_keep_earliest_timestamp(tmp_path):
    path = write_csv(tmp_path, (
        "user_id,item_id,behavior,timestamp\n"
        "0,1,view,9\n"
        "0,1,view,5\n"
        "0,1,view,7\n"
    ))
    result = load_interactions(path, BEHAVIORS)
    assert result.interactions == [Interaction(0, 1, 0, 5)]
    assert result.counts["view"] == 1


def test_unknown_behavior_reports_line_and_token(tmp_path):
    path = write_csv(tmp_path, (
        "user_id,item_id,behavior,timestamp\n"
        "0,0,view,1\n"
        "0,1,clicked,2\n"
    ))
    with pytest.raises(DataError, match="line 3.*clicked"):
        load_interactions(path, BEHAVIORS)


def test_non_integer_id_reports_line(tmp_path):
    path = write_csv(tmp_path, "user_id,item_id,behavior\nu7,0,view\n")
    with pytest.raises(DataError, match="line 2.*u7"):
        load_interactions(path, BEHAVIORS)


def test_remap_ids_first_seen_order(tmp_path):
    path = write_csv(tmp_path, (
        "user_id,item_id,behavior\n"
        "alice,sku9,view\n"
        "bob,sku3,view\n"
        "alice,sku3,buy\n"
    ))
    result = load_interactions(path, BEHAVIORS, remap_ids=True)
    assert result.user_map == {"alice": 0, "bob": 1}
    assert result.item_map == {"sku9": 0, "sku3": 1}
    assert Interaction(0, 1, 2, None) in result.interactions


def test_missing_column_and_empty_file(tmp_path):
    path = write_csv(tmp_path, "user_id,behavior\n0,view\n")
    with pytest.raises(DataError, match="item_id"):
        load_interactions(path, BEHAVIORS)
    empty = write_csv(tmp_path, "", name="empty.csv")
    with pytest.raises(DataError, match="empty"):
        load_interactions(empty, BEHAVIORS)


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_interactions(tmp_path / "nope.csv", BEHAVIORS)


def test_ragged_row_reports_line(tmp_path):
    path = write_csv(tmp_path, "user_id,item_id,behavior\n0,0,view\n0,1\n")
    with pytest.raises(DataError, match="line 3"):
        load_interactions(path, BEHAVIORS)


def test_custom_schema(tmp_path):
    path = write_csv(tmp_path, "u,i,b,ts\n3,4,buy,10\n")
    schema = ColumnSchema(user="u", item="i", behavior="b", timestamp="ts")
    result = load_interactions(path, BEHAVIORS, schema)
    assert result.interactions == [Interaction(3, 4, 2, 10)]


# ---------------------------------------------------------------------------
# temporal split


def test_split_boundaries_are_half_open():
    rows = [Interaction(0, 0, 0, t) for t in (0, 5, 9, 10, 14, 15, 20)]
    train, val, test = temporal_split(rows, TemporalSplit(10, 15))
    assert [x.timestamp for x in train] == [0, 5, 9]
    # the boundary timestamp itself lands in the next segment
    assert [x.timestamp for x in val] == [10, 14]
    assert [x.timestamp for x in test] == [15, 20]


def test_split_requires_timestamps_and_ordered_bounds():
    with pytest.raises(DataError, match="train_end < val_end"):
        TemporalSplit(10, 10)
    with pytest.raises(DataError, match="timestamps"):
        temporal_split([Interaction(0, 0, 0, None)], TemporalSplit(1, 2))


def test_split_warns_on_empty_segments():
    rows = [Interaction(0, 0, 0, 0)]
    with pytest.warns(UserWarning) as record:
        temporal_split(rows, TemporalSplit(5, 6))
    messages = " / ".join(str(w.message) for w in record)
    assert "empty validation" in messages and "empty test" in messages


# ---------------------------------------------------------------------------
# graph structure


def small_graph():
    return MultiBehaviorGraph(3, 4, BEHAVIORS, [
        Interaction(0, 0, 0), Interaction(0, 2, 0), Interaction(1, 2, 0),
        Interaction(0, 2, 1),
        Interaction(2, 3, 2), Interaction(2, 1, 2),
    ])


def test_neighbors_sorted_per_behavior_and_union():
    g = small_graph()
    assert list(g.neighbors(0, "user", 0)) == [0, 2]
    assert list(g.neighbors(2, "item", 0)) == [0, 1]
    assert list(g.neighbors(2, "user", 2)) == [1, 3]
    assert list(g.neighbors(0, "user")) == [0, 2]  # union collapses duplicates
    assert list(g.neighbors(1, "user", 2)) == []


def test_edge_counts():
    g = small_graph()
    assert g.edge_count(0) == 3 and g.edge_count(1) == 1 and g.edge_count(2) == 2
    assert g.edge_count() == 6


def test_union_pairs_cover_all_edges_once():
    g = small_graph()
    pu, pi = g.union_pairs()
    pairs = set(zip(pu.tolist(), pi.tolist()))
    assert pairs == {(0, 0), (0, 2), (1, 2), (2, 3), (2, 1)}
    assert len(pu) == len(pairs)


def test_constructor_dedups_repeated_interactions():
    g = MultiBehaviorGraph(2, 2, ("view",), [
        Interaction(0, 1, 0, 4), Interaction(0, 1, 0, 2),
    ])
    eu, ei, et = g.edges(0)
    assert len(eu) == 1 and et[0] == 2


def test_out_of_range_ids_rejected():
    with pytest.raises(DataError):
        MultiBehaviorGraph(2, 2, ("view",), [Interaction(2, 0, 0)])
    with pytest.raises(DataError):
        MultiBehaviorGraph(2, 2, ("view",), [Interaction(0, 0, 1)])


def test_mixed_timestamp_presence_rejected():
    with pytest.raises(DataError, match="timestamp"):
        MultiBehaviorGraph(2, 2, ("view",), [
            Interaction(0, 0, 0, 1), Interaction(1, 1, 0, None),
        ])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_adjacency_is_symmetric_between_sides(seed):
    rng = np.random.default_rng(seed)
    edges = random_edges(4, 5, 2, 0.4, rng)
    g = graph_from_edges(4, 5, ("a", "b"), edges)
    for b in range(2):
        for u in range(4):
            for i in g.neighbors(u, "user", b):
                assert u in g.neighbors(int(i), "item", b)
        expect = sorted(set(edges[b]))
        eu, ei, _ = g.edges(b)
        assert sorted(zip(eu.tolist(), ei.tolist())) == expect


# ---------------------------------------------------------------------------
# persistence


def test_graph_roundtrip_without_timestamps(tmp_path):
    g = small_graph()
    save_graph(g, tmp_path / "g")
    loaded = load_graph(tmp_path / "g")
    assert loaded.num_users == g.num_users and loaded.num_items == g.num_items
    assert loaded.behaviors == g.behaviors
    for b in range(g.num_behaviors):
        eu, ei, et = g.edges(b)
        lu, li, lt = loaded.edges(b)
        assert np.array_equal(eu, lu) and np.array_equal(ei, li)
        assert et is None and lt is None


def test_graph_roundtrip_with_timestamps(tmp_path):
    rng = np.random.default_rng(7)
    edges = random_edges(4, 4, 3, 0.4, rng, with_timestamps=True)
    g = graph_from_edges(4, 4, BEHAVIORS, edges)
    save_graph(g, tmp_path / "g")
    loaded = load_graph(tmp_path / "g")
    for b in range(3):
        for a, c in zip(g.edges(b), loaded.edges(b)):
            assert np.array_equal(a, c)
    meta = json.loads((tmp_path / "g" / "meta.json").read_text())
    assert meta["has_timestamps"] is True


def test_interactions_csv_roundtrip(tmp_path):
    rows = [Interaction(0, 1, 2, 7), Interaction(1, 0, 0, 3)]
    save_interactions_csv(rows, BEHAVIORS, tmp_path / "x.csv")
    back = load_interactions(tmp_path / "x.csv", BEHAVIORS)
    assert sorted(back.interactions) == sorted(rows)


def test_build_graph_matches_constructor():
    rows = [Interaction(0, 0, 0), Interaction(1, 1, 1)]
    g = build_graph(rows, 2, 2, ("a", "b"))
    assert g.edge_count() == 2
