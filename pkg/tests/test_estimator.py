"""Estimator facade: sklearn protocol compliance and ranking helpers."""
import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mbgat.estimator import MBGATRecommender, validate_interactions
from mbgat.graph import DataError, Interaction
from mbgat.synth import SynthConfig, generate_funnel

from util import graph_from_edges, random_edges

B3 = ("view", "cart", "buy")


def small_log():
    rows = generate_funnel(SynthConfig(num_users=12, num_items=10, num_groups=2,
                                       prefs_per_user=5, seed=0))
    return [(r.user, r.item, r.behavior, r.timestamp) for r in rows]


def fitted(**kw):
    base = dict(dim=4, num_layers=1, epochs=2, learning_rate=0.1, seed=0)
    base.update(kw)
    return MBGATRecommender(**base).fit(small_log())


# ---------------------------------------------------------------------------
# input coercion


def test_validate_interactions_accepts_names_indices_and_tuples():
    rows = validate_interactions(
        [(0, 1, "buy"), (1, 2, 0), Interaction(2, 3, 1, 5), (3, 4, "view", 9)], B3
    )
    assert rows[0] == Interaction(0, 1, 2, None)
    assert rows[1] == Interaction(1, 2, 0, None)
    assert rows[2] == Interaction(2, 3, 1, 5)
    assert rows[3] == Interaction(3, 4, 0, 9)


def test_validate_interactions_errors_name_the_row():
    with pytest.raises(DataError, match="row 1.*unknown behavior"):
        validate_interactions([(0, 1, "buy"), (0, 1, "click")], B3)
    with pytest.raises(DataError, match="row 0.*out of range"):
        validate_interactions([(0, 1, 7)], B3)
    with pytest.raises(DataError, match="row 0.*negative"):
        validate_interactions([(-1, 1, 0)], B3)
    with pytest.raises(DataError, match="row 0.*expected"):
        validate_interactions([(0, 1)], B3)


# ---------------------------------------------------------------------------
# sklearn protocol


def test_get_set_params_and_clone():
    est = MBGATRecommender(dim=8, epochs=3)
    params = est.get_params()
    assert params["dim"] == 8
    assert params["epochs"] == 3
    est.set_params(dim=16)
    assert est.dim == 16

    copied = clone(est)
    assert copied.get_params() == est.get_params()
    assert copied is not est


def test_unfitted_estimator_refuses_to_rank():
    est = MBGATRecommender()
    for call in (
        lambda: est.predict([(0, 0, 0)]),
        lambda: est.score_items(0, "buy"),
        lambda: est.recommend(0, "buy"),
        lambda: est.evaluate([(0, 1, "buy")]),
    ):
        with pytest.raises(NotFittedError):
            call()


def test_fit_returns_self_and_sets_state():
    est = fitted()
    assert isinstance(est, MBGATRecommender)
    assert est.graph_.num_users == 12
    assert est.graph_.num_items == 10
    assert est.params_.user_emb.data.shape == (12, 4)
    assert len(est.report_.epochs) == 2


def test_fit_accepts_a_prebuilt_graph():
    rng = np.random.default_rng(1)
    graph = graph_from_edges(5, 6, B3, random_edges(5, 6, 3, 0.4, rng))
    est = MBGATRecommender(dim=4, num_layers=1, epochs=1, seed=0).fit(graph)
    assert est.graph_ is graph
    assert est.score_items(0, "buy").shape == (6,)


def test_fit_rejects_empty_log():
    with pytest.raises(DataError, match="empty interaction log"):
        MBGATRecommender().fit([])


def test_refit_resets_dimensions():
    est = fitted()
    est.fit([(0, 0, "view"), (1, 1, "buy"), (0, 1, "cart")])
    assert est.graph_.num_users == 2
    assert est.params_.user_emb.data.shape == (2, 4)


# ---------------------------------------------------------------------------
# ranking helpers


def test_predict_matches_score_items():
    est = fitted()
    per_item = est.score_items(3, "buy")
    rows = [(3, "buy", i) for i in range(est.graph_.num_items)]
    np.testing.assert_allclose(est.predict(rows), per_item, rtol=0, atol=1e-12)
    b = est.behaviors.index("buy")
    np.testing.assert_allclose(
        est.predict([(3, b, 2)]), [per_item[2]], rtol=0, atol=1e-12
    )


def test_predict_rejects_unknown_behavior():
    est = fitted()
    with pytest.raises(DataError, match="unknown behavior"):
        est.predict([(0, "click", 0)])


def test_recommend_excludes_seen_items_by_default():
    est = fitted()
    user = next(u for u in range(est.graph_.num_users)
                if len(est.graph_.neighbors(u, "user", 0)))
    seen = set(est.graph_.neighbors(user, "user", 0).tolist())
    recs = est.recommend(user, "view", k=est.graph_.num_items)
    assert seen.isdisjoint(recs.tolist())

    everything = est.recommend(user, "view", k=est.graph_.num_items, exclude_seen=False)
    assert sorted(everything.tolist()) == list(range(est.graph_.num_items))


def test_recommend_orders_by_score():
    est = fitted()
    recs = est.recommend(2, "buy", k=5, exclude_seen=False)
    scores = est.score_items(2, "buy")
    assert list(recs) == sorted(range(est.graph_.num_items),
                                key=lambda i: (-scores[i], i))[:5]


def test_evaluate_returns_metrics_table():
    est = fitted()
    table = est.evaluate([(0, 1, "buy"), (2, 3, "buy")], ks=(5,))
    row = table.get("buy", 5)
    assert row.n_users == 2
    assert 0.0 <= row.recall <= 1.0


def test_temporal_estimator_fits():
    est = MBGATRecommender(dim=4, num_layers=1, epochs=1, use_temporal=True,
                           seed=0).fit(small_log())
    assert est.temporal_ is not None
    assert est.score_items(0, "buy").shape == (10,)


def test_fit_is_deterministic():
    a = fitted()
    b = fitted()
    np.testing.assert_array_equal(a.params_.user_emb.data, b.params_.user_emb.data)
    np.testing.assert_array_equal(a.params_.item_emb.data, b.params_.item_emb.data)
