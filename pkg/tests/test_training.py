"""Training loop: loss oracles, SGD behavior, determinism, checkpoints."""
import json
import math

import numpy as np
import pytest

from mbgat.autodiff import Tensor
from mbgat.graph import DataError, Interaction
from mbgat.kg import KgData
from mbgat.model import (
    LayerOutput,
    ModelConfig,
    NonFiniteError,
    forward,
    init_params,
    load_checkpoint,
    params_to_arrays,
    score,
)
from mbgat.sampling import HbprTriple, PriorityRank, sample_hbpr_triples
from mbgat.training import (
    DivergenceError,
    SubgraphMode,
    TrainConfig,
    ablate,
    hbpr_loss,
    train,
)

from reference import naive_hbpr_loss
from util import extract_arrays, graph_from_edges, random_edges

B3 = ("view", "cart", "buy")
RANK = PriorityRank(("buy", "cart", "view"))


def funnel_graph(num_users=6, num_items=8, seed=0):
    """Nested view > cart > buy positives, enough slack for negatives."""
    rng = np.random.default_rng(seed)
    edges = [[], [], []]
    for u in range(num_users):
        views = rng.choice(num_items, size=5, replace=False)
        carts = views[:3]
        buys = views[:1]
        edges[0] += [(u, int(i)) for i in views]
        edges[1] += [(u, int(i)) for i in carts]
        edges[2] += [(u, int(i)) for i in buys]
    return graph_from_edges(num_users, num_items, B3, edges)


def small_config(**kw):
    base = dict(dim=4, num_layers=1, behaviors=B3, paradigm="intra", alpha=0.5)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# hbpr_loss


def test_hbpr_loss_zero_margin_gives_n_ln2():
    # zero user vectors make every score zero, so each term is ln 2
    out = LayerOutput(user_out=Tensor(np.zeros((2, 3))), item_out=Tensor(np.ones((4, 3))))
    cfg = small_config(dim=3)
    params = init_params(cfg, 2, 4, seed=0)
    triples = [HbprTriple(0, 2, 1, 3), HbprTriple(1, 0, 0, 2), HbprTriple(0, 1, 2, 0)]
    loss = hbpr_loss(triples, out, params, alpha=0.5)
    assert float(loss.data) == pytest.approx(3 * math.log(2.0), abs=1e-12)


def test_hbpr_loss_matches_naive_loops():
    rng = np.random.default_rng(2)
    cfg = small_config()
    params = init_params(cfg, 5, 7, seed=3)
    out = LayerOutput(
        user_out=Tensor(rng.normal(size=(5, 4))), item_out=Tensor(rng.normal(size=(7, 4)))
    )
    triples = [
        HbprTriple(int(u), int(b), int(p), int(n))
        for u, b, p, n in zip(
            rng.integers(0, 5, 40), rng.integers(0, 3, 40),
            rng.integers(0, 7, 40), rng.integers(0, 7, 40),
        )
    ]
    want = naive_hbpr_loss(
        [(t.user, t.behavior, t.pos_item, t.neg_item) for t in triples],
        out.user_out.data, out.item_out.data,
        [t.data for t in params.behavior_diag], cfg.alpha,
    )
    got = float(hbpr_loss(triples, out, params, cfg.alpha).data)
    assert got == pytest.approx(want, rel=1e-12)


def test_hbpr_loss_rejects_empty():
    cfg = small_config()
    params = init_params(cfg, 2, 2, seed=0)
    out = LayerOutput(user_out=Tensor(np.zeros((2, 4))), item_out=Tensor(np.zeros((2, 4))))
    with pytest.raises(DataError, match="at least one triple"):
        hbpr_loss([], out, params, 0.5)


# ---------------------------------------------------------------------------
# the training loop


def quick_train(graph, epochs=4, lr=0.1, lam=1e-4, seed=0, **kw):
    cfg = small_config()
    tc = TrainConfig(learning_rate=lr, lambda_reg=lam, epochs=epochs,
                     batch_size=4096, seed=seed, **kw)
    return cfg, train(graph, cfg, tc, RANK)


def test_training_reduces_loss_and_flips_margins():
    graph = funnel_graph()
    cfg, result = quick_train(graph, epochs=40, lr=0.5)
    totals = [rec.total for rec in result.report.epochs]
    assert totals[-1] < totals[0]

    # margins on the epoch-0 triple set should be mostly positive afterwards
    batch = sample_hbpr_triples(graph, RANK, seed=0, salt=0)
    out = forward(graph, cfg, result.params)
    margins = [
        score(t.user, t.behavior, t.pos_item, out, result.params, cfg.alpha)
        - score(t.user, t.behavior, t.neg_item, out, result.params, cfg.alpha)
        for t in batch.triples
    ]
    assert np.mean(margins) > 0.0


def test_strong_regularization_shrinks_parameters():
    graph = funnel_graph()
    cfg = small_config()
    init = init_params(cfg, graph.num_users, graph.num_items, seed=0)
    norm0 = sum(float(np.sum(t.data ** 2)) for _, t in init.named_tensors())
    tc = TrainConfig(learning_rate=0.05, lambda_reg=1.0, epochs=4, batch_size=4096, seed=0)
    result = train(graph, cfg, tc, RANK)
    norm1 = sum(float(np.sum(t.data ** 2)) for _, t in result.params.named_tensors())
    assert norm1 < 0.5 * norm0


def test_report_decomposes_total_loss():
    graph = funnel_graph()
    lam = 3e-3
    cfg = small_config()
    tc = TrainConfig(learning_rate=0.1, lambda_reg=lam, epochs=3, batch_size=4096, seed=1)
    result = train(graph, cfg, tc, RANK)
    for rec in result.report.epochs:
        assert rec.total == pytest.approx(rec.hbpr + lam * rec.reg + rec.kg, rel=1e-9)
        assert rec.kg == 0.0
        assert rec.n_triples > 0


def test_training_is_bit_exact_across_reruns(tmp_path):
    graph = funnel_graph()
    runs = []
    for tag in ("a", "b"):
        cfg = small_config()
        tc = TrainConfig(learning_rate=0.1, lambda_reg=1e-4, epochs=3,
                         batch_size=16, seed=5)
        result = train(graph, cfg, tc, RANK, checkpoint_dir=tmp_path / tag)
        runs.append(result)
    arrays_a = params_to_arrays(runs[0].params)
    arrays_b = params_to_arrays(runs[1].params)
    assert set(arrays_a) == set(arrays_b)
    for name in arrays_a:
        assert np.array_equal(arrays_a[name], arrays_b[name]), name
    bytes_a = (tmp_path / "a" / "checkpoint_final.bin").read_bytes()
    bytes_b = (tmp_path / "b" / "checkpoint_final.bin").read_bytes()
    assert bytes_a == bytes_b
    hist_a = [{**rec.to_dict(), "seconds": None} for rec in runs[0].report.epochs]
    hist_b = [{**rec.to_dict(), "seconds": None} for rec in runs[1].report.epochs]
    assert hist_a == hist_b


def test_seed_changes_the_run():
    graph = funnel_graph()
    _, r0 = quick_train(graph, epochs=2, seed=0)
    _, r1 = quick_train(graph, epochs=2, seed=1)
    assert not np.array_equal(r0.params.user_emb.data, r1.params.user_emb.data)


def test_divergence_guard_catches_nonfinite_loss():
    graph = funnel_graph()
    cfg = small_config()
    # the regularizer overflows on the very first step, before any update
    tc = TrainConfig(learning_rate=0.05, lambda_reg=1e307, epochs=1, batch_size=4096, seed=0)
    with np.errstate(over="ignore"):
        with pytest.raises(DivergenceError, match="non-finite loss at epoch 0"):
            train(graph, cfg, tc, RANK)


def test_runaway_learning_rate_is_caught():
    graph = funnel_graph()
    cfg = small_config()
    tc = TrainConfig(learning_rate=1e6, lambda_reg=1.0, epochs=30, batch_size=4096, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises((DivergenceError, NonFiniteError)):
            train(graph, cfg, tc, RANK)


# ---------------------------------------------------------------------------
# checkpoints, validation tracking, reports


def val_rows_for(graph, rng, n=10):
    rows = []
    for _ in range(n):
        rows.append(Interaction(int(rng.integers(0, graph.num_users)),
                                int(rng.integers(0, graph.num_items)), 2))
    return rows


def test_checkpoint_files_and_best_tracking(tmp_path):
    graph = funnel_graph()
    rng = np.random.default_rng(0)
    val = val_rows_for(graph, rng)
    cfg = small_config()
    tc = TrainConfig(learning_rate=0.1, lambda_reg=1e-4, epochs=4, batch_size=4096,
                     seed=2, checkpoint_every=2)
    result = train(graph, cfg, tc, RANK, val_data=val, checkpoint_dir=tmp_path)

    names = sorted(p.name for p in tmp_path.iterdir())
    assert "checkpoint_final.bin" in names
    assert "checkpoint_best.bin" in names
    assert "checkpoint_epoch1.bin" in names
    assert "checkpoint_epoch3.bin" in names
    assert "checkpoint_epoch0.bin" not in names

    config_echo, seed, arrays = load_checkpoint(tmp_path / "checkpoint_final.bin")
    assert seed == 2
    assert config_echo["model"]["dim"] == 4
    assert config_echo["num_users"] == graph.num_users
    want = params_to_arrays(result.params)
    assert set(arrays) == set(want)
    for name in want:
        assert np.array_equal(arrays[name], want[name]), name

    # best epoch matches the argmax of the recorded validation NDCG
    key_k = 10  # EvalSpec default ks[0]
    per_epoch = []
    for rec in result.report.epochs:
        row = next(r for r in rec.val if r["behavior"] == "buy" and r["k"] == key_k)
        per_epoch.append(row["ndcg"])
    assert result.report.best_epoch == int(np.argmax(per_epoch))


def test_report_jsonl_roundtrip(tmp_path):
    graph = funnel_graph()
    _, result = quick_train(graph, epochs=3)
    path = tmp_path / "report.jsonl"
    result.report.to_jsonl(path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[0])
    assert set(rec) >= {"epoch", "hbpr", "reg", "kg", "total", "n_triples",
                        "skipped_pairs", "kg_skipped", "seconds"}
    assert rec["epoch"] == 0


# ---------------------------------------------------------------------------
# KG joint training


def tiny_kg(num_items):
    heads = np.array([0, 1, 2, 3], dtype=np.intp)
    relations = np.zeros(4, dtype=np.intp)
    tails = np.array([num_items, num_items, num_items + 1, num_items + 1], dtype=np.intp)
    return KgData(heads=heads, relations=relations, tails=tails,
                  relation_names=("in_group",), num_items=num_items, num_meta=2,
                  entity_map={"g0": num_items, "g1": num_items + 1})


def test_kg_enabled_requires_triples():
    graph = funnel_graph()
    cfg = small_config()
    tc = TrainConfig(epochs=1, kg_enabled=True, seed=0)
    with pytest.raises(DataError, match="no KG triples"):
        train(graph, cfg, tc, RANK)


def test_kg_joint_training_updates_both_parameter_sets(tmp_path):
    graph = funnel_graph()
    kg = tiny_kg(graph.num_items)
    cfg = small_config()
    tc = TrainConfig(learning_rate=0.1, lambda_reg=1e-4, epochs=2, batch_size=4096,
                     seed=0, kg_enabled=True, kg_weight=0.5)
    result = train(graph, cfg, tc, RANK, kg_data=kg, checkpoint_dir=tmp_path)
    assert result.kg_params is not None
    assert all(rec.kg > 0.0 for rec in result.report.epochs)
    # kg contribution appears in the decomposition with its weight
    for rec in result.report.epochs:
        assert rec.total == pytest.approx(rec.hbpr + tc.lambda_reg * rec.reg
                                          + tc.kg_weight * rec.kg, rel=1e-9)

    _, _, arrays = load_checkpoint(tmp_path / "checkpoint_final.bin")
    assert "kg.meta_emb" in arrays
    assert "kg.rel_emb.r0" in arrays
    assert "kg.rel_proj.r0" in arrays

    # the same run without KG yields different item embeddings: the side loss
    # really reaches the shared table
    plain = TrainConfig(learning_rate=0.1, lambda_reg=1e-4, epochs=2, batch_size=4096, seed=0)
    base = train(graph, cfg, plain, RANK)
    assert not np.array_equal(base.params.item_emb.data, result.params.item_emb.data)
    assert np.array_equal(
        init_params(cfg, graph.num_users, graph.num_items, seed=0).user_emb.data.shape,
        result.params.user_emb.data.shape,
    )


# ---------------------------------------------------------------------------
# ablation plumbing


def test_ablate_runs_both_modes_with_fewer_single_task_triples():
    graph = funnel_graph()
    cfg = small_config()
    tc = TrainConfig(learning_rate=0.1, lambda_reg=1e-4, epochs=1, batch_size=4096, seed=0)
    results = ablate(graph, cfg, tc, RANK, target_behavior="buy")
    assert set(results) == {"multi_task", "single_task"}
    multi = results["multi_task"].report.epochs[0].n_triples
    single = results["single_task"].report.epochs[0].n_triples
    assert 0 < single < multi


def test_ablate_validates_inputs():
    graph = funnel_graph()
    cfg = small_config()
    tc = TrainConfig(epochs=1, seed=0)
    with pytest.raises(DataError, match="unknown target"):
        ablate(graph, cfg, tc, RANK, target_behavior="click")
    with pytest.raises(DataError, match="mode must be"):
        ablate(graph, cfg, tc, RANK, target_behavior="buy", mode="off")


def test_ablate_rejects_edgeless_target():
    # "buy" exists as a behavior but has no edges
    edges = [[(0, 0), (1, 1)], [(0, 0)], []]
    graph = graph_from_edges(2, 3, B3, edges)
    cfg = small_config()
    tc = TrainConfig(epochs=1, seed=0)
    with pytest.raises(DataError, match="no training edges"):
        ablate(graph, cfg, tc, RANK, target_behavior="buy", mode="single_task")


# ---------------------------------------------------------------------------
# sub-graph mode


def test_subgraph_mode_trains_and_is_deterministic():
    rng = np.random.default_rng(9)
    graph = graph_from_edges(10, 12, B3, random_edges(10, 12, 3, 0.25, rng))
    cfg = small_config()

    def run():
        tc = TrainConfig(learning_rate=0.1, lambda_reg=1e-4, epochs=3, batch_size=4096,
                         seed=4, subgraph=SubgraphMode(kernel_size=4, hops=2, fanout=3))
        return train(graph, cfg, tc, RANK)

    r1, r2 = run(), run()
    assert all(rec.n_triples > 0 for rec in r1.report.epochs)
    a1 = extract_arrays(r1.params)
    a2 = extract_arrays(r2.params)
    assert np.array_equal(a1["user_emb"], a2["user_emb"])
    assert np.array_equal(a1["item_emb"], a2["item_emb"])


def test_subgraph_mode_can_reuse_one_sample():
    rng = np.random.default_rng(10)
    graph = graph_from_edges(8, 9, B3, random_edges(8, 9, 3, 0.3, rng))
    cfg = small_config()
    tc = TrainConfig(learning_rate=0.1, lambda_reg=1e-4, epochs=2, batch_size=4096,
                     seed=0, subgraph=SubgraphMode(kernel_size=3, hops=1, fanout=2,
                                                   resample_each_epoch=False))
    result = train(graph, cfg, tc, RANK)
    assert len(result.report.epochs) == 2


def test_temporal_training_runs():
    rng = np.random.default_rng(11)
    graph = graph_from_edges(5, 6, B3,
                             random_edges(5, 6, 3, 0.4, rng, with_timestamps=True))
    cfg = small_config(use_temporal=True, paradigm="inter", num_layers=2)
    tc = TrainConfig(learning_rate=0.05, lambda_reg=1e-4, epochs=2, batch_size=4096, seed=0)
    result = train(graph, cfg, tc, RANK)
    assert len(result.report.epochs) == 2
    assert np.isfinite(result.report.epochs[-1].total)


# ---------------------------------------------------------------------------
# config validation


def test_train_config_validation():
    with pytest.raises(DataError, match="learning_rate"):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(DataError, match="lambda_reg"):
        TrainConfig(lambda_reg=-1.0)
    with pytest.raises(DataError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(DataError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(DataError, match="kg_weight"):
        TrainConfig(kg_weight=-0.5)
    with pytest.raises(DataError, match="kernel_size"):
        SubgraphMode(kernel_size=0)
    with pytest.raises(DataError, match="hops"):
        SubgraphMode(kernel_size=1, hops=0)
