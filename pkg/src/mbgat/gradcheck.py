"""End-to-end gradient checking of the full training loss on tiny graphs.

Builds a small random multi-behavior graph, assembles the same loss the
trainer optimizes (mean ranking term + weighted squared-norm regularizer +
optional mean KG term), and compares tape gradients against central finite
differences.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .graph import Interaction, MultiBehaviorGraph
from .kg import KgData, init_kg_params, kg_loss
from .model import ModelConfig, TemporalEncoder, forward, init_params
from .sampling import PriorityRank, sample_hbpr_triples
from .training import hbpr_loss


def random_check_graph(
    num_users: int = 4,
    num_items: int = 5,
    behaviors=("view", "cart", "buy"),
    edge_prob: float = 0.45,
    with_timestamps: bool = False,
    seed: int = 0,
) -> MultiBehaviorGraph:
    """Random bipartite multi-behavior graph where every behavior has edges."""
    rng = np.random.default_rng(seed)
    for attempt in range(100):
        interactions = []
        for b in range(len(behaviors)):
            for u in range(num_users):
                for i in range(num_items):
                    if rng.random() < edge_prob:
                        t = int(rng.integers(0, 9)) if with_timestamps else None
                        interactions.append(Interaction(u, i, b, t))
        per_b = {b: 0 for b in range(len(behaviors))}
        for x in interactions:
            per_b[x.behavior] += 1
        if all(per_b.values()):
            return MultiBehaviorGraph(num_users, num_items, behaviors, interactions)
    raise RuntimeError("could not draw a usable random graph")


def random_kg_data(num_items: int, num_meta: int = 2, seed: int = 0) -> KgData:
    rng = np.random.default_rng(seed)
    heads = rng.integers(0, num_items, size=2 * num_items)
    tails = rng.integers(num_items, num_items + num_meta, size=2 * num_items)
    return KgData(
        heads=heads.astype(np.intp),
        relations=np.zeros(len(heads), dtype=np.intp),
        tails=tails.astype(np.intp),
        relation_names=("in_group",),
        num_items=num_items,
        num_meta=num_meta,
        entity_map={f"group_{g}": num_items + g for g in range(num_meta)},
    )


def check_full_loss(
    paradigm: str = "intra",
    num_layers: int = 2,
    dim: int = 4,
    kg_enabled: bool = False,
    use_temporal: bool = False,
    lambda_reg: float = 1e-3,
    kg_weight: float = 1.0,
    seed: int = 0,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_probes_per_param: int | None = None,
) -> GradCheckReport:
    """Gradient-check the complete loss for one configuration."""
    behaviors = ("view", "cart", "buy")
    graph = random_check_graph(
        behaviors=behaviors, with_timestamps=use_temporal, seed=seed
    )
    config = ModelConfig(
        dim=dim, num_layers=num_layers, paradigm=paradigm,
        alpha=0.5, use_temporal=use_temporal, behaviors=behaviors,
    )
    params = init_params(config, graph.num_users, graph.num_items, seed=seed)
    temporal = TemporalEncoder(graph, dim) if use_temporal else None
    rank = PriorityRank(("buy", "cart", "view"))
    batch = sample_hbpr_triples(graph, rank, n_negatives=1, seed=seed)
    if not batch.triples:
        raise RuntimeError("no triples on the check graph; widen edge_prob")
    triples = batch.triples

    kg_params = None
    kg_data = None
    corrupted = None
    if kg_enabled:
        kg_data = random_kg_data(graph.num_items, seed=seed)
        kg_params = init_kg_params(
            dim, kg_data.num_items, kg_data.num_meta, len(kg_data.relation_names),
            seed=seed + 1,
        )
        corrupted = np.where(
            kg_data.tails == kg_data.num_items,
            kg_data.num_items + 1,
            kg_data.num_items,
        ).astype(np.intp)

    named = params.named_tensors()
    if kg_params is not None:
        named = named + kg_params.named_tensors()
    tensors = [t for _, t in named]

    def loss() -> Tensor:
        out = forward(graph, config, params, temporal)
        total = ad.scale(hbpr_loss(triples, out, params, config.alpha), 1.0 / len(triples))
        reg = None
        for t in tensors:
            term = ad.l2_norm_sq(t)
            reg = term if reg is None else ad.add(reg, term)
        total = ad.add(total, ad.scale(reg, lambda_reg))
        if kg_params is not None:
            kg_sum, skipped = kg_loss(kg_data, corrupted, kg_params, params.item_emb)
            total = ad.add(total, ad.scale(kg_sum, kg_weight / max(1, len(kg_data) - skipped)))
        return total

    return grad_check(
        loss, tensors, epsilon=epsilon, tolerance=tolerance,
        max_probes_per_param=max_probes_per_param, seed=seed,
    )
