"""Shared builders for the test suite."""
import numpy as np

from mbgat import Interaction, MultiBehaviorGraph


def random_edges(num_users, num_items, n_behaviors, edge_prob, rng,
                 with_timestamps=False, max_t=7):
    """Plain per-behavior (u, i[, t]) edge tuples; every behavior non-empty."""
    while True:
        edges = [[] for _ in range(n_behaviors)]
        for b in range(n_behaviors):
            for u in range(num_users):
                for i in range(num_items):
                    if rng.random() < edge_prob:
                        if with_timestamps:
                            edges[b].append((u, i, int(rng.integers(0, max_t))))
                        else:
                            edges[b].append((u, i))
        if all(edges):
            return edges


def graph_from_edges(num_users, num_items, behaviors, edges):
    interactions = []
    for b, lst in enumerate(edges):
        for e in lst:
            t = e[2] if len(e) == 3 else None
            interactions.append(Interaction(e[0], e[1], b, t))
    return MultiBehaviorGraph(num_users, num_items, behaviors, interactions)


def extract_arrays(params):
    """Copy the model parameters out as plain numpy arrays."""
    out = {
        "user_emb": params.user_emb.data.copy(),
        "item_emb": params.item_emb.data.copy(),
        "attn_q": [[t.data.copy() for t in row] for row in params.attn_q],
        "attn_k": [[t.data.copy() for t in row] for row in params.attn_k],
        "attn_v": [[t.data.copy() for t in row] for row in params.attn_v],
        "diags": [t.data.copy() for t in params.behavior_diag],
    }
    if params.shared_q is not None:
        out["shared_q"] = [t.data.copy() for t in params.shared_q]
        out["shared_k"] = [t.data.copy() for t in params.shared_k]
        out["shared_v"] = [t.data.copy() for t in params.shared_v]
    else:
        out["shared_q"] = out["shared_k"] = out["shared_v"] = None
    return out


def rank_map(edges_by_behavior):
    """Timestamp -> dense rank over all edges, like the trained encoder."""
    ts = sorted({e[2] for lst in edges_by_behavior for e in lst})
    return {t: r for r, t in enumerate(ts)}
