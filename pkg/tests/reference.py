"""Independent naive-loop oracles.

Everything here is recomputed with explicit Python loops straight from the
layer definitions, deliberately sharing no code with the vectorized
implementation under test. Edge lists are plain (user, item) or
(user, item, timestamp) tuples, one list per behavior.
"""
import math

import numpy as np


def naive_softmax(logits):
    exps = [math.exp(x) for x in logits]
    total = sum(exps)
    return [e / total for e in exps]


def naive_sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def naive_temporal_ranks(timestamps):
    """0-based rank of each timestamp among the distinct values."""
    distinct = sorted(set(timestamps))
    index = {t: r for r, t in enumerate(distinct)}
    return [index[t] for t in timestamps]


def naive_temporal_encoding(t, dim):
    pe = np.zeros(dim)
    for eps in range(dim // 2):
        pe[2 * eps] = math.sin(t / 10000 ** (2 * eps / dim))
        pe[2 * eps + 1] = math.cos(t / 10000 ** ((2 * eps + 1) / dim))
    return pe


def _pe_lookup(edges, dim, ranks=None):
    """Map (u, i) -> encoding vector for (u, i, t) edges; None for 2-tuples."""
    if not edges or len(edges[0]) == 2:
        return None
    ts = [e[2] for e in edges]
    rs = naive_temporal_ranks(ts) if ranks is None else [ranks[t] for t in ts]
    return {(e[0], e[1]): naive_temporal_encoding(r, dim) for e, r in zip(edges, rs)}


def naive_attend_one(target_vec, source_vecs, q, k, v):
    """Single-target attention; returns (weights, output)."""
    d = len(target_vec)
    scale = math.sqrt(1.0 / d)
    q_vec = q @ target_vec
    logits = [scale * float(np.dot(q_vec, k @ s)) for s in source_vecs]
    weights = naive_softmax(logits)
    out = np.zeros(d)
    for w, s in zip(weights, source_vecs):
        out += w * (v @ s)
    return weights, out


def naive_intra_layer(num_users, num_items, edges, user_in, item_in, q, k, v,
                      ranks=None):
    """One single-behavior attention pass. ``edges`` may carry timestamps, in
    which case the encoding of the timestamp's rank shifts each source."""
    d = user_in.shape[1]
    pe = _pe_lookup(edges, d, ranks)
    user_out = np.zeros((num_users, d))
    item_out = np.zeros((num_items, d))
    for u in range(num_users):
        nbrs = [e for e in edges if e[0] == u]
        if not nbrs:
            continue
        sources = []
        for e in nbrs:
            s = item_in[e[1]].astype(float).copy()
            if pe is not None:
                s = s + pe[(e[0], e[1])]
            sources.append(s)
        _, user_out[u] = naive_attend_one(user_in[u], sources, q, k, v)
    for i in range(num_items):
        nbrs = [e for e in edges if e[1] == i]
        if not nbrs:
            continue
        sources = []
        for e in nbrs:
            s = user_in[e[0]].astype(float).copy()
            if pe is not None:
                s = s + pe[(e[0], e[1])]
            sources.append(s)
        _, item_out[i] = naive_attend_one(item_in[i], sources, q, k, v)
    return user_out, item_out


def naive_intra_aggregate(parts):
    """Average the non-zero behavior rows; all-zero rows stay zero."""
    n, d = parts[0].shape
    out = np.zeros((n, d))
    for row in range(n):
        present = [p[row] for p in parts if np.any(p[row] != 0.0)]
        if present:
            out[row] = sum(present) / len(present)
    return out


def naive_inter_layer(num_users, num_items, edges_by_behavior, user_in, item_in,
                      attn_q, attn_k, attn_v, shared_q, shared_k, shared_v,
                      ranks=None):
    """Two-phase pass: behavior softmax per connected pair, then neighbor
    attention over the pair messages with the shared transforms."""
    d = user_in.shape[1]
    scale = math.sqrt(1.0 / d)
    pes = [_pe_lookup(edges, d, ranks) for edges in edges_by_behavior]
    pairs = sorted({(e[0], e[1]) for edges in edges_by_behavior for e in edges})

    def pair_message(u, i, tgt_vec, src_vec):
        present = [b for b, edges in enumerate(edges_by_behavior)
                   if any(e[0] == u and e[1] == i for e in edges)]
        shifted = {}
        for b in present:
            s = src_vec.astype(float).copy()
            if pes[b] is not None:
                s = s + pes[b][(u, i)]
            shifted[b] = s
        logits = [scale * float(np.dot(attn_q[b] @ tgt_vec, attn_k[b] @ shifted[b]))
                  for b in present]
        weights = naive_softmax(logits)
        msg = np.zeros(d)
        for w, b in zip(weights, present):
            msg += w * (attn_v[b] @ shifted[b])
        return msg

    def phase2(tgt_vec, msgs):
        _, out = naive_attend_one(tgt_vec, msgs, shared_q, shared_k, shared_v)
        return out

    user_out = np.zeros((num_users, d))
    for u in range(num_users):
        mine = [(uu, i) for (uu, i) in pairs if uu == u]
        if not mine:
            continue
        msgs = [pair_message(u, i, user_in[u], item_in[i]) for (_, i) in mine]
        user_out[u] = phase2(user_in[u], msgs)
    item_out = np.zeros((num_items, d))
    for i in range(num_items):
        mine = [(u, ii) for (u, ii) in pairs if ii == i]
        if not mine:
            continue
        msgs = [pair_message(u, i, item_in[i], user_in[u]) for (u, _) in mine]
        item_out[i] = phase2(item_in[i], msgs)
    return user_out, item_out


def naive_forward(num_users, num_items, edges_by_behavior, paradigm, num_layers,
                  user_emb, item_emb, attn_q, attn_k, attn_v,
                  shared_q=None, shared_k=None, shared_v=None, ranks=None):
    """Stack naive layers; parameter lists are indexed [layer][behavior]."""
    users, items = user_emb.copy(), item_emb.copy()
    for l in range(num_layers):
        if paradigm == "intra":
            parts_u, parts_i = [], []
            for b, edges in enumerate(edges_by_behavior):
                uo, io = naive_intra_layer(
                    num_users, num_items, edges, users, items,
                    attn_q[l][b], attn_k[l][b], attn_v[l][b], ranks,
                )
                parts_u.append(uo)
                parts_i.append(io)
            users = naive_intra_aggregate(parts_u)
            items = naive_intra_aggregate(parts_i)
        else:
            users, items = naive_inter_layer(
                num_users, num_items, edges_by_behavior, users, items,
                attn_q[l], attn_k[l], attn_v[l],
                shared_q[l], shared_k[l], shared_v[l], ranks,
            )
    return users, items


def naive_score(e_u, e_i, diag, alpha):
    total = 0.0
    for t in range(len(e_u)):
        total += e_u[t] * ((1.0 - alpha) * diag[t] + alpha) * e_i[t]
    return total


def naive_hbpr_loss(triples, user_out, item_out, diags, alpha):
    """Sum of -log sigmoid(f(u,b,i+) - f(u,b,i-)) over (u, b, i+, i-)."""
    total = 0.0
    for (u, b, pos, neg) in triples:
        s_pos = naive_score(user_out[u], item_out[pos], diags[b], alpha)
        s_neg = naive_score(user_out[u], item_out[neg], diags[b], alpha)
        total += -math.log(naive_sigmoid(s_pos - s_neg))
    return total


def naive_kg_score(e_h, e_t, rel_vec, proj):
    resid = proj @ e_h + rel_vec - proj @ e_t
    return math.sqrt(float(np.dot(resid, resid)))


def naive_compatible_negatives(num_items, positives_by_behavior, behavior, higher):
    """Items not positive under ``behavior`` nor under any behavior in ``higher``."""
    blocked = set(positives_by_behavior.get(behavior, ()))
    for hb in higher:
        blocked |= set(positives_by_behavior.get(hb, ()))
    return sorted(set(range(num_items)) - blocked)


def naive_rank(scores, exclusions=()):
    """Item ids in descending score order, ascending id on ties."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    banned = set(exclusions)
    return [i for i in order if i not in banned]


def naive_recall(ranked, positives, k):
    top = set(ranked[:k])
    hits = sum(1 for p in positives if p in top)
    return hits / min(k, len(positives))


def naive_ndcg(ranked, positives, k):
    pos = set(positives)
    dcg = 0.0
    for r, item in enumerate(ranked[:k], start=1):
        if item in pos:
            dcg += 1.0 / math.log2(r + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(positives)) + 1))
    return dcg / ideal
