"""Graph attention model over a multi-behavior interaction graph.

Two propagation paradigms share the parameter layout: "intra" runs one
attention pass per behavior and averages the non-empty behavior outputs;
"inter" first softmaxes across the behaviors present on each connected
(user, item) pair, then attends over the pair messages with layer-shared
parameters. Single head, no residuals, the last layer's output is the final
representation. Scoring interpolates between a per-behavior diagonal
bilinear form and the plain inner product.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import DataError, MultiBehaviorGraph


class NonFiniteError(RuntimeError):
    """A forward pass produced NaN or infinity."""


@dataclass
class ModelConfig:
    dim: int = 32
    num_layers: int = 2
    paradigm: str = "intra"
    alpha: float = 0.5
    use_temporal: bool = False
    behaviors: tuple[str, ...] = ("view", "cart", "buy")

    def __post_init__(self):
        self.behaviors = tuple(self.behaviors)
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be positive, got {self.num_layers}")
        if self.paradigm not in ("intra", "inter"):
            raise ValueError(f"paradigm must be 'intra' or 'inter', got {self.paradigm!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.behaviors or len(set(self.behaviors)) != len(self.behaviors):
            raise ValueError(f"behaviors must be non-empty and unique, got {self.behaviors!r}")
        if self.use_temporal and self.dim % 2 != 0:
            raise ValueError(f"temporal encoding needs an even dim, got {self.dim}")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "num_layers": self.num_layers,
            "paradigm": self.paradigm,
            "alpha": self.alpha,
            "use_temporal": self.use_temporal,
            "behaviors": list(self.behaviors),
        }


@dataclass
class LayerOutput:
    """Representations for every user and item after a propagation step."""

    user_out: Tensor
    item_out: Tensor


@dataclass
class ModelParams:
    user_emb: Tensor
    item_emb: Tensor
    # [layer][behavior] attention transforms
    attn_q: list[list[Tensor]]
    attn_k: list[list[Tensor]]
    attn_v: list[list[Tensor]]
    # layer-shared transforms for the second inter phase (None for intra)
    shared_q: list[Tensor] | None
    shared_k: list[Tensor] | None
    shared_v: list[Tensor] | None
    # per-behavior diagonal of the scoring form, stored as a length-d vector
    behavior_diag: list[Tensor]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("user_emb", self.user_emb), ("item_emb", self.item_emb)]
        for l, per_b in enumerate(self.attn_q):
            for b, t in enumerate(per_b):
                out.append((f"attn_q.l{l}.b{b}", t))
        for l, per_b in enumerate(self.attn_k):
            for b, t in enumerate(per_b):
                out.append((f"attn_k.l{l}.b{b}", t))
        for l, per_b in enumerate(self.attn_v):
            for b, t in enumerate(per_b):
                out.append((f"attn_v.l{l}.b{b}", t))
        if self.shared_q is not None:
            for l, t in enumerate(self.shared_q):
                out.append((f"shared_q.l{l}", t))
            for l, t in enumerate(self.shared_k):
                out.append((f"shared_k.l{l}", t))
            for l, t in enumerate(self.shared_v):
                out.append((f"shared_v.l{l}", t))
        for b, t in enumerate(self.behavior_diag):
            out.append((f"diag.b{b}", t))
        return out


def init_params(
    config: ModelConfig, num_users: int, num_items: int, seed: int = 0
) -> ModelParams:
    """Deterministic initialization.

    Embeddings are N(0, 1/sqrt(d)) i.i.d. so row norms concentrate near 1;
    attention transforms use fan-average scaling; scoring diagonals start at
    ones (so alpha interpolates between two identical forms at init).
    """
    rng = np.random.default_rng(seed)
    d = config.dim
    nb = len(config.behaviors)
    emb_std = 1.0 / math.sqrt(d)
    w_std = math.sqrt(2.0 / (d + d))

    user_emb = Tensor(rng.normal(0.0, emb_std, size=(num_users, d)), requires_grad=True)
    item_emb = Tensor(rng.normal(0.0, emb_std, size=(num_items, d)), requires_grad=True)

    def w():
        return Tensor(rng.normal(0.0, w_std, size=(d, d)), requires_grad=True)

    attn_q = [[w() for _ in range(nb)] for _ in range(config.num_layers)]
    attn_k = [[w() for _ in range(nb)] for _ in range(config.num_layers)]
    attn_v = [[w() for _ in range(nb)] for _ in range(config.num_layers)]
    if config.paradigm == "inter":
        shared_q = [w() for _ in range(config.num_layers)]
        shared_k = [w() for _ in range(config.num_layers)]
        shared_v = [w() for _ in range(config.num_layers)]
    else:
        shared_q = shared_k = shared_v = None
    behavior_diag = [Tensor(np.ones(d), requires_grad=True) for _ in range(nb)]
    return ModelParams(
        user_emb=user_emb,
        item_emb=item_emb,
        attn_q=attn_q,
        attn_k=attn_k,
        attn_v=attn_v,
        shared_q=shared_q,
        shared_k=shared_k,
        shared_v=shared_v,
        behavior_diag=behavior_diag,
    )


# ---------------------------------------------------------------------------
# temporal encoding


def temporal_encoding(t, dim: int) -> np.ndarray:
    """Sinusoidal encoding of numerated timestamps.

    Even slots are sin(t / 10000^(2e/d)), odd slots cos(t / 10000^((2e+1)/d)).
    ``t`` may be a scalar or a 1-D array of non-negative values; output gains
    a trailing axis of length ``dim``.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"temporal encoding needs a positive even dim, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("numerated timestamps must be non-negative")
    e = np.arange(dim // 2, dtype=np.float64)
    sin_div = np.power(10000.0, 2.0 * e / dim)
    cos_div = np.power(10000.0, (2.0 * e + 1.0) / dim)
    out = np.empty(t_arr.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(t_arr[..., None] / sin_div)
    out[..., 1::2] = np.cos(t_arr[..., None] / cos_div)
    return out


class TemporalEncoder:
    """Per-edge encodings using ranks of the distinct timestamps in a graph.

    Ranks are 0-based over the sorted distinct timestamps of the (training)
    graph the encoder was built from, so the encoding is invariant to the
    absolute time unit.
    """

    def __init__(self, graph: MultiBehaviorGraph, dim: int,
                 reference_timestamps: np.ndarray | None = None):
        if not graph.has_timestamps:
            raise DataError("temporal encoding requires edge timestamps")
        self.dim = dim
        if reference_timestamps is None:
            reference_timestamps = graph.all_timestamps()
        self._unique = np.unique(reference_timestamps)
        self._edge_pe = []
        for b in range(graph.num_behaviors):
            _, _, et = graph.edges(b)
            self._edge_pe.append(temporal_encoding(self.rank(et), dim) if len(et) else
                                 np.zeros((0, dim)))
        _, _, rec_t = graph.pair_records()
        if rec_t is not None and len(rec_t):
            self._record_pe = temporal_encoding(self.rank(rec_t), dim)
        else:
            self._record_pe = np.zeros((0, dim))

    def rank(self, t) -> np.ndarray:
        return np.searchsorted(self._unique, np.asarray(t))

    def edge_pe(self, behavior: int) -> np.ndarray:
        """Encodings for edges(behavior) in canonical (user, item) order."""
        return self._edge_pe[behavior]

    def record_pe(self) -> np.ndarray:
        """Encodings for pair_records() order."""
        return self._record_pe


# ---------------------------------------------------------------------------
# propagation layers


def _attend(
    targets_in: Tensor,
    sources_in: Tensor,
    tgt_idx: np.ndarray,
    src_idx: np.ndarray,
    n_targets: int,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    pe: np.ndarray | None,
    capture: list | None,
    tag: dict | None,
) -> Tensor:
    """One attention pass along an edge list grouped by (sorted) target index."""
    d = targets_in.shape[1]
    inv_sqrt_d = math.sqrt(1.0 / d)
    q_edges = ad.gather_rows(ad.linear(targets_in, q), tgt_idx)
    if pe is None:
        k_edges = ad.gather_rows(ad.linear(sources_in, k), src_idx)
        v_edges = ad.gather_rows(ad.linear(sources_in, v), src_idx)
    else:
        # the encoding shifts the source node before its key/value transforms
        shifted = ad.add(ad.gather_rows(sources_in, src_idx), Tensor(pe))
        k_edges = ad.linear(shifted, k)
        v_edges = ad.linear(shifted, v)
    logits = ad.scale(ad.row_sum(ad.mul(q_edges, k_edges)), inv_sqrt_d)
    weights = ad.segment_softmax(logits, tgt_idx, n_targets)
    out = ad.segment_sum(ad.scale_rows(v_edges, weights), tgt_idx, n_targets)
    if capture is not None:
        entry = {"segments": np.array(tgt_idx), "weights": weights.data.copy()}
        if tag:
            entry.update(tag)
        capture.append(entry)
    return out


def intra_layer(
    graph: MultiBehaviorGraph,
    inputs: LayerOutput,
    params: ModelParams,
    layer: int,
    behavior: int,
    temporal: TemporalEncoder | None = None,
    capture: list | None = None,
) -> LayerOutput:
    """Single-behavior attention: users attend over their behavior-b item
    neighbors and vice versa. Nodes with no behavior-b edges get zero rows."""
    q = params.attn_q[layer][behavior]
    k = params.attn_k[layer][behavior]
    v = params.attn_v[layer][behavior]
    eu, ei, _ = graph.edges(behavior)
    pe = temporal.edge_pe(behavior) if temporal is not None else None
    user_rep = _attend(
        inputs.user_out, inputs.item_out, eu, ei, graph.num_users, q, k, v, pe,
        capture, {"phase": "intra", "side": "user", "layer": layer, "behavior": behavior},
    )
    perm = graph.edges_item_order(behavior)
    pe_i = pe[perm] if pe is not None else None
    item_rep = _attend(
        inputs.item_out, inputs.user_out, ei[perm], eu[perm], graph.num_items, q, k, v, pe_i,
        capture, {"phase": "intra", "side": "item", "layer": layer, "behavior": behavior},
    )
    return LayerOutput(user_rep, item_rep)


def intra_aggregate(per_behavior: Sequence[LayerOutput]) -> LayerOutput:
    """Average per-behavior outputs, skipping exact-zero rows.

    A row's weight is 0 for behaviors whose representation is the zero
    vector and 1/(number of non-zero behaviors) otherwise; a node with no
    behaviors at all stays the zero vector.
    """
    if not per_behavior:
        raise ValueError("intra_aggregate needs at least one behavior output")

    def combine(parts: list[Tensor]) -> Tensor:
        nonzero = np.stack([np.any(p.data != 0.0, axis=1) for p in parts], axis=1)
        counts = nonzero.sum(axis=1)
        weights = np.zeros(nonzero.shape, dtype=np.float64)
        active = counts > 0
        weights[active] = nonzero[active] / counts[active, None]
        out = None
        for b, p in enumerate(parts):
            term = ad.scale_rows(p, Tensor(weights[:, b]))
            out = term if out is None else ad.add(out, term)
        return out

    return LayerOutput(
        combine([o.user_out for o in per_behavior]),
        combine([o.item_out for o in per_behavior]),
    )


def _phase1_pair_messages(
    graph: MultiBehaviorGraph,
    tgt_table: Tensor,
    src_table: Tensor,
    tgt_nodes: np.ndarray,
    src_nodes: np.ndarray,
    params: ModelParams,
    layer: int,
    temporal: TemporalEncoder | None,
    capture: list | None,
    side: str,
) -> Tensor:
    """Per-pair messages: softmax across the behaviors present on each pair."""
    rec_pair, rec_b, _ = graph.pair_records()
    n_pairs = len(graph.union_pairs()[0])
    n_rec = len(rec_pair)
    d = tgt_table.shape[1]
    inv_sqrt_d = math.sqrt(1.0 / d)
    pe = temporal.record_pe() if temporal is not None else None

    logits_full = None
    behavior_parts = []  # (positions, value rows)
    for b in range(graph.num_behaviors):
        pos = np.nonzero(rec_b == b)[0]
        if len(pos) == 0:
            continue
        pair_of = rec_pair[pos]
        q_rows = ad.gather_rows(ad.linear(tgt_table, params.attn_q[layer][b]), tgt_nodes[pair_of])
        if pe is None:
            k_rows = ad.gather_rows(ad.linear(src_table, params.attn_k[layer][b]), src_nodes[pair_of])
            v_rows = ad.gather_rows(ad.linear(src_table, params.attn_v[layer][b]), src_nodes[pair_of])
        else:
            shifted = ad.add(ad.gather_rows(src_table, src_nodes[pair_of]), Tensor(pe[pos]))
            k_rows = ad.linear(shifted, params.attn_k[layer][b])
            v_rows = ad.linear(shifted, params.attn_v[layer][b])
        logit_b = ad.scale(ad.row_sum(ad.mul(q_rows, k_rows)), inv_sqrt_d)
        piece = ad.put(logit_b, pos, n_rec)
        logits_full = piece if logits_full is None else ad.add(logits_full, piece)
        behavior_parts.append((pos, v_rows))

    if logits_full is None:
        return Tensor(np.zeros((n_pairs, d)))
    weights = ad.segment_softmax(logits_full, rec_pair, n_pairs)
    messages = None
    for pos, v_rows in behavior_parts:
        contrib = ad.segment_sum(
            ad.scale_rows(v_rows, ad.gather_rows(weights, pos)), rec_pair[pos], n_pairs
        )
        messages = contrib if messages is None else ad.add(messages, contrib)
    if capture is not None:
        capture.append({
            "phase": "inter-behavior", "side": side, "layer": layer,
            "segments": np.array(rec_pair), "weights": weights.data.copy(),
        })
    return messages


def inter_layer(
    graph: MultiBehaviorGraph,
    inputs: LayerOutput,
    params: ModelParams,
    layer: int,
    temporal: TemporalEncoder | None = None,
    capture: list | None = None,
) -> LayerOutput:
    """Two-phase attention over the union neighborhood.

    Phase 1 weighs the behaviors present on each connected pair (per-behavior
    transforms); phase 2 attends over a node's pair messages with the
    layer-shared transforms. Isolated nodes get zero rows.
    """
    if params.shared_q is None:
        raise ValueError("inter_layer needs shared attention parameters (paradigm 'inter')")
    pu, pi = graph.union_pairs()
    d = inputs.user_out.shape[1]
    inv_sqrt_d = math.sqrt(1.0 / d)

    pair_msg_u = _phase1_pair_messages(
        graph, inputs.user_out, inputs.item_out, pu, pi, params, layer, temporal, capture, "user"
    )
    pair_msg_i = _phase1_pair_messages(
        graph, inputs.item_out, inputs.user_out, pi, pu, params, layer, temporal, capture, "item"
    )

    qs, ks, vs = params.shared_q[layer], params.shared_k[layer], params.shared_v[layer]

    def phase2(tgt_table, pair_msgs, seg_nodes, n_targets, side):
        q_rows = ad.gather_rows(ad.linear(tgt_table, qs), seg_nodes)
        k_rows = ad.linear(pair_msgs, ks)
        v_rows = ad.linear(pair_msgs, vs)
        logits = ad.scale(ad.row_sum(ad.mul(q_rows, k_rows)), inv_sqrt_d)
        weights = ad.segment_softmax(logits, seg_nodes, n_targets)
        out = ad.segment_sum(ad.scale_rows(v_rows, weights), seg_nodes, n_targets)
        if capture is not None:
            capture.append({
                "phase": "inter-neighbor", "side": side, "layer": layer,
                "segments": np.array(seg_nodes), "weights": weights.data.copy(),
            })
        return out

    user_out = phase2(inputs.user_out, pair_msg_u, pu, graph.num_users, "user")
    perm = graph.pairs_item_order()
    pair_msg_i_sorted = ad.gather_rows(pair_msg_i, perm)
    item_out = phase2(inputs.item_out, pair_msg_i_sorted, pi[perm], graph.num_items, "item")
    return LayerOutput(user_out, item_out)


def forward(
    graph: MultiBehaviorGraph,
    config: ModelConfig,
    params: ModelParams,
    temporal: TemporalEncoder | None = None,
    capture: list | None = None,
) -> LayerOutput:
    """Run all layers; returns the last layer's representations only."""
    if tuple(graph.behaviors) != tuple(config.behaviors):
        raise ValueError(
            f"graph behaviors {graph.behaviors} do not match config {config.behaviors}"
        )
    if config.use_temporal and temporal is None:
        raise ValueError("config.use_temporal is set but no TemporalEncoder was given")
    state = LayerOutput(params.user_emb, params.item_emb)
    for l in range(config.num_layers):
        if config.paradigm == "intra":
            per_behavior = [
                intra_layer(graph, state, params, l, b, temporal, capture)
                for b in range(graph.num_behaviors)
            ]
            state = intra_aggregate(per_behavior)
        else:
            state = inter_layer(graph, state, params, l, temporal, capture)
        for name, t in (("user", state.user_out), ("item", state.item_out)):
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"non-finite {name} representations after layer {l + 1}")
    return state


# ---------------------------------------------------------------------------
# scoring


def score(
    user: int, behavior: int, item: int, out: LayerOutput, params: ModelParams, alpha: float
) -> float:
    """Behavior-conditioned preference f(u, b, i) on final representations."""
    e_u = out.user_out.data[user]
    e_i = out.item_out.data[item]
    diag = params.behavior_diag[behavior].data
    coeff = (1.0 - alpha) * diag + alpha
    return float(np.sum(e_u * coeff * e_i))


def score_all_items(
    user: int, behavior: int, out: LayerOutput, params: ModelParams, alpha: float
) -> np.ndarray:
    """f(u, b, i) for every item, as one vector."""
    e_u = out.user_out.data[user]
    diag = params.behavior_diag[behavior].data
    coeff = (1.0 - alpha) * diag + alpha
    return out.item_out.data @ (e_u * coeff)


def pair_scores(
    out: LayerOutput,
    params: ModelParams,
    alpha: float,
    users: np.ndarray,
    behaviors: np.ndarray,
    items: np.ndarray,
) -> Tensor:
    """Differentiable batch of f(u, b, i); one score per triple row."""
    users = np.asarray(users, dtype=np.intp)
    behaviors = np.asarray(behaviors, dtype=np.intp)
    items = np.asarray(items, dtype=np.intp)
    n = len(users)
    total = None
    for b in range(len(params.behavior_diag)):
        pos = np.nonzero(behaviors == b)[0]
        if len(pos) == 0:
            continue
        u_rows = ad.gather_rows(out.user_out, users[pos])
        i_rows = ad.gather_rows(out.item_out, items[pos])
        coeff = ad.add(ad.scale(params.behavior_diag[b], 1.0 - alpha), float(alpha))
        s = ad.row_sum(ad.mul_rowvec(ad.mul(u_rows, i_rows), coeff))
        piece = ad.put(s, pos, n)
        total = piece if total is None else ad.add(total, piece)
    if total is None:
        return Tensor(np.zeros(n))
    return total


# ---------------------------------------------------------------------------
# checkpointing: deterministic single-file container


def save_checkpoint(path, config_echo: dict, seed: int, named_arrays: dict[str, np.ndarray]) -> None:
    """JSON header line + raw little-endian float64 payload; byte-stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(named_arrays)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(named_arrays[name], dtype="<f8")
        blob = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        offset += len(blob)
        blobs.append(blob)
    header = {"format": 1, "seed": int(seed), "config": config_echo, "arrays": entries}
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, int, dict[str, np.ndarray]]:
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    return header["config"], header["seed"], arrays


def params_to_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in params.named_tensors()}


def params_from_arrays(
    config: ModelConfig, num_users: int, num_items: int, arrays: dict[str, np.ndarray]
) -> ModelParams:
    params = init_params(config, num_users, num_items, seed=0)
    for name, t in params.named_tensors():
        if name not in arrays:
            raise DataError(f"checkpoint missing array '{name}'")
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != t.data.shape:
            raise DataError(
                f"checkpoint array '{name}' has shape {arr.shape}, expected {t.data.shape}"
            )
        t.data = arr.copy()
    return params
