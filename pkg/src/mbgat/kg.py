"""Item-metadata knowledge graph side objective.

Entities share the item id space: ids below num_items are items and resolve
to the model's item embeddings, metadata values get fresh ids after the
items. Each relation has a translation vector and a projection matrix; the
score is the Euclidean norm of the projected translation residual and the
loss prefers true tails over corrupted ones. There is no message passing
over the KG; it only shapes embeddings through its own loss term.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import DataError


@dataclass
class KgData:
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    relation_names: tuple[str, ...]
    num_items: int
    num_meta: int
    entity_map: dict[str, int]  # external token -> global entity id (>= num_items)

    @property
    def num_entities(self) -> int:
        return self.num_items + self.num_meta

    def __len__(self) -> int:
        return len(self.heads)


@dataclass
class KgParams:
    meta_emb: Tensor            # fresh entities only; item rows live in the model
    rel_emb: list[Tensor]       # translation per relation, length d_r
    rel_proj: list[Tensor]      # projection per relation, d_r x d
    num_items: int

    @property
    def d_r(self) -> int:
        return self.rel_emb[0].shape[0] if self.rel_emb else 0

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("kg.meta_emb", self.meta_emb)]
        for r, t in enumerate(self.rel_emb):
            out.append((f"kg.rel_emb.r{r}", t))
        for r, t in enumerate(self.rel_proj):
            out.append((f"kg.rel_proj.r{r}", t))
        return out


def load_kg_triples(path, relations: Sequence[str], num_items: int) -> KgData:
    """Read head_id,relation,tail_id rows.

    Heads must be item ids. Tail tokens that parse as integers below
    num_items are item entities; any other token is a metadata value and is
    assigned a fresh entity id in first-seen order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"KG triple file not found: {path}")
    relations = tuple(relations)
    if not relations or len(set(relations)) != len(relations):
        raise DataError(f"relation vocabulary must be non-empty and unique, got {relations!r}")
    r_index = {name: i for i, name in enumerate(relations)}
    entity_map: dict[str, int] = {}
    heads, rels, tails = [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file (missing header)")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise DataError(f"line {line_no}: expected 3 fields, got {len(row)}")
            h_tok, r_tok, t_tok = (x.strip() for x in row)
            try:
                h = int(h_tok)
            except ValueError:
                raise DataError(f"line {line_no}: head must be an item id, got '{h_tok}'") from None
            if not 0 <= h < num_items:
                raise DataError(f"line {line_no}: head item id {h} out of range [0, {num_items})")
            if r_tok not in r_index:
                raise DataError(
                    f"line {line_no}: unknown relation '{r_tok}' (vocabulary {list(relations)})"
                )
            if t_tok.lstrip("-").isdigit() and 0 <= int(t_tok) < num_items:
                t = int(t_tok)
            else:
                if t_tok not in entity_map:
                    entity_map[t_tok] = num_items + len(entity_map)
                t = entity_map[t_tok]
            heads.append(h)
            rels.append(r_index[r_tok])
            tails.append(t)
    return KgData(
        heads=np.array(heads, dtype=np.intp),
        relations=np.array(rels, dtype=np.intp),
        tails=np.array(tails, dtype=np.intp),
        relation_names=relations,
        num_items=num_items,
        num_meta=len(entity_map),
        entity_map=entity_map,
    )


def save_relation_vocab(relations: Sequence[str], path) -> None:
    Path(path).write_text(json.dumps(list(relations), indent=2) + "\n")


def load_relation_vocab(path) -> tuple[str, ...]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"relation vocabulary file not found: {path}")
    return tuple(json.loads(path.read_text()))


def init_kg_params(
    dim: int,
    num_items: int,
    num_meta: int,
    num_relations: int,
    seed: int = 0,
    d_r: int | None = None,
) -> KgParams:
    if d_r is None:
        d_r = dim
    rng = np.random.default_rng(seed)
    emb_std = 1.0 / math.sqrt(dim)
    rel_std = 1.0 / math.sqrt(d_r)
    w_std = math.sqrt(2.0 / (d_r + dim))
    meta = Tensor(rng.normal(0.0, emb_std, size=(num_meta, dim)), requires_grad=True)
    rel_emb = [Tensor(rng.normal(0.0, rel_std, size=d_r), requires_grad=True)
               for _ in range(num_relations)]
    rel_proj = [Tensor(rng.normal(0.0, w_std, size=(d_r, dim)), requires_grad=True)
                for _ in range(num_relations)]
    return KgParams(meta_emb=meta, rel_emb=rel_emb, rel_proj=rel_proj, num_items=num_items)


def kg_params_to_arrays(kg_params: KgParams) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in kg_params.named_tensors()}


def _entity_rows(ids: np.ndarray, kg_params: KgParams, item_emb: Tensor) -> Tensor:
    """Gather entity embeddings, routing item ids to the item table."""
    ids = np.asarray(ids, dtype=np.intp)
    n_items = kg_params.num_items
    is_item = ids < n_items
    if np.all(is_item):
        return ad.gather_rows(item_emb, ids)
    if not np.any(is_item):
        return ad.gather_rows(kg_params.meta_emb, ids - n_items)
    item_pos = np.nonzero(is_item)[0]
    meta_pos = np.nonzero(~is_item)[0]
    n = len(ids)
    item_part = ad.put(ad.gather_rows(item_emb, ids[item_pos]), item_pos, n)
    meta_part = ad.put(ad.gather_rows(kg_params.meta_emb, ids[meta_pos] - n_items), meta_pos, n)
    return ad.add(item_part, meta_part)


def kg_scores(
    heads: np.ndarray,
    relations: np.ndarray,
    tails: np.ndarray,
    kg_params: KgParams,
    item_emb: Tensor,
) -> Tensor:
    """Differentiable batch of g(h, r, t) = ||W_r e_h + e_r - W_r e_t||."""
    heads = np.asarray(heads, dtype=np.intp)
    relations = np.asarray(relations, dtype=np.intp)
    tails = np.asarray(tails, dtype=np.intp)
    n = len(heads)
    n_ent = kg_params.num_items + kg_params.meta_emb.shape[0]
    for name, ids in (("head", heads), ("tail", tails)):
        if len(ids) and (ids.min() < 0 or ids.max() >= n_ent):
            raise ValueError(f"unknown {name} entity id outside [0, {n_ent})")
    if len(relations) and (relations.min() < 0 or relations.max() >= len(kg_params.rel_emb)):
        raise ValueError(f"unknown relation id outside [0, {len(kg_params.rel_emb)})")
    total = None
    for r in range(len(kg_params.rel_emb)):
        pos = np.nonzero(relations == r)[0]
        if len(pos) == 0:
            continue
        h_rows = _entity_rows(heads[pos], kg_params, item_emb)
        t_rows = _entity_rows(tails[pos], kg_params, item_emb)
        diff = ad.linear(ad.sub(h_rows, t_rows), kg_params.rel_proj[r])
        resid = ad.add_rowvec(diff, kg_params.rel_emb[r])
        g = ad.sqrt(ad.row_sum(ad.mul(resid, resid)))
        piece = ad.put(g, pos, n)
        total = piece if total is None else ad.add(total, piece)
    if total is None:
        return Tensor(np.zeros(n))
    return total


def kg_score(
    head: int, relation: int, tail: int, kg_params: KgParams, item_emb: Tensor
) -> float:
    """Score a single triple (forward only)."""
    t = kg_scores(
        np.array([head]), np.array([relation]), np.array([tail]), kg_params, item_emb
    )
    return float(t.data[0])


def kg_loss(
    kg: KgData,
    corrupted_tails: np.ndarray,
    kg_params: KgParams,
    item_emb: Tensor,
) -> tuple[Tensor, int]:
    """Sum over triples of -log sigmoid(g(h,r,t') - g(h,r,t)).

    Corrupted tails equal to the true tail are skipped; the count of skipped
    triples is returned alongside the loss.
    """
    corrupted_tails = np.asarray(corrupted_tails, dtype=np.intp)
    if len(corrupted_tails) != len(kg):
        raise ValueError(
            f"{len(corrupted_tails)} corrupted tails for {len(kg)} triples"
        )
    keep = np.nonzero(corrupted_tails != kg.tails)[0]
    skipped = len(kg) - len(keep)
    if len(keep) == 0:
        return Tensor(0.0), skipped
    g_true = kg_scores(kg.heads[keep], kg.relations[keep], kg.tails[keep], kg_params, item_emb)
    g_corr = kg_scores(kg.heads[keep], kg.relations[keep], corrupted_tails[keep], kg_params, item_emb)
    # -log sigmoid(x) == softplus(-x), stable in both tails
    margin = ad.sub(g_corr, g_true)
    return ad.sum(ad.softplus(ad.neg(margin))), skipped


def sample_corrupted_tails(kg: KgData, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw per triple from the tail domain of its relation."""
    out = np.empty(len(kg), dtype=np.intp)
    for r in range(len(kg.relation_names)):
        pos = np.nonzero(kg.relations == r)[0]
        if len(pos) == 0:
            continue
        domain = np.unique(kg.tails[pos])
        out[pos] = rng.choice(domain, size=len(pos), replace=True)
    return out
