"""Joint training of the ranking loss and the optional KG side loss.

Plain SGD with a constant learning rate; the per-step loss is the batch mean
of the pairwise ranking terms plus lambda * ||Theta||^2 over all parameters
plus kg_weight times the mean KG term. Everything that draws randomness is
seeded, so equal seeds give bit-identical checkpoints.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .evaluation import EvalSpec, MetricsTable, evaluate
from .graph import DataError, Interaction, MultiBehaviorGraph
from .kg import KgData, KgParams, init_kg_params, kg_loss, kg_params_to_arrays, sample_corrupted_tails
from .model import (
    LayerOutput,
    ModelConfig,
    ModelParams,
    TemporalEncoder,
    forward,
    init_params,
    pair_scores,
    params_to_arrays,
    save_checkpoint,
)
from .sampling import (
    HbprTriple,
    PriorityRank,
    SubGraph,
    TripleBatch,
    sample_hbpr_triples,
    sample_subgraph,
    subgraph_hbpr_training_set,
    triples_to_arrays,
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameters."""


@dataclass
class SubgraphMode:
    kernel_size: int
    hops: int = 2
    fanout: int | Mapping = 10
    resample_each_epoch: bool = True

    def __post_init__(self):
        if self.kernel_size < 1:
            raise DataError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.hops < 1:
            raise DataError(f"hops must be >= 1, got {self.hops}")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    lambda_reg: float = 1e-4
    epochs: int = 10
    batch_size: int = 1024
    n_negatives: int | Mapping = 1
    kg_enabled: bool = False
    kg_weight: float = 1.0
    seed: int = 0
    subgraph: SubgraphMode | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lambda_reg < 0:
            raise DataError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.kg_weight < 0:
            raise DataError(f"kg_weight must be >= 0, got {self.kg_weight}")

    def to_dict(self) -> dict:
        out = {
            "learning_rate": self.learning_rate,
            "lambda_reg": self.lambda_reg,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "n_negatives": self.n_negatives if not isinstance(self.n_negatives, Mapping)
            else dict(self.n_negatives),
            "kg_enabled": self.kg_enabled,
            "kg_weight": self.kg_weight,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }
        if self.subgraph is not None:
            out["subgraph"] = {
                "kernel_size": self.subgraph.kernel_size,
                "hops": self.subgraph.hops,
                "fanout": self.subgraph.fanout if not isinstance(self.subgraph.fanout, Mapping)
                else dict(self.subgraph.fanout),
                "resample_each_epoch": self.subgraph.resample_each_epoch,
            }
        return out


def hbpr_loss(
    triples: TripleBatch | Sequence[HbprTriple],
    out: LayerOutput,
    params: ModelParams,
    alpha: float,
) -> Tensor:
    """Sum over triples of -log sigmoid(f(u,b,i+) - f(u,b,i-)).

    The regularizer is the caller's concern, as is any batch-size scaling.
    """
    seq = triples.triples if isinstance(triples, TripleBatch) else list(triples)
    if not seq:
        raise DataError("hbpr_loss needs at least one triple")
    users, behaviors, pos, neg = triples_to_arrays(seq)
    s_pos = pair_scores(out, params, alpha, users, behaviors, pos)
    s_neg = pair_scores(out, params, alpha, users, behaviors, neg)
    margins = ad.sub(s_pos, s_neg)
    # -log sigmoid(x) == softplus(-x)
    return ad.sum(ad.softplus(ad.neg(margins)))


@dataclass
class EpochRecord:
    epoch: int
    hbpr: float
    reg: float
    kg: float
    total: float
    n_triples: int
    skipped_pairs: int
    kg_skipped: int
    seconds: float
    val: list | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "hbpr": self.hbpr,
            "reg": self.reg,
            "kg": self.kg,
            "total": self.total,
            "n_triples": self.n_triples,
            "skipped_pairs": self.skipped_pairs,
            "kg_skipped": self.kg_skipped,
            "seconds": self.seconds,
            "val": self.val,
        }


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def to_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


@dataclass
class TrainResult:
    params: ModelParams
    kg_params: KgParams | None
    report: TrainReport


def _named_parameters(params: ModelParams, kg_params: KgParams | None) -> list[tuple[str, Tensor]]:
    out = params.named_tensors()
    if kg_params is not None:
        out += kg_params.named_tensors()
    return out


def _checkpoint_arrays(params: ModelParams, kg_params: KgParams | None) -> dict[str, np.ndarray]:
    arrays = params_to_arrays(params)
    if kg_params is not None:
        arrays.update(kg_params_to_arrays(kg_params))
    return arrays


def _val_metric(table: MetricsTable, behavior: str, k: int) -> float:
    try:
        row = table.get(behavior, k)
    except KeyError:
        return float("nan")
    return row.ndcg


def train(
    graph: MultiBehaviorGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rank: PriorityRank,
    val_data: Sequence[Interaction] | None = None,
    eval_spec: EvalSpec | None = None,
    kg_data: KgData | None = None,
    checkpoint_dir=None,
    target_behavior: str | None = None,
    positive_pool: Sequence[tuple[int, int, int]] | None = None,
) -> TrainResult:
    """Run the training loop and return parameters plus a per-epoch report.

    ``positive_pool`` restricts which (u, b, i) edges produce positives (used
    by the single-task ablation); sub-graph mode resamples its own pool from
    kernel edges. Validation metrics are computed per epoch when ``val_data``
    is given, propagating over the full training graph.
    """
    cfg = train_config
    params = init_params(model_config, graph.num_users, graph.num_items, seed=cfg.seed)
    kg_params = None
    if cfg.kg_enabled:
        if kg_data is None:
            raise DataError("kg_enabled is set but no KG triples were given")
        kg_params = init_kg_params(
            model_config.dim, kg_data.num_items, kg_data.num_meta,
            len(kg_data.relation_names), seed=cfg.seed + 1,
        )

    temporal_full = None
    if model_config.use_temporal:
        temporal_full = TemporalEncoder(graph, model_config.dim)
        reference_ts = graph.all_timestamps()

    if eval_spec is None:
        eval_spec = EvalSpec()
    if target_behavior is None:
        target_behavior = graph.behaviors[-1]
    named = _named_parameters(params, kg_params)

    report = TrainReport()
    best_metric = -np.inf
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    config_echo = {
        "model": model_config.to_dict(),
        "train": cfg.to_dict(),
        "num_users": graph.num_users,
        "num_items": graph.num_items,
    }
    if kg_data is not None:
        config_echo["kg"] = {
            "num_meta": kg_data.num_meta,
            "relations": list(kg_data.relation_names),
        }

    active: MultiBehaviorGraph | SubGraph | None = None
    temporal_active = temporal_full
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.subgraph is not None:
            if active is None or cfg.subgraph.resample_each_epoch:
                rng_kernel = np.random.default_rng([cfg.seed, 7, epoch])
                eligible = np.array(
                    [u for u in range(graph.num_users) if len(graph.neighbors(u, "user"))],
                    dtype=np.intp,
                )
                if len(eligible) == 0:
                    raise DataError("no users with training edges to seed the kernel")
                size = min(cfg.subgraph.kernel_size, len(eligible))
                kernel = rng_kernel.choice(eligible, size=size, replace=False)
                active = sample_subgraph(
                    graph, kernel, hops=cfg.subgraph.hops,
                    fanout=cfg.subgraph.fanout, seed=cfg.seed + 17 * epoch,
                )
                if model_config.use_temporal:
                    temporal_active = TemporalEncoder(
                        active.graph, model_config.dim, reference_timestamps=reference_ts
                    )
            batch = subgraph_hbpr_training_set(
                active, rank, n_negatives=cfg.n_negatives, seed=cfg.seed, salt=epoch
            )
            forward_graph = active.graph
        else:
            batch = sample_hbpr_triples(
                graph, rank, n_negatives=cfg.n_negatives, seed=cfg.seed,
                positive_pool=positive_pool, salt=epoch,
            )
            forward_graph = graph
        if not batch.triples:
            raise DataError(f"epoch {epoch}: empty triple set (no usable positives)")

        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(len(batch.triples))
        triples = [batch.triples[j] for j in order]

        corrupted = None
        if cfg.kg_enabled:
            corrupted = sample_corrupted_tails(
                kg_data, np.random.default_rng([cfg.seed, 13, epoch])
            )

        sums = {"hbpr": 0.0, "reg": 0.0, "kg": 0.0, "total": 0.0}
        kg_skipped = 0
        n_steps = 0
        for start in range(0, len(triples), cfg.batch_size):
            chunk = triples[start: start + cfg.batch_size]
            with Tape() as tape:
                out = forward(forward_graph, model_config, params, temporal_active)
                hbpr_mean = ad.scale(hbpr_loss(chunk, out, params, model_config.alpha),
                                     1.0 / len(chunk))
                reg = None
                for _, t in named:
                    term = ad.l2_norm_sq(t)
                    reg = term if reg is None else ad.add(reg, term)
                total = ad.add(hbpr_mean, ad.scale(reg, cfg.lambda_reg))
                if cfg.kg_enabled:
                    kg_sum, kg_skipped = kg_loss(kg_data, corrupted, kg_params, params.item_emb)
                    kg_mean = ad.scale(kg_sum, 1.0 / max(1, len(kg_data) - kg_skipped))
                    total = ad.add(total, ad.scale(kg_mean, cfg.kg_weight))
                else:
                    kg_mean = Tensor(0.0)
            if not np.isfinite(total.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {n_steps}: "
                    f"hbpr={float(hbpr_mean.data)!r} reg={float(reg.data)!r} "
                    f"kg={float(kg_mean.data)!r}"
                )
            tape.backward(total)
            for _, t in named:
                if t.grad is not None:
                    t.data -= cfg.learning_rate * t.grad
                    t.zero_grad()
            sums["hbpr"] += float(hbpr_mean.data)
            sums["reg"] += float(reg.data)
            sums["kg"] += float(kg_mean.data)
            sums["total"] += float(total.data)
            n_steps += 1

        val_rows = None
        val_metric = None
        if val_data is not None:
            table = evaluate(graph, val_data, model_config, params, eval_spec, temporal_full)
            val_rows = [row._asdict() for row in table.rows]
            val_metric = _val_metric(table, target_behavior, eval_spec.ks[0])

        record = EpochRecord(
            epoch=epoch,
            hbpr=sums["hbpr"] / n_steps,
            reg=sums["reg"] / n_steps,
            kg=sums["kg"] / n_steps,
            total=sums["total"] / n_steps,
            n_triples=len(triples),
            skipped_pairs=batch.skipped_pairs,
            kg_skipped=kg_skipped,
            seconds=time.perf_counter() - t0,
            val=val_rows,
        )
        report.epochs.append(record)

        if checkpoint_dir is not None:
            arrays = _checkpoint_arrays(params, kg_params)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_dir / f"checkpoint_epoch{epoch}.bin",
                                config_echo, cfg.seed, arrays)
            if val_metric is not None and np.isfinite(val_metric) and val_metric > best_metric:
                best_metric = val_metric
                report.best_epoch = epoch
                save_checkpoint(checkpoint_dir / "checkpoint_best.bin",
                                config_echo, cfg.seed, arrays)

    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir / "checkpoint_final.bin",
                        config_echo, cfg.seed, _checkpoint_arrays(params, kg_params))
    return TrainResult(params=params, kg_params=kg_params, report=report)


def ablate(
    graph: MultiBehaviorGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rank: PriorityRank,
    target_behavior: str,
    mode: str = "both",
    **train_kwargs,
) -> dict[str, TrainResult]:
    """Train multi-task vs single-task configurations that differ only in the
    triple set: single-task keeps positives of the target behavior only."""
    if target_behavior not in graph.behaviors:
        raise DataError(f"unknown target behavior '{target_behavior}'")
    if mode not in ("both", "multi_task", "single_task"):
        raise DataError(f"mode must be 'both', 'multi_task' or 'single_task', got {mode!r}")
    results: dict[str, TrainResult] = {}
    if mode in ("both", "multi_task"):
        results["multi_task"] = train(
            graph, model_config, train_config, rank,
            target_behavior=target_behavior, **train_kwargs,
        )
    if mode in ("both", "single_task"):
        b = graph.behaviors.index(target_behavior)
        eu, ei, _ = graph.edges(b)
        pool = [(int(u), b, int(i)) for u, i in zip(eu, ei)]
        if not pool:
            raise DataError(f"target behavior '{target_behavior}' has no training edges")
        results["single_task"] = train(
            graph, model_config, train_config, rank,
            target_behavior=target_behavior, positive_pool=pool, **train_kwargs,
        )
    return results
