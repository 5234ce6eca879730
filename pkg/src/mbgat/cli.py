"""Command line pipeline driver.

Subcommands: synth, ingest, split, sample-subgraph, train, eval, grad-check.
One JSON config file carries per-command sections; any key can be overridden
on the command line with repeated --set key.path=value flags. Every run
echoes the effective config plus sha256 hashes of its artifacts into a
manifest in the output directory. Exit codes: 0 success, 1 usage or config
error, 2 data error, 3 divergence or failed check.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from .evaluation import EvalSpec, evaluate
from .gradcheck import check_full_loss
from .graph import (
    ColumnSchema,
    DataError,
    TemporalSplit,
    build_graph,
    load_graph,
    load_interactions,
    save_graph,
    save_id_maps,
    save_interactions_csv,
    temporal_split,
)
from .kg import load_kg_triples, save_relation_vocab
from .model import (
    ModelConfig,
    NonFiniteError,
    TemporalEncoder,
    load_checkpoint,
    params_from_arrays,
)
from .sampling import PriorityRank, behavior_distribution_report, sample_subgraph, save_subgraph
from .synth import SynthConfig, funnel_kg_triples, generate_funnel
from .training import DivergenceError, SubgraphMode, TrainConfig, train


class ConfigError(Exception):
    """Bad config file, unknown key, or invalid setting."""


class CheckFailure(RuntimeError):
    """A requested check (gradient check) did not pass."""


DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "mbgat_run",
    "dataset": {
        "csv": None,
        "behaviors": ["view", "cart", "buy"],
        "priority_rank": ["buy", "cart", "view"],
        "target_behavior": "buy",
        "remap_ids": True,
        "columns": {
            "user": "user_id",
            "item": "item_id",
            "behavior": "behavior",
            "timestamp": "timestamp",
        },
    },
    "split": {"train_end": None, "val_end": None},
    "model": {
        "dim": 32,
        "num_layers": 2,
        "paradigm": "intra",
        "alpha": 0.5,
        "use_temporal": False,
    },
    "train": {
        "learning_rate": 0.05,
        "lambda_reg": 1e-4,
        "epochs": 10,
        "batch_size": 1024,
        "n_negatives": 1,
        "kg_enabled": False,
        "kg_weight": 1.0,
        "checkpoint_every": None,
        "use_subgraph": False,
    },
    "subgraph": {
        "kernel_size": 128,
        "hops": 2,
        "fanout": 10,
        "resample_each_epoch": True,
    },
    "eval": {
        "ks": [10, 50, 100],
        "behaviors": None,
        "exclude_train_positives": True,
        "checkpoint": None,
    },
    "kg": {"csv": None, "relations": ["in_group"]},
    "synth": {
        "num_users": 200,
        "num_items": 100,
        "num_groups": 10,
        "prefs_per_user": 12,
        "p_view": 0.9,
        "p_cart": 0.5,
        "p_buy": 0.25,
        "time_range": 1000,
        "with_kg": False,
    },
    "paths": {
        "interactions": "interactions.csv",
        "graph": "graph",
        "splits": "splits",
        "subgraph": "subgraph",
        "checkpoints": "checkpoints",
        "report": "report.jsonl",
        "metrics": "metrics",
        "gradcheck": "gradcheck.json",
    },
    "gradcheck": {
        "paradigms": ["intra", "inter"],
        "dims": [4],
        "layers": [1, 2],
        "kg": [False, True],
        "temporal": [False, True],
        "epsilon": 1e-5,
        "tolerance": 1e-4,
        "max_probes_per_param": 6,
    },
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _apply_override(config: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"--set expects key.path=value, got '{assignment}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quotes
    node = config
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{key.strip()}'")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key '{key.strip()}'")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), output_dir=None, seed=None) -> dict:
    """Defaults, then the config file, then --set overrides, then flags."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user_cfg, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        config = _deep_merge(config, user_cfg)
    for assignment in overrides:
        _apply_override(config, assignment)
    if output_dir is not None:
        config["output_dir"] = str(output_dir)
    if seed is not None:
        config["seed"] = int(seed)
    return config


def _resolve(out_dir: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else out_dir / p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, artifacts) -> Path:
    hashes: dict[str, str] = {}
    for art in sorted(set(Path(a) for a in artifacts)):
        files = [art] if art.is_file() else sorted(p for p in art.rglob("*") if p.is_file())
        for f in files:
            key = str(f.relative_to(out_dir)) if f.is_relative_to(out_dir) else str(f)
            hashes[key] = _sha256(f)
    manifest = {
        "command": command,
        "config": config,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "mbgat": _package_version(),
        },
        "artifacts": hashes,
    }
    path = out_dir / f"manifest_{command.replace('-', '_')}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _package_version() -> str:
    from . import __version__

    return __version__


def _schema(cfg: dict) -> ColumnSchema:
    cols = cfg["dataset"]["columns"]
    return ColumnSchema(
        user=cols["user"], item=cols["item"],
        behavior=cols["behavior"], timestamp=cols["timestamp"],
    )


def _interactions_input(cfg: dict, out_dir: Path) -> Path:
    given = cfg["dataset"]["csv"]
    if given:
        return Path(given)
    fallback = _resolve(out_dir, cfg["paths"]["interactions"])
    if fallback.exists():
        return fallback
    raise ConfigError(
        "dataset.csv is not set and no interactions file exists in the output directory"
    )


def _train_graph_dir(cfg: dict, out_dir: Path) -> Path:
    split_train = _resolve(out_dir, cfg["paths"]["splits"]) / "train"
    if (split_train / "meta.json").exists():
        return split_train
    return _resolve(out_dir, cfg["paths"]["graph"])


def _model_config(cfg: dict, behaviors) -> ModelConfig:
    m = cfg["model"]
    try:
        return ModelConfig(
            dim=int(m["dim"]),
            num_layers=int(m["num_layers"]),
            paradigm=m["paradigm"],
            alpha=float(m["alpha"]),
            use_temporal=bool(m["use_temporal"]),
            behaviors=tuple(behaviors),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_synth(cfg: dict, out_dir: Path) -> list[Path]:
    s = cfg["synth"]
    try:
        config = SynthConfig(
            num_users=int(s["num_users"]),
            num_items=int(s["num_items"]),
            num_groups=int(s["num_groups"]),
            prefs_per_user=int(s["prefs_per_user"]),
            p_view=float(s["p_view"]),
            p_cart=float(s["p_cart"]),
            p_buy=float(s["p_buy"]),
            time_range=int(s["time_range"]),
            behaviors=tuple(cfg["dataset"]["behaviors"]),
            seed=int(cfg["seed"]),
        )
    except DataError as e:
        raise ConfigError(str(e)) from None
    interactions = generate_funnel(config)
    path = _resolve(out_dir, cfg["paths"]["interactions"])
    save_interactions_csv(interactions, config.behaviors, path)
    artifacts = [path]
    counts = {name: 0 for name in config.behaviors}
    for x in interactions:
        counts[config.behaviors[x.behavior]] += 1
    print(f"synth: {len(interactions)} interactions over "
          f"{config.num_users} users x {config.num_items} items -> {path}")
    print("synth counts: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    if s["with_kg"]:
        kg_path = Path(cfg["kg"]["csv"]) if cfg["kg"]["csv"] else out_dir / "kg_triples.csv"
        kg_path.parent.mkdir(parents=True, exist_ok=True)
        with kg_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["head_id", "relation", "tail_id"])
            for head, rel, tail in funnel_kg_triples(config):
                writer.writerow([head, rel, tail])
        vocab_path = out_dir / "relations.json"
        save_relation_vocab(["in_group"], vocab_path)
        artifacts += [kg_path, vocab_path]
        print(f"synth: wrote KG triples -> {kg_path}")
    return artifacts


def cmd_ingest(cfg: dict, out_dir: Path) -> list[Path]:
    ds = cfg["dataset"]
    src = _interactions_input(cfg, out_dir)
    result = load_interactions(
        src, ds["behaviors"], _schema(cfg), remap_ids=bool(ds["remap_ids"])
    )
    if not result.interactions:
        raise DataError(f"no interactions found in {src}")
    graph = build_graph(
        result.interactions, result.num_users, result.num_items, result.behaviors
    )
    graph_dir = _resolve(out_dir, cfg["paths"]["graph"])
    save_graph(graph, graph_dir)
    save_id_maps(result, graph_dir)
    print(f"ingest: {graph.num_users} users, {graph.num_items} items, "
          f"{graph.edge_count()} edges -> {graph_dir}")
    print("ingest counts: " + ", ".join(f"{k}={v}" for k, v in result.counts.items()))
    return [graph_dir]


def cmd_split(cfg: dict, out_dir: Path) -> list[Path]:
    sp = cfg["split"]
    if sp["train_end"] is None or sp["val_end"] is None:
        raise ConfigError("split.train_end and split.val_end are required")
    train_end, val_end = int(sp["train_end"]), int(sp["val_end"])
    if train_end >= val_end:
        raise ConfigError(f"split.train_end must be < split.val_end, got {train_end} >= {val_end}")
    graph = load_graph(_resolve(out_dir, cfg["paths"]["graph"]))
    train_rows, val_rows, test_rows = temporal_split(
        graph.interactions(), TemporalSplit(train_end, val_end)
    )
    if not train_rows:
        raise DataError("temporal split produced an empty training set")
    splits_dir = _resolve(out_dir, cfg["paths"]["splits"])
    train_graph = build_graph(train_rows, graph.num_users, graph.num_items, graph.behaviors)
    save_graph(train_graph, splits_dir / "train")
    save_interactions_csv(val_rows, graph.behaviors, splits_dir / "val.csv")
    save_interactions_csv(test_rows, graph.behaviors, splits_dir / "test.csv")
    print(f"split: train={len(train_rows)} val={len(val_rows)} test={len(test_rows)} "
          f"-> {splits_dir}")
    return [splits_dir]


def cmd_sample_subgraph(cfg: dict, out_dir: Path) -> list[Path]:
    graph = load_graph(_train_graph_dir(cfg, out_dir))
    sg = cfg["subgraph"]
    rng = np.random.default_rng(int(cfg["seed"]))
    eligible = np.array(
        [u for u in range(graph.num_users) if len(graph.neighbors(u, "user"))],
        dtype=np.intp,
    )
    if len(eligible) == 0:
        raise DataError("no users with edges to seed the kernel")
    size = min(int(sg["kernel_size"]), len(eligible))
    kernel = np.sort(rng.choice(eligible, size=size, replace=False))
    sub = sample_subgraph(
        graph, kernel, hops=int(sg["hops"]), fanout=sg["fanout"], seed=int(cfg["seed"])
    )
    sub_dir = _resolve(out_dir, cfg["paths"]["subgraph"])
    save_subgraph(sub, sub_dir)
    report = behavior_distribution_report(sub)
    (sub_dir / "distribution.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    print(f"sample-subgraph: kernel {size} users -> {len(sub.users)} users, "
          f"{len(sub.items)} items, {sub.graph.edge_count()} edges -> {sub_dir}")
    for name, row in report.items():
        print(f"  {name}: count={row['count']} ratio={row['ratio']:.4f}"
              + (f" parent_ratio={row['parent_ratio']:.4f}" if "parent_ratio" in row else ""))
    return [sub_dir]


def cmd_train(cfg: dict, out_dir: Path) -> list[Path]:
    ds, t = cfg["dataset"], cfg["train"]
    graph = load_graph(_train_graph_dir(cfg, out_dir))
    model_config = _model_config(cfg, graph.behaviors)
    if ds["target_behavior"] not in graph.behaviors:
        raise ConfigError(
            f"dataset.target_behavior '{ds['target_behavior']}' not in {list(graph.behaviors)}"
        )
    try:
        rank = PriorityRank(tuple(ds["priority_rank"]))
        subgraph = None
        if t["use_subgraph"]:
            sg = cfg["subgraph"]
            subgraph = SubgraphMode(
                kernel_size=int(sg["kernel_size"]),
                hops=int(sg["hops"]),
                fanout=sg["fanout"],
                resample_each_epoch=bool(sg["resample_each_epoch"]),
            )
        n_neg = t["n_negatives"]
        train_config = TrainConfig(
            learning_rate=float(t["learning_rate"]),
            lambda_reg=float(t["lambda_reg"]),
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            n_negatives=n_neg if isinstance(n_neg, dict) else int(n_neg),
            kg_enabled=bool(t["kg_enabled"]),
            kg_weight=float(t["kg_weight"]),
            seed=int(cfg["seed"]),
            subgraph=subgraph,
            checkpoint_every=None if t["checkpoint_every"] is None else int(t["checkpoint_every"]),
        )
    except DataError as e:
        raise ConfigError(str(e)) from None

    splits_dir = _resolve(out_dir, cfg["paths"]["splits"])
    val_path = splits_dir / "val.csv"
    val_data = None
    if val_path.exists():
        val_data = load_interactions(val_path, graph.behaviors).interactions

    kg_data = None
    if train_config.kg_enabled:
        kg_path = Path(cfg["kg"]["csv"]) if cfg["kg"]["csv"] else out_dir / "kg_triples.csv"
        kg_data = load_kg_triples(kg_path, cfg["kg"]["relations"], graph.num_items)

    ev = cfg["eval"]
    eval_spec = EvalSpec(
        ks=tuple(ev["ks"]),
        behaviors=None if ev["behaviors"] is None else tuple(ev["behaviors"]),
        exclude_train_positives=bool(ev["exclude_train_positives"]),
    )
    checkpoint_dir = _resolve(out_dir, cfg["paths"]["checkpoints"])
    result = train(
        graph, model_config, train_config, rank,
        val_data=val_data, eval_spec=eval_spec, kg_data=kg_data,
        checkpoint_dir=checkpoint_dir, target_behavior=ds["target_behavior"],
    )
    report_path = _resolve(out_dir, cfg["paths"]["report"])
    result.report.to_jsonl(report_path)
    last = result.report.epochs[-1]
    print(f"train: {len(result.report.epochs)} epochs, final loss {last.total:.6f} "
          f"(hbpr {last.hbpr:.6f}, reg {last.reg:.6f}, kg {last.kg:.6f})")
    if result.report.best_epoch is not None:
        print(f"train: best validation epoch {result.report.best_epoch}")
    print(f"train: checkpoints -> {checkpoint_dir}, report -> {report_path}")
    return [checkpoint_dir, report_path]


def cmd_eval(cfg: dict, out_dir: Path) -> list[Path]:
    ev = cfg["eval"]
    ckpt_path = (
        Path(ev["checkpoint"]) if ev["checkpoint"]
        else _resolve(out_dir, cfg["paths"]["checkpoints"]) / "checkpoint_final.bin"
    )
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    config_echo, _, arrays = load_checkpoint(ckpt_path)
    m = config_echo["model"]
    model_config = ModelConfig(
        dim=m["dim"], num_layers=m["num_layers"], paradigm=m["paradigm"],
        alpha=m["alpha"], use_temporal=m["use_temporal"], behaviors=tuple(m["behaviors"]),
    )
    graph = load_graph(_train_graph_dir(cfg, out_dir))
    if (graph.num_users, graph.num_items) != (config_echo["num_users"], config_echo["num_items"]):
        raise DataError(
            f"checkpoint was trained on {config_echo['num_users']} users x "
            f"{config_echo['num_items']} items, graph has {graph.num_users} x {graph.num_items}"
        )
    if tuple(graph.behaviors) != tuple(model_config.behaviors):
        raise DataError(
            f"behavior vocabulary mismatch: checkpoint {list(model_config.behaviors)}, "
            f"graph {list(graph.behaviors)}"
        )
    params = params_from_arrays(model_config, graph.num_users, graph.num_items, arrays)

    test_path = _resolve(out_dir, cfg["paths"]["splits"]) / "test.csv"
    if not test_path.exists():
        raise DataError(f"test split not found: {test_path}")
    test_data = load_interactions(test_path, graph.behaviors).interactions
    if not test_data:
        raise DataError(f"test split is empty: {test_path}")

    spec = EvalSpec(
        ks=tuple(ev["ks"]),
        behaviors=None if ev["behaviors"] is None else tuple(ev["behaviors"]),
        exclude_train_positives=bool(ev["exclude_train_positives"]),
    )
    temporal = TemporalEncoder(graph, model_config.dim) if model_config.use_temporal else None
    table = evaluate(graph, test_data, model_config, params, spec, temporal)

    metrics_dir = _resolve(out_dir, cfg["paths"]["metrics"])
    metrics_dir.mkdir(parents=True, exist_ok=True)
    table.to_json(metrics_dir / "metrics.json")
    table.to_csv(metrics_dir / "metrics.csv")
    for row in table.rows:
        print(f"eval: {row.behavior:>8s} @{row.k:<4d} recall={row.recall:.6f} "
              f"ndcg={row.ndcg:.6f} ({row.n_users} users)")
    print(f"eval: metrics -> {metrics_dir}")
    return [metrics_dir]


def cmd_grad_check(cfg: dict, out_dir: Path) -> list[Path]:
    g = cfg["gradcheck"]
    results = []
    any_failed = False
    for paradigm in g["paradigms"]:
        for layers in g["layers"]:
            for dim in g["dims"]:
                for kg in g["kg"]:
                    for temporal in g["temporal"]:
                        try:
                            report = check_full_loss(
                                paradigm=paradigm,
                                num_layers=int(layers),
                                dim=int(dim),
                                kg_enabled=bool(kg),
                                use_temporal=bool(temporal),
                                seed=int(cfg["seed"]),
                                epsilon=float(g["epsilon"]),
                                tolerance=float(g["tolerance"]),
                                max_probes_per_param=g["max_probes_per_param"],
                            )
                        except ValueError as e:
                            raise ConfigError(str(e)) from None
                        tag = (f"{paradigm} layers={layers} dim={dim} "
                               f"kg={bool(kg)} temporal={bool(temporal)}")
                        print(f"grad-check {tag}: {report}")
                        results.append({
                            "paradigm": paradigm,
                            "layers": int(layers),
                            "dim": int(dim),
                            "kg": bool(kg),
                            "temporal": bool(temporal),
                            "max_rel_error": report.max_rel_error,
                            "n_probed": report.n_probed,
                            "passed": report.passed,
                        })
                        any_failed = any_failed or not report.passed
    path = _resolve(out_dir, cfg["paths"]["gradcheck"])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    print(f"grad-check: {len(results)} configurations -> {path}")
    if any_failed:
        raise CheckFailure("gradient check failed for at least one configuration")
    return [path]


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "sample-subgraph": cmd_sample_subgraph,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}

_HELP = {
    "synth": "generate a synthetic multi-behavior funnel dataset",
    "ingest": "load an interaction CSV and build the graph",
    "split": "split the graph temporally into train/val/test",
    "sample-subgraph": "sample a kernel-seeded training sub-graph",
    "train": "train the recommendation model",
    "eval": "rank test items and report Recall@K / NDCG@K",
    "grad-check": "verify tape gradients against finite differences",
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mbgat", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="JSON config file")
    common.add_argument("--output-dir", metavar="DIR", help="artifact directory")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config entry, e.g. --set model.dim=16",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, handler in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=_HELP[name])
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        config = load_config(
            args.config, args.overrides, output_dir=args.output_dir, seed=args.seed
        )
        out_dir = Path(config["output_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](config, out_dir)
        manifest = _write_manifest(out_dir, args.command, config, artifacts)
        print(f"manifest -> {manifest}")
        return 0
    except ConfigError as e:
        print(f"mbgat: config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"mbgat: data error: {e}", file=sys.stderr)
        return 2
    except (DivergenceError, NonFiniteError, CheckFailure) as e:
        print(f"mbgat: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
