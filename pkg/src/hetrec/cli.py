"""Command-line driver: ingest, train, evaluate, serve-shard, dump-embeddings.

Every failure exits non-zero after printing one line ``<category>: <message>``
to stderr, where category is one of ``config_error``, ``graph_error``,
``io_error``, ``checkpoint_error``, ``transport_error`` or ``internal_error``.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_override
from .evaluation import EvalConfig, evaluate, per_user_recall, write_report
from .graph import GraphError, HetGraph, _data_lines, build_graph, read_edges, read_interactions, \
    read_side_info, temporal_split, write_interactions
from .models import DenseParams, ModelConfig, feature_matrix
from .ps import CheckpointError, EmbeddingTable, ParamServer, TransportError, read_checkpoint, serve_shard, \
    write_checkpoint
from .trainer import ConfigError, Trainer, embed_nodes, warm_start
from .walks import MetaPath, WalkConfig, parse_metapath

log = logging.getLogger("hetrec")

EXIT_CODES = {"config_error": 2, "graph_error": 3, "io_error": 4, "checkpoint_error": 5,
              "transport_error": 6, "internal_error": 1}

SPARSE_CKPT = "sparse.ckpt"
DENSE_CKPT = "dense.ckpt"


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# shared plumbing ------------------------------------------------------------

def load_graph(cfg: RunConfig) -> HetGraph:
    if not cfg["graph.schema"]:
        raise ConfigError("graph.schema is empty")
    if not cfg["graph.edges_path"]:
        raise ConfigError("graph.edges_path is not set")
    edges = read_edges(cfg["graph.edges_path"])
    side = read_side_info(cfg["graph.side_info_path"]) if cfg["graph.side_info_path"] else None
    return build_graph(cfg["graph.schema"], edges, side)


def metapaths(cfg: RunConfig, g: HetGraph) -> list[MetaPath]:
    if not cfg["walk.metapaths"]:
        raise ConfigError("walk.metapaths is empty")
    return [parse_metapath(m, g) for m in cfg["walk.metapaths"]]


def user_item_types(cfg: RunConfig, g: HetGraph) -> tuple[str, str, str]:
    """(user type, item type, edge type) from the first step of the first metapath."""
    step = metapaths(cfg, g)[0].steps[0]
    return step.src_type, step.dst_type, step.name


def model_config(cfg: RunConfig, g: HetGraph) -> ModelConfig:
    return cfg.model_config(g.relation_names)


def make_ps(cfg: RunConfig) -> ParamServer:
    if cfg["ps.endpoints"]:
        ps = ParamServer.remote(cfg["ps.endpoints"])
        if ps.dim != cfg["model.dim"]:
            raise ConfigError(f"shards serve dim {ps.dim} but model.dim is {cfg['model.dim']}")
        return ps
    return ParamServer.local(cfg["ps.shards"], cfg["model.dim"], cfg["train.seed"], lr=cfg["train.sparse_lr"])


def all_sparse_keys(g: HetGraph, use_side_info: bool) -> np.ndarray:
    keys = [feature_matrix(g, g.keys(t), use_side_info)[0] for t in g.node_types if g.num_nodes(t)]
    return np.unique(np.concatenate(keys)).astype(np.uint64) if keys else np.zeros(0, np.uint64)


def save_dense(path, params: DenseParams, relations, dim: int) -> int:
    keys, rows = params.to_records(relations)
    return write_checkpoint(path, dim, keys, rows.reshape(len(keys), dim))


def load_dense(path, relations) -> DenseParams:
    keys, rows = read_checkpoint(path)
    return DenseParams.from_records(keys, rows, relations)


def load_embeddings(cfg: RunConfig, g: HetGraph, checkpoint, dense_path=None):
    """A ParamServer restored from ``checkpoint`` plus dense params for GNN models."""
    mcfg = model_config(cfg, g)
    ps = ParamServer.local(1, cfg["model.dim"], cfg["train.seed"])
    ps.load(checkpoint)
    params = None
    if mcfg.is_gnn:
        dense_path = dense_path or Path(checkpoint).with_name(DENSE_CKPT)
        params = load_dense(dense_path, g.relation_names) if os.path.exists(dense_path) else \
            DenseParams.init(mcfg)
    return ps, mcfg, params


def read_truth(path) -> dict[str, set[str]]:
    """``user<TAB>item[<TAB>...]`` rows; interaction logs are accepted as-is."""
    truth: dict[str, set[str]] = {}
    for lineno, cols in _data_lines(path):
        if len(cols) < 2:
            raise GraphError(f"{path}:{lineno}: expected user and item columns")
        truth.setdefault(cols[0], set()).add(cols[1])
    return truth


# commands ------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    g = load_graph(cfg)
    for m in cfg["walk.metapaths"]:
        parse_metapath(m, g)
    out = sys.stdout
    out.write(f"node_types\t{len(g.node_types)}\n")
    for t in g.node_types:
        out.write(f"nodes\t{t}\t{g.num_nodes(t)}\n")
    stats = g.degree_stats()
    for t in g.relations:
        lo, mean, hi = stats[t.name]
        out.write(f"edge_type\t{t.name}\t{g.num_edges(t.name)}\tdeg_min={lo}\tdeg_mean={mean:.3f}\tdeg_max={hi}\n")
    if args.split:
        if not args.output_dir:
            raise ConfigError("--split needs --output-dir")
        os.makedirs(args.output_dir, exist_ok=True)
        parts = temporal_split(read_interactions(args.split))
        for name, part in zip(("train", "val", "test"), parts):
            write_interactions(part, Path(args.output_dir) / f"{name}.tsv")
            out.write(f"split\t{name}\t{len(part.records)}\n")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    g = load_graph(cfg)
    mps = metapaths(cfg, g)
    mcfg = model_config(cfg, g)
    # echoed unconditionally so every run is reproducible from its stderr
    sys.stderr.write("resolved config:\n" + cfg.dump())
    ps = make_ps(cfg)
    out_dir = Path(args.output_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    sparse_path, dense_path = out_dir / SPARSE_CKPT, out_dir / DENSE_CKPT
    (out_dir / "config.yaml").write_text(cfg.dump(), encoding="utf-8")

    if cfg["train.warm_start_path"]:
        n = warm_start(ps, cfg["train.warm_start_path"])
        log.info("warm start: %d entries from %s", n, cfg["train.warm_start_path"])
    tcfg = cfg.train_config(abort_checkpoint=str(sparse_path))
    trainer = Trainer(g, mcfg, tcfg, ps)
    walk_cfg = WalkConfig(mps, cfg["walk.len"], cfg["walk.per_node"], cfg["train.seed"], cfg["train.workers"])

    def on_signal(signum, frame):
        log.warning("signal %d: stopping after the current batch", signum)
        trainer.stop.set()

    previous = {s: signal.signal(s, on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        with open(out_dir / "metrics.tsv", "w", encoding="utf-8") as metrics:
            metrics.write("step\tpairs_done\tloss\tpairs_per_sec\n")
            result = trainer.fit(walk_cfg, cfg.pipeline_config(), metrics)
    finally:
        for s, h in previous.items():
            signal.signal(s, h)
    # every node (and slot) gets an entry, so untouched ones hold their lazy init
    ps.pull(all_sparse_keys(g, mcfg.use_side_info))
    n = ps.save(sparse_path)
    save_dense(dense_path, result.params, g.relation_names, mcfg.dim)
    print(f"trained\tpairs={result.stats.pairs}\tsteps={result.stats.steps}\tentries={n}\t"
          f"checkpoint={sparse_path}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    if not args.checkpoint or not args.truth:
        raise ConfigError("evaluate needs --checkpoint and --truth")
    g = load_graph(cfg)
    utype, itype, etype = user_item_types(cfg, g)
    ps, mcfg, params = load_embeddings(cfg, g, args.checkpoint, args.dense)
    fanouts = cfg["pipeline.fanouts"]
    U = embed_nodes(g, ps, mcfg, params, utype, fanouts, cfg["train.seed"])
    I = embed_nodes(g, ps, mcfg, params, itype, fanouts, cfg["train.seed"])
    history = {u: g.neighbors(u, etype).tolist() for u in range(g.num_nodes(utype))}
    item_index = dict(zip(g.node_ids(itype), range(g.num_nodes(itype))))
    user_index = dict(zip(g.node_ids(utype), range(g.num_nodes(utype))))
    truth: dict[int, set[int]] = {}
    unknown = -1
    for uid, items in read_truth(args.truth).items():
        if uid not in user_index:
            log.warning("truth user %s is not in the graph; skipped", uid)
            continue
        ids = set()
        for i in items:
            if i in item_index:
                ids.add(item_index[i])
            else:
                # never retrievable, but still counts against recall
                ids.add(unknown)
                unknown -= 1
        truth[user_index[uid]] = ids
    base = cfg.eval_config()
    ks = args.k or [base.K]
    rows = []
    for K in ks:
        ecfg = EvalConfig(N=base.N, K=K, strategy=base.strategy, exclude_train=base.exclude_train)
        recall, recs = evaluate(U, I, history, truth, ecfg)
        rows.append((base.strategy.value, K, recall))
        if args.per_user:
            with open(args.per_user if len(ks) == 1 else f"{args.per_user}.{K}", "w", encoding="utf-8") as fh:
                for u, r in sorted(per_user_recall(recs, truth).items()):
                    fh.write(f"{g.node_id(utype, u)}\t{r:.6f}\n")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            write_report(rows, fh)
    write_report(rows, sys.stdout)
    return 0


def cmd_serve_shard(cfg: RunConfig, args) -> int:
    table = EmbeddingTable(cfg["model.dim"], cfg["train.seed"], lr=cfg["train.sparse_lr"])
    server = serve_shard(table, args.host, args.port, background=True)
    print(f"serving\t{server.endpoint}", flush=True)
    done = []
    signal.signal(signal.SIGTERM, lambda *_: done.append(1))
    try:
        while not done:
            signal.pause() if hasattr(signal, "pause") else None
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        if args.checkpoint:
            table.save(args.checkpoint)
    return 0


def cmd_dump_embeddings(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("dump-embeddings needs --checkpoint")
    g = load_graph(cfg)
    ps, mcfg, params = load_embeddings(cfg, g, args.checkpoint, args.dense)
    types = [args.node_type] if args.node_type else list(g.node_types)
    fh = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for t in types:
            if t not in g.node_types:
                raise GraphError(f"unknown node type {t!r}")
            H = embed_nodes(g, ps, mcfg, params, t, cfg["pipeline.fanouts"], cfg["train.seed"])
            for node_id, row in zip(g.node_ids(t), H):
                fh.write(node_id + "\t" + " ".join(f"{x:.6g}" for x in row) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "evaluate": cmd_evaluate,
            "serve-shard": cmd_serve_shard, "dump-embeddings": cmd_dump_embeddings}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetrec", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--output-dir", help="train: checkpoint directory; ingest: split output directory")
    p.add_argument("--checkpoint", help="sparse checkpoint to read (evaluate, dump) or write on exit (serve)")
    p.add_argument("--dense", help="dense checkpoint; defaults to dense.ckpt beside --checkpoint")
    p.add_argument("--truth", help="evaluate: held-out user<TAB>item rows")
    p.add_argument("--k", type=int, action="append", help="evaluate: report recall at this K (repeatable)")
    p.add_argument("--per-user", help="evaluate: write per-user recall here")
    p.add_argument("--output", help="report or embedding output path (default stdout)")
    p.add_argument("--split", help="ingest: interaction log to split temporally")
    p.add_argument("--node-type", help="dump-embeddings: only this node type")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _classify(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config_error"
    if isinstance(exc, CheckpointError):
        return "checkpoint_error"
    if isinstance(exc, TransportError):
        return "transport_error"
    if isinstance(exc, GraphError):
        return "graph_error"
    if isinstance(exc, OSError):
        return "io_error"
    return "internal_error"


def run(command: str, config_path, overrides=(), args=None) -> int:
    """Run one command; returns the process exit status."""
    try:
        if args is None:
            args = build_parser().parse_args([command, str(config_path)])
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        cfg = RunConfig.load(config_path, [parse_override(o) if isinstance(o, str) else o for o in overrides])
        return COMMANDS[command](cfg, args)
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except Exception as exc:  # noqa: BLE001 - every failure maps to a category
        category, msg = _classify(exc), f"{type(exc).__name__}: {exc}" if _classify(exc) == "internal_error" \
            else str(exc)
    msg = " ".join(msg.split())
    print(f"{category}: {msg}", file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.overrides, args)


if __name__ == "__main__":
    sys.exit(main())
