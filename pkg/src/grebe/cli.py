"""Command-line interface.

One binary, many roles: the data pipeline (ingest), training (single-machine
or as one rank of a cluster), evaluation/export, the sampling benchmark, and
the three long-running services of distributed mode.  Every subcommand takes
--config; progress goes to stderr as structured key=value lines.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .config import ConfigError, load_config
from .util import setup_logging

logger = logging.getLogger("grebe.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="grebe",
        description="Partitioned multi-relation graph embedding trainer and evaluator.",
    )
    p.add_argument("--version", action="version", version=f"grebe {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="path to the config JSON file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--verbose", action="store_true", help="debug logging")

    sp = sub.add_parser("ingest",
                        help="build dictionaries, partitions and bucket files from a TSV edge list")
    common(sp)
    sp.add_argument("--edges", required=True, help="input TSV: source<TAB>relation<TAB>dest")
    sp.add_argument("--out", required=True, help="output data directory")
    sp.add_argument("--min-count", type=int, default=0,
                    help="drop entities appearing fewer than this many times")
    sp.add_argument("--split", default=None,
                    help="train,valid,test fractions, e.g. 0.9,0.05,0.05")

    sp = sub.add_parser("train",
                        help="train embeddings (single machine, or one rank of a cluster)")
    common(sp)
    sp.add_argument("--data", help="ingested data directory (single-machine mode)")
    sp.add_argument("--checkpoint-dir", help="where checkpoints are written (single-machine mode)")
    sp.add_argument("--epochs", type=int, default=None, help="override training.num_epochs")
    sp.add_argument("--workers", type=int, default=None, help="override training.num_workers")
    sp.add_argument("--rank", type=int, default=None, help="rank id (distributed mode)")
    sp.add_argument("--cluster", default=None, help="cluster manifest JSON (distributed mode)")
    sp.add_argument("--sync-interval", type=float, default=0.05,
                    help="shared-parameter sync period in seconds (distributed mode)")
    sp.add_argument("--checkpoint-every-bucket", action="store_true",
                    help="also flush partition state after every bucket")

    sp = sub.add_parser("eval",
                        help="rank held-out edges and report MRR/MR/hits@k")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sp.add_argument("--data", required=True, help="ingested data directory (dictionaries)")
    sp.add_argument("--edges", required=True, help="edge split TSV to evaluate")
    sp.add_argument("--mode", choices=["raw", "filtered"], default="raw")
    sp.add_argument("--candidates", default="all",
                    help="all | sampled:N:prevalence | sampled:N:uniform")
    sp.add_argument("--hits", default="1,10,50", help="comma-separated k values for hits@k")
    sp.add_argument("--filter-edges", default=None,
                    help="comma-separated TSVs of known edges (filtered mode)")
    sp.add_argument("--out", default=None,
                    help="directory for ranks.tsv, summary.json and figures")
    sp.add_argument("--no-plots", action="store_true", help="skip figure rendering")

    sp = sub.add_parser("export",
                        help="write embeddings as TSV: external_id, d floats")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output TSV path")
    sp.add_argument("--type", default=None, help="export only this entity type")

    sp = sub.add_parser("bench",
                        help="measure batched vs per-edge negative sampling throughput")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory (TSV + figure)")
    sp.add_argument("--edges", type=int, default=1_000_000, help="synthetic edge count")
    sp.add_argument("--entities", type=int, default=100_000, help="synthetic entity count")
    sp.add_argument("--bn", default="10,100", help="comma-separated negatives-per-edge values")
    sp.add_argument("--modes", default="batched,naive")
    sp.add_argument("--budget-seconds", type=float, default=3.0, help="time budget per point")

    sp = sub.add_parser("lock-server",
                        help="serve bucket locks and epoch barriers for a cluster")
    common(sp)
    sp.add_argument("--data", required=True, help="ingested data directory (grid shape)")
    sp.add_argument("--bind", default=None, help="host:port (env GREBE_BIND_ADDRESS overrides)")
    sp.add_argument("--num-ranks", type=int, required=True)

    sp = sub.add_parser("partition-server",
                        help="serve embedding partition blobs")
    common(sp)
    sp.add_argument("--bind", default=None)
    sp.add_argument("--spill", default=None, help="spill blobs to this directory instead of RAM")

    sp = sub.add_parser("param-server",
                        help="serve shared parameters (relations, unpartitioned types)")
    common(sp)
    sp.add_argument("--bind", default=None)

    return p


def _apply_seed(cfg, args):
    if args.seed is not None:
        cfg.training.seed = args.seed
    return cfg


def _cmd_ingest(args) -> int:
    from . import ingest

    cfg = _apply_seed(load_config(args.config), args)
    split = None
    if args.split:
        parts = tuple(float(x) for x in args.split.split(","))
        if len(parts) != 3:
            raise ConfigError("--split needs exactly three fractions")
        split = parts
    stats = ingest.run_ingest(
        args.edges, cfg, args.out, min_count=args.min_count, split=split
    )
    logger.info(
        "ingest_done edges=%d dropped=%d buckets=%d",
        stats.edges_total, stats.edges_dropped, len(stats.bucket_counts),
    )
    print(f"ingested {stats.edges_total} edges into {args.out} "
          f"({stats.edges_dropped} dropped)")
    return 0


def _cmd_train(args) -> int:
    cfg = _apply_seed(load_config(args.config), args)
    if (args.rank is None) != (args.cluster is None):
        raise ConfigError("distributed mode needs both --rank and --cluster")
    if args.rank is not None:
        from .distributed import ClusterSpec, distributed_train

        spec = ClusterSpec.load(args.cluster)
        result = distributed_train(
            cfg, args.rank, spec,
            num_epochs=args.epochs, num_workers=args.workers,
            sync_interval_s=args.sync_interval,
        )
    else:
        if not args.data or not args.checkpoint_dir:
            raise ConfigError("single-machine mode needs --data and --checkpoint-dir")
        from .trainer import run_epochs

        result = run_epochs(
            cfg, args.data, args.checkpoint_dir,
            num_epochs=args.epochs, num_workers=args.workers,
            checkpoint_every_bucket=args.checkpoint_every_bucket,
        )
    _write_train_stats(result, args)
    return 0


def _write_train_stats(result, args) -> None:
    import json

    if not result or not result.checkpoint_dir:
        return
    stats = {
        "epochs": [
            {
                "epoch": e.epoch,
                "seconds": e.seconds,
                "edges": e.edges,
                "mean_loss": e.mean_loss,
                "loads": e.loads,
                "evictions": e.evictions,
            }
            for e in result.epochs
        ],
        "peak_resident_rows": result.holder_stats.peak_partitioned_rows,
    }
    path = os.path.join(result.checkpoint_dir, "stats.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2)
        f.write("\n")


def _cmd_eval(args) -> int:
    from . import report
    from .evaluator import EvalSettings, evaluate
    from .model import load_checkpoint

    cfg = _apply_seed(load_config(args.config), args)
    model, _ = load_checkpoint(args.checkpoint, cfg)
    settings = EvalSettings(
        mode=args.mode,
        candidates=args.candidates,
        hits_at=tuple(int(k) for k in args.hits.split(",")),
        seed=cfg.training.seed,
    )
    filters = args.filter_edges.split(",") if args.filter_edges else None
    rep = evaluate(args.edges, model, args.data, settings, filter_paths=filters)
    print(rep.summary_line())
    if args.out:
        files = report.eval_report_files(rep, args.out, plots=not args.no_plots)
        logger.info("eval_report files=%s", ",".join(files))
    return 0


def _cmd_export(args) -> int:
    from .evaluator import export_embeddings
    from .model import load_checkpoint

    cfg = _apply_seed(load_config(args.config), args)
    model, _ = load_checkpoint(args.checkpoint, cfg)
    n = export_embeddings(model, args.data, args.out, entity_type=args.type)
    print(f"exported {n} embeddings to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    from . import report
    from .bench import run_bench

    cfg = _apply_seed(load_config(args.config), args)
    results = run_bench(
        dim=cfg.training.dimension,
        n_entities=args.entities,
        n_edges=args.edges,
        bn_values=tuple(int(x) for x in args.bn.split(",")),
        modes=tuple(args.modes.split(",")),
        budget_s=args.budget_seconds,
        seed=cfg.training.seed,
        learning_rate=cfg.training.learning_rate,
    )
    os.makedirs(args.out, exist_ok=True)
    report.write_bench_tsv(results, os.path.join(args.out, "throughput.tsv"))
    report.save_throughput_figure(results, os.path.join(args.out, "throughput.png"))
    for r in results:
        print(f"bench mode={r.mode} negatives={r.bn} edges_per_second={r.edges_per_second:.0f}")
    return 0


def _serve_forever(service, bind):
    import time

    srv, addr = service.serve(bind)
    print(f"serving on {addr}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        srv.shutdown()
    return 0


def _cmd_lock_server(args) -> int:
    from . import ingest
    from .distributed import LockServer

    load_config(args.config)  # validate
    meta = ingest.load_meta(args.data)
    n_src, n_dst = meta["grid"]
    return _serve_forever(LockServer(n_src, n_dst, args.num_ranks), args.bind)


def _cmd_partition_server(args) -> int:
    from .distributed import PartitionServer

    load_config(args.config)
    return _serve_forever(PartitionServer(spill_dir=args.spill), args.bind)


def _cmd_param_server(args) -> int:
    from .distributed import ParamServer

    cfg = load_config(args.config)
    return _serve_forever(ParamServer(learning_rate=cfg.training.learning_rate), args.bind)


_COMMANDS = {
    "ingest": _cmd_ingest,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "export": _cmd_export,
    "bench": _cmd_bench,
    "lock-server": _cmd_lock_server,
    "partition-server": _cmd_partition_server,
    "param-server": _cmd_param_server,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 1
    setup_logging(verbose=getattr(args, "verbose", False))
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"grebe: config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        logging.getLogger("grebe").exception("command failed")
        print(f"grebe: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
