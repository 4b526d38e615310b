"""Command-line entry point: ``python -m genretrieval <command> [flags]``.

Every command accepts ``--config FILE`` (JSON, or flat ``key = value``
lines); explicit flags win over file values.
"""

from __future__ import annotations

import argparse
import ast
import json
import logging
import signal
import sys
import threading
import time

import numpy as np

from . import evaluation as ev
from .catalog import CatalogError, load_catalog, load_interactions
from .neighbor_index import build_exact_knn, load_graph, save_graph
from .sampler import SamplerConfig, retrieve
from .scoring import FormatError, ShapeError, load_checkpoint, save_checkpoint
from .server import EngineBundle, start_server
from .trainer import TrainConfig, TrainingDiverged, generator_from_sections, generator_sections, train

log = logging.getLogger("genretrieval")

PRODUCTION_CONSTANTS = dict(M=128, H=128, D=4096, T=4, K=1000, max_nbr=32, n_items=10**7)


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors become a single diagnostic line."""

    def error(self, message):
        self.exit(2, f"error: {self.prog}: {message}\n")


def _read_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        return json.loads(text)
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        value = value.strip()
        try:
            out[key.strip()] = ast.literal_eval(value)
        except (SyntaxError, ValueError):
            out[key.strip()] = value
    return out


def _merge(args, defaults: dict) -> dict:
    """Defaults < config file < explicit flags."""
    opts = dict(defaults)
    opts.update({k.replace("-", "_"): v for k, v in _read_config(args.config).items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _need(opts, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise CLIError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _sampler_config(opts) -> SamplerConfig:
    return SamplerConfig(
        T=int(opts.get("T", 4)), K=int(opts.get("K", 1000)), tau=float(opts.get("tau", 0.07)),
        init_subset=opts.get("init_subset"), seed=int(opts.get("seed", 0)), B=float(opts.get("B", 100.0)),
        mode=opts.get("mode", "sum"), final=opts.get("final", "sample"),
    )


def _load_bundle(opts) -> EngineBundle:
    _need(opts, "catalog", "checkpoint", "graph")
    return EngineBundle.load(opts["catalog"], opts["checkpoint"], opts["graph"], _sampler_config(opts))


# -- commands -----------------------------------------------------------------


def cmd_gen_synthetic(opts):
    _need(opts, "out")
    spec = ev.SyntheticSpec(
        n_clusters=int(opts.get("clusters", 20)),
        items_per_cluster=int(opts.get("items_per_cluster", 500)),
        subclusters=int(opts.get("subclusters", 10)),
        n_users=int(opts.get("users", 5000)),
        history_len=int(opts.get("history_len", 20)),
        tags=tuple(opts.get("tags", "CPR,PPR,RSA,RSB").split(",")),
        unseen_frac=float(opts.get("unseen_frac", 0.1)),
        seed=int(opts.get("seed", 0)),
    )
    paths = ev.gen_synthetic(spec).write(opts["out"])
    for name, path in paths.items():
        print(f"{name}\t{path}")


def cmd_train(opts):
    _need(opts, "catalog", "interactions", "checkpoint")
    catalog = load_catalog(opts["catalog"])
    records = load_interactions(opts["interactions"], n_items=catalog.n_items)
    cfg = TrainConfig(
        lr=float(opts.get("lr", 0.01)), batch_size=int(opts.get("batch_size", 256)),
        epochs=int(opts.get("epochs", 5)), seed=int(opts.get("seed", 0)), n_neg=int(opts.get("n_neg", 512)),
        B=float(opts.get("B", 100.0)), H=int(opts.get("H", 32)), D=int(opts.get("D", 128)),
        M=int(opts.get("M", 8)), embed_dim=int(opts.get("embed_dim", 32)), item_mode=opts.get("mode", "sum"),
        weight_decay=float(opts.get("weight_decay", 0.0)),
    )
    tags = None
    if opts.get("objective_registry"):
        from .catalog import load_objective_registry

        tags = list(load_objective_registry(opts["objective_registry"]))
    result = train(records, catalog, cfg, tags=tags)
    extra, meta = generator_sections(result.generator)
    save_checkpoint(opts["checkpoint"], result.mapping, extra, meta)
    for epoch, loss in enumerate(result.losses, 1):
        print(f"epoch {epoch}\tloss {loss:.6f}")


def cmd_build_index(opts):
    _need(opts, "catalog", "checkpoint", "graph")
    catalog = load_catalog(opts["catalog"])
    mapping, _, _ = load_checkpoint(opts["checkpoint"], catalog.text_features)
    graph = build_exact_knn(mapping, int(opts.get("degree", 32)), mode=opts.get("mode", "sum"))
    save_graph(graph, opts["graph"])
    print(f"graph\t{opts['graph']}\tn={graph.n_items}\tdegree={graph.degree}")


def cmd_retrieve(opts):
    bundle = _load_bundle(opts)
    request = {
        "history": [int(x) for x in str(opts.get("history", "")).split(",") if x.strip()],
        "objective": opts.get("objective", "CPR"),
        "k": bundle.config.K,
        "seed": bundle.config.seed,
    }
    if opts.get("query"):
        request["query"] = opts["query"]
    out = bundle.handle(request)
    if "warning" in out:
        print("warning: " + out["warning"], file=sys.stderr)
    for i, s in zip(out["items"], out["scores"]):
        print(f"{i}\t{s:.6f}")


def cmd_evaluate(opts):
    _need(opts, "catalog", "checkpoint", "graph", "interactions")
    catalog = load_catalog(opts["catalog"])
    mapping, extra, meta = load_checkpoint(opts["checkpoint"], catalog.text_features)
    gen = generator_from_sections(extra, meta)
    graph = load_graph(opts["graph"])
    cfg = _sampler_config(opts)
    records = load_interactions(opts["interactions"], n_items=catalog.n_items)
    max_records = int(opts.get("max_records", 500))
    if len(records) > max_records:
        records = records[:: -(-len(records) // max_records)]
    report = ev.EvalReport()
    t0 = time.perf_counter()
    F = ev.query_blocks(gen, records)
    truths = [r.positives for r in records]
    exact = ev.exact_retrieval(mapping, F, cfg.K, cfg.B, cfg.mode)
    for tag in sorted({r.objective_tag for r in records}):
        idx = [j for j, r in enumerate(records) if r.objective_tag == tag]
        report.recall_by_objective[tag] = ev.mean_recall([exact[j] for j in idx], [truths[j] for j in idx], cfg.K)
    report.baselines["random"] = ev.random_baseline(catalog.n_items, cfg.K)
    pop = ev.popularity_baseline(catalog, cfg.K)
    report.baselines["popularity"] = ev.mean_recall([pop] * len(records), truths, cfg.K)
    report.timings["exact"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    n_sweep = int(opts.get("sweep_records", 200))
    seeds = range(int(opts.get("seeds", 20)))
    rows, oracle, by_T = ev.precision_sweep(mapping, F[:n_sweep], truths[:n_sweep], graph, cfg, (1, 2, 3, 4, 5), seeds)
    report.precision_by_T, report.oracle_recall = by_T, oracle
    report.timings["sweep"] = time.perf_counter() - t0
    if opts.get("csv"):
        with open(opts["csv"], "w", encoding="utf-8", newline="") as fh:
            fh.write(ev.sweep_csv(rows))

    unseen = ~catalog.seen_flags
    if unseen.any():
        for mode in ("dis", "trans", "sum"):
            r_all, r_unseen = ev.ablate_item_representation(mapping, F, truths, unseen, cfg.K, mode, cfg.B)
            report.ablation[mode] = {"all": r_all, "unseen": r_unseen}
    print(report.to_table())
    if opts.get("report_json"):
        with open(opts["report_json"], "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")


def cmd_flops(opts):
    vals = {k: int(opts.get(k, v)) for k, v in PRODUCTION_CONSTANTS.items()}
    est = ev.flops_estimate(**vals)
    ratio = est.ratio
    print(f"sampled_flops\t{est.sampled}\t({est.sampled / 1e9:.2f}G)")
    print(f"full_flops\t{est.full}\t({est.full / 1e9:.0f}G)")
    print(f"ratio\t{float(ratio):.1f}")
    if opts.get("report_json"):
        with open(opts["report_json"], "w", encoding="utf-8") as fh:
            json.dump({"sampled": est.sampled, "full": est.full, "ratio": float(ratio), **vals}, fh, indent=2)


def cmd_serve(opts):
    bundle = _load_bundle(opts)
    server, thread = start_server(bundle, opts.get("host", "127.0.0.1"), int(opts.get("port", 7000)))
    host, port = server.server_address[:2]
    print(f"serving on {host}:{port}", flush=True)
    stop = threading.Event()

    def _stop(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    while not stop.wait(0.2):
        pass
    server.shutdown()
    server.server_close()
    print("server stopped", flush=True)


# -- parser -------------------------------------------------------------------


def _sampler_flags(p):
    p.add_argument("--T", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--B", type=float)
    p.add_argument("--init-subset", dest="init_subset", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("dis", "trans", "sum"))
    p.add_argument("--final", choices=("sample", "topk_pool"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genretrieval", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config")
        return p

    p = add("gen-synthetic", cmd_gen_synthetic, "write a clustered synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--clusters", type=int)
    p.add_argument("--items-per-cluster", dest="items_per_cluster", type=int)
    p.add_argument("--subclusters", type=int, help="sub-clusters per cluster")
    p.add_argument("--users", type=int)
    p.add_argument("--history-len", dest="history_len", type=int)
    p.add_argument("--tags")
    p.add_argument("--unseen-frac", dest="unseen_frac", type=float)
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "train a checkpoint with NCE")
    for flag in ("--catalog", "--interactions", "--checkpoint", "--objective-registry"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--n-neg", dest="n_neg", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--B", type=float)
    p.add_argument("--H", type=int)
    p.add_argument("--D", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("dis", "trans", "sum"))

    p = add("build-index", cmd_build_index, "build the exact k-NN neighbor graph")
    for flag in ("--catalog", "--checkpoint", "--graph"):
        p.add_argument(flag, dest=flag[2:])
    p.add_argument("--degree", type=int)
    p.add_argument("--mode", choices=("dis", "trans", "sum"))

    p = add("retrieve", cmd_retrieve, "retrieve items for one request")
    for flag in ("--catalog", "--checkpoint", "--graph", "--objective-registry"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"))
    p.add_argument("--history", help="comma-separated item ids, most recent last")
    p.add_argument("--objective")
    p.add_argument("--query")
    _sampler_flags(p)

    p = add("evaluate", cmd_evaluate, "recall, sampling-precision sweep and item-representation ablation")
    for flag in ("--catalog", "--checkpoint", "--graph", "--interactions", "--report-json", "--csv"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"))
    p.add_argument("--seeds", type=int)
    p.add_argument("--max-records", dest="max_records", type=int)
    p.add_argument("--sweep-records", dest="sweep_records", type=int)
    _sampler_flags(p)

    p = add("flops", cmd_flops, "FLOP estimate of sampled vs exhaustive scoring")
    for k in ("M", "H", "D", "T", "K"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--degree", dest="max_nbr", type=int)
    p.add_argument("--n-items", dest="n_items", type=int)
    p.add_argument("--report-json", dest="report_json")

    p = add("serve", cmd_serve, "serve newline-delimited JSON requests over TCP")
    for flag in ("--catalog", "--checkpoint", "--graph", "--objective-registry"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"))
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    _sampler_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    func = args.func
    del args.func, args.command, args.verbose
    try:
        func(_merge(args, {}))
    except (CLIError, CatalogError, FormatError, ShapeError, TrainingDiverged, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
