"""Command-line front end.

Exit codes: 0 success, 1 domain error or bad usage, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .errors import ParamError, PixotError
from .features import Domain, avg_pool, read_feature_map, read_manifest, read_npy, write_feature_map
from .merge import (
    MergeConfig,
    batch_merge,
    convex_merge,
    cost_report,
    read_results,
    split_manifest_file,
    write_merged_set,
)
from .ot import DEFAULT_SIZE_CAP, OTParams, ot_distance
from .retrieval import build_index, load_index, query_exhaustive, query_pruned, save_index

log = logging.getLogger("pixot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_solver_flags(p, pool=False):
    p.add_argument("--mode", choices=["sinkhorn", "exact"], default="sinkhorn")
    beta = p.add_mutually_exclusive_group()
    beta.add_argument("--beta", type=float, help="absolute entropy weight")
    beta.add_argument("--beta-rel", type=float, help="entropy weight relative to mean cost (default 0.05)")
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6)
    if pool:
        p.add_argument("--pool", type=int, default=1)
        p.add_argument("--size-cap", type=int, default=DEFAULT_SIZE_CAP)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pixot", description="Pixel-level OT retrieval and feature merging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    index = sub.add_parser("index", help="index operations")
    index_sub = index.add_subparsers(dest="index_command", required=True, parser_class=_Parser)
    p = index_sub.add_parser("build", help="build a feature index from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool", type=int, default=1)
    p.add_argument("--size-cap", type=int, default=DEFAULT_SIZE_CAP)

    p = sub.add_parser("query", help="nearest neighbours of one feature map")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top-k", type=int, default=1)
    _add_solver_flags(p)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("dist", help="OT distance between two feature maps")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    _add_solver_flags(p, pool=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("merge", help="convex merge of one real and one sim map")
    p.add_argument("--real", required=True)
    p.add_argument("--sim", required=True)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--out", required=True)

    p = sub.add_parser("batch-merge", help="retrieve and merge a whole real manifest")
    p.add_argument("--real-manifest", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--out-dir", required=True)
    _add_solver_flags(p)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("split", help="seeded train/val split of a merged manifest (in place)")
    p.add_argument("--merged-manifest", required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("report", help="CSV transport-cost report from retrieval results")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("convert", help="import a 3-D float32 .npy array as RFM1")
    p.add_argument("--npy", required=True)
    p.add_argument("--domain", choices=["real", "sim"], required=True)
    p.add_argument("--out", required=True)
    return parser


def _positive(name, value):
    if value is not None and value < 1:
        raise ParamError(f"--{name} must be >= 1, got {value}")


def _ot_params(args) -> OTParams:
    return OTParams(
        beta=args.beta,
        beta_rel=args.beta_rel,
        max_iters=args.max_iters,
        tol=args.tol,
        mode=args.mode,
    )


def _cmd_index_build(args):
    _positive("pool", args.pool)
    _positive("size-cap", args.size_cap)
    manifest = read_manifest(args.manifest)
    index = build_index(manifest, pool_factor=args.pool, size_cap=args.size_cap)
    save_index(index, args.out)
    print(f"indexed {len(index)} entries (d={index.dim}, pool={index.pool_factor}) -> {args.out}")


def _print_result(res, as_json):
    if as_json:
        print(json.dumps(res.to_dict()))
        return
    print(f"{'rank':>4}  {'candidate_id':<24} {'transport_cost':>16}  converged")
    for rank, c in enumerate(res.ranked, start=1):
        print(f"{rank:>4}  {c.candidate_id:<24} {c.transport_cost:>16.6g}  {str(c.converged).lower()}")
    print(f"query {res.query_id}: evaluated {res.evaluated_full}, pruned {res.pruned}")


def _cmd_query(args):
    _positive("top-k", args.top_k)
    params = _ot_params(args)
    index = load_index(args.index)
    q = read_feature_map(args.query)
    fn = query_exhaustive if args.no_prune else query_pruned
    _print_result(fn(q, index, params, k=args.top_k), args.json)


def _cmd_dist(args):
    _positive("pool", args.pool)
    _positive("size-cap", args.size_cap)
    params = _ot_params(args)
    a = avg_pool(read_feature_map(args.a), args.pool)
    b = avg_pool(read_feature_map(args.b), args.pool)
    res = ot_distance(a, b, params, size_cap=args.size_cap)
    if args.json:
        print(json.dumps({
            "a": a.id,
            "b": b.id,
            "transport_cost": res.transport_cost,
            "regularized_objective": res.regularized_objective,
            "iterations": res.iterations,
            "converged": res.converged,
            "marginal_violation": res.marginal_violation,
        }))
    else:
        print(f"transport_cost {res.transport_cost:.6g}")
        print(f"iterations {res.iterations} converged {str(res.converged).lower()}")


def _cmd_merge(args):
    cfg = MergeConfig(args.alpha)
    merged = convex_merge(read_feature_map(args.real), read_feature_map(args.sim), cfg)
    write_feature_map(merged, args.out)
    print(f"{merged.id} -> {args.out}")


def _cmd_batch_merge(args):
    cfg = MergeConfig(args.alpha)
    params = _ot_params(args)
    _positive("threads", args.threads)
    threads = args.threads or os.cpu_count() or 1
    manifest = read_manifest(args.real_manifest)
    index = load_index(args.index, inline=True)
    ms = batch_merge(manifest, index, cfg, params, threads=threads)
    path = write_merged_set(ms, args.out_dir)
    print(f"merged {len(ms)} items, {len(ms.failures)} failures -> {path}")


def _cmd_split(args):
    if args.train < 0:
        raise ParamError(f"--train must be >= 0, got {args.train}")
    n_train, n_val = split_manifest_file(args.merged_manifest, args.train, args.seed)
    print(f"train {n_train} val {n_val}")


def _cmd_report(args):
    cost_report(read_results(args.results), args.out)


def _cmd_convert(args):
    fm = read_npy(args.npy, Domain.parse(args.domain))
    write_feature_map(fm, args.out)
    print(f"{fm.id} {fm.h}x{fm.w}x{fm.dim} -> {args.out}")


COMMANDS = {
    "query": _cmd_query,
    "dist": _cmd_dist,
    "merge": _cmd_merge,
    "batch-merge": _cmd_batch_merge,
    "split": _cmd_split,
    "report": _cmd_report,
    "convert": _cmd_convert,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    handler = _cmd_index_build if args.command == "index" else COMMANDS[args.command]
    try:
        handler(args)
    except PixotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())
