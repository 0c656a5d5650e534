"""Command line entry point: ``qgrag <command> [options]``.

Exit status is 0 on success, 2 on usage errors and 1 on data or model
errors, in which case a single ``ErrorName: message`` line goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .core import Query
from .errors import QgragError, UnknownChunk

# flag name -> RunConfig key
_OVERRIDES = {
    "out": "out_dir",
    "corpus": "corpus",
    "queries": "queries",
    "train_queries": "train_queries",
    "checkpoint": "checkpoint",
    "fusion_model": "fusion_model",
    "tau": "tau",
    "k": "k",
    "seed": "seed",
    "dim": "dim",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run config; flags override its keys")
    p.add_argument("--out", help="output directory for every artifact")
    p.add_argument("--corpus", help="input chunk JSONL")
    p.add_argument("--queries", help="evaluation query JSONL")
    p.add_argument("--train-queries", dest="train_queries", help="training query JSONL")
    p.add_argument("--checkpoint", help="trained model checkpoint path")
    p.add_argument("--fusion-model", dest="fusion_model", help="fusion model JSON path")
    p.add_argument("--tau", type=float, help="semantic edge threshold")
    p.add_argument("--k", type=int, help="semantic neighbours kept per chunk")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int, help="toy embedding dimension")
    p.add_argument("--toy-embed", dest="toy_embed", action="store_true", default=None,
                   help="embed text with the built-in hashed embedder")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="qgrag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and normalize a corpus")
    p.add_argument("--make-synthetic", dest="make_synthetic", type=int, metavar="N",
                   help="generate a synthetic corpus of N episodes instead of reading one")

    p = sub.add_parser("build-graph", parents=[common], help="build and cache episode graphs")
    p.add_argument("--dump", help="also write every edge to this JSONL file")

    p = sub.add_parser("train", parents=[common], help="train the scoring model")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")

    p = sub.add_parser("retrieve", parents=[common], help="rank chunks for one query")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--query-id", dest="query_id")
    g.add_argument("--text")
    p.add_argument("--top-n", dest="top_n", type=int)

    p = sub.add_parser("eval", parents=[common], help="Recall@k against flat cosine search")
    p.add_argument("--at", type=int, default=5, metavar="K", help="cutoff k of Recall@k")

    sub.add_parser("fuse-fit", parents=[common], help="fit the score fusion model")
    return parser


def resolve_config(args) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig.load(args.config) if args.config else pipeline.RunConfig()
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if args.toy_embed:
        cfg.toy_embed = True
    if getattr(args, "top_n", None) is not None:
        cfg.retrieval = {**cfg.retrieval, "top_n": args.top_n}
    return cfg.validate()


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _find_query(cfg, query_id) -> Query:
    for name in (pipeline.QUERIES_FILE, pipeline.TRAIN_QUERIES_FILE):
        path = cfg.path(None, name)
        if path.exists():
            for q in pipeline.load_queries(path):
                if q.query_id == query_id:
                    return q
    raise UnknownChunk(f"no query with id {query_id!r}")


def run(args) -> int:
    cfg = resolve_config(args)
    if args.command == "ingest":
        _print_json(pipeline.ingest(cfg, args.make_synthetic))
    elif args.command == "build-graph":
        _print_json(pipeline.build_graph(cfg, args.dump))
    elif args.command == "train":
        _print_json(pipeline.train(cfg, args.stage))
    elif args.command == "fuse-fit":
        _print_json(pipeline.fuse_fit(cfg).to_json())
    elif args.command == "eval":
        report = pipeline.run_eval(cfg, args.at)
        sys.stdout.write(report.to_text())
    elif args.command == "retrieve":
        r = pipeline.Retriever(cfg)
        if args.text is not None:
            query = Query("text", args.text, embedding=r.embed_text(args.text))
        else:
            query = _find_query(cfg, args.query_id)
        for res in r.retrieve(query):
            _print_json(res.to_json())
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except QgragError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
