"""Command-line surface: subgraph extraction, training, gradient checking,
retrieval, evaluation, and synthetic-fixture generation.

Exit codes: 0 success, 1 runtime/data error, 2 usage or configuration
error. Every command validates its inputs before producing output files,
and all randomness flows from the config seed, so identical invocations
produce identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

# Honor the worker-count cap before numpy initializes its thread pools.
_threads = os.environ.get("KNOWCOL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from pathlib import Path

import numpy as np

from . import dataio
from .dataio import StoreBundle, load_checkpoint, synth_fixture
from .encoders import fuse, project
from .graphstore import build_graph, expand_entity_set, induced_subgraph
from .inference import build_candidate_index, evaluate, retrieve_topk, write_predictions
from .trainer import (
    ConfigError,
    TrainConfig,
    build_batch,
    grad_check,
    init_state,
    train,
)

__all__ = ["main"]

DEFAULT_HIERARCHY = "P31,P279,P171"

REQUIRED_PATH_KEYS = ("triples", "catalog", "image_store", "text_store",
                      "train_dataset", "out_dir")
OPTIONAL_PATH_KEYS = ("test_dataset",)


def _read_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _load_run_config(path, overrides) -> tuple[TrainConfig, dict]:
    """Parse the run config: TrainConfig knobs plus a ``paths`` section.

    Unknown keys are rejected; every input path must exist before any
    work starts. Command-line overrides win over file values.
    """
    data = _read_config_file(path)
    raw_paths = data.pop("paths", None)
    if raw_paths is None:
        raise ConfigError(f"{path}: missing required key 'paths'")
    if not isinstance(raw_paths, dict):
        raise ConfigError(f"{path}: 'paths' must be an object")
    unknown = set(raw_paths) - set(REQUIRED_PATH_KEYS) - set(OPTIONAL_PATH_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown path keys: {sorted(unknown)}")
    for key in REQUIRED_PATH_KEYS:
        if key not in raw_paths:
            raise ConfigError(f"{path}: paths section missing {key!r}")
    overrides = dict(overrides)
    out_dir_override = overrides.pop("out_dir", None)
    data.update({k: v for k, v in overrides.items() if v is not None})
    config = TrainConfig.from_dict(data)
    paths = {k: Path(v) for k, v in raw_paths.items()}
    if out_dir_override is not None:
        paths["out_dir"] = Path(out_dir_override)
    for key in REQUIRED_PATH_KEYS[:-1] + tuple(
            k for k in OPTIONAL_PATH_KEYS if k in paths):
        if not paths[key].is_file():
            raise FileNotFoundError(f"input file does not exist: {paths[key]}")
    return config, paths


def _load_corpus(paths):
    graph = build_graph(dataio.load_triples_tsv(paths["triples"]))
    catalog = dataio.load_catalog(paths["catalog"])
    stores = StoreBundle(image=dataio.load_embedding_store(paths["image_store"]),
                         text=dataio.load_embedding_store(paths["text_store"]))
    labels = {e.qid for e in catalog}
    dataset = dataio.load_dataset(paths["train_dataset"], known_labels=labels)
    _check_catalog_resolves(catalog, stores)
    return graph, catalog, stores, dataset


def _check_catalog_resolves(catalog, stores: StoreBundle) -> None:
    for entry in catalog:
        stores.text.vector(entry.description_embedding_id)
        for lead in entry.lead_image_embedding_ids:
            stores.image.vector(lead)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_extract_subgraph(args) -> int:
    triples = dataio.load_triples_tsv(args.triples)
    graph = build_graph(triples)
    seed_qids = dataio.load_seed_qids(args.seeds)
    seeds = set()
    for qid in seed_qids:
        if not graph.has_entity(qid):
            raise ValueError(f"seed entity {qid} not present in the graph "
                             "(catalog/graph mismatch)")
        seeds.add(graph.entity_id(qid))
    hierarchy_pids = [p for p in args.hierarchy.split(",") if p]
    if not hierarchy_pids:
        raise ConfigError("--hierarchy must name at least one PID")
    hierarchy = {graph.relation_id(p) for p in hierarchy_pids
                 if graph.has_relation(p)}
    expanded = expand_entity_set(graph, seeds, hierarchy) if hierarchy else set(seeds)
    sub = induced_subgraph(graph, expanded)
    dataio.save_triples_tsv(sorted(sub.triple_qids()), args.out)
    print(f"entities={sub.n_entities} relations={sub.n_relations} "
          f"triples={len(sub.triples)}")
    return 0


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "epochs": args.epochs, "out_dir": args.out_dir}
    config, paths = _load_run_config(args.config, overrides)
    graph, catalog, stores, dataset = _load_corpus(paths)
    out_dir = paths["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / "checkpoint.kcck"
    loss_log = out_dir / "loss_log.jsonl"
    state, log = train(config, dataset, graph, catalog, stores,
                       checkpoint_path=checkpoint, loss_log_path=loss_log)
    last = log[-1].total if log else float("nan")
    print(f"trained {config.epochs} epochs ({state.step} steps); "
          f"final total loss {last:.6f}")
    print(f"checkpoint: {checkpoint}")
    print(f"loss log:   {loss_log}")
    return 0


def cmd_gradcheck(args) -> int:
    if not args.fd_step > 0:
        raise ConfigError("--fd-step must be > 0")
    config, paths = _load_run_config(args.config, {})
    graph, catalog, stores, dataset = _load_corpus(paths)
    state = init_state(config, graph, catalog, stores)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 5, 0]))
    perm = rng.permutation(len(dataset))
    indices = perm[:min(config.batch_size, len(dataset))]
    relation_index = {p: i for i, p in enumerate(state.relation_pids)}
    batch = build_batch(dataset, indices, graph, {e.qid: e for e in catalog},
                        stores, config, 0, state.entity_index, relation_index)
    err = grad_check(state.params, batch, config, args.fd_step,
                     corrupt=args.corrupt_gradients)
    print(f"max relative error: {err:.3e} (threshold 1e-4)")
    return 0 if err <= 1e-4 else 1


def _load_checkpoint_bundle(args):
    state = load_checkpoint(args.checkpoint)
    catalog = dataio.load_catalog(args.catalog)
    stores = StoreBundle(image=dataio.load_embedding_store(args.image_store),
                         text=dataio.load_embedding_store(args.text_store))
    _check_catalog_resolves(catalog, stores)
    index = build_candidate_index(catalog, state.params.lp_img,
                                  state.params.lp_txt, stores)
    return state, catalog, stores, index


def _encode_queries(records, state, stores):
    for rec in records:
        z_img = project(stores.image.vector(rec.image_embedding_id),
                        state.params.lp_img)
        z_txt = project(stores.text.vector(rec.text_query_embedding_id),
                        state.params.lp_txt)
        yield fuse(z_img, z_txt, state.params.fusion)


def cmd_infer(args) -> int:
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    state, catalog, stores, index = _load_checkpoint_bundle(args)
    records = dataio.load_dataset(args.queries)
    topk = [retrieve_topk(z, index, args.k)
            for z in _encode_queries(records, state, stores)]
    if args.out:
        write_predictions(topk, args.out)
        print(f"wrote {len(topk)} predictions to {args.out}")
    else:
        for i, ranked in enumerate(topk):
            print(json.dumps({"query_index": i,
                              "topk": [{"qid": q, "score": s} for q, s in ranked]}))
    return 0


def cmd_eval(args) -> int:
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    state, catalog, stores, index = _load_checkpoint_bundle(args)
    split_of = {e.qid: e.split for e in catalog}
    records = dataio.load_dataset(args.testset, known_labels=set(split_of))
    topk = [retrieve_topk(z, index, args.k)
            for z in _encode_queries(records, state, stores)]
    predictions = [ranked[0][0] for ranked in topk]
    gold = [rec.label for rec in records]
    splits = [split_of[g] for g in gold]
    report = evaluate(predictions, gold, splits)
    print(report.table())
    print(json.dumps(report.to_dict()))
    if args.predictions:
        write_predictions(topk, args.predictions)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_synth(args) -> int:
    if args.entities < 4:
        raise ConfigError("--entities must be >= 4")
    if args.dim < 4:
        raise ConfigError("--dim must be >= 4")
    if args.seed < 0:
        raise ConfigError("--seed must be >= 0")
    paths = synth_fixture(args.entities, args.dim, args.seed, args.out)
    print(f"fixture written to {paths.out_dir}")
    print(f"run config: {paths.config}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knowcol",
        description="Knowledge-guided contrastive learning: train entity and "
                    "relation embeddings over frozen-backbone features and "
                    "run retrieval-based entity recognition.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-subgraph",
                       help="one-hop hierarchy expansion plus induced subgraph")
    p.add_argument("--triples", required=True, help="triple TSV dump")
    p.add_argument("--seeds", required=True, help="file with one seed QID per line")
    p.add_argument("--hierarchy", default=DEFAULT_HIERARCHY,
                   help=f"comma-separated hierarchy PIDs (default {DEFAULT_HIERARCHY})")
    p.add_argument("--out", required=True, help="output TSV path")
    p.set_defaults(func=cmd_extract_subgraph)

    p = sub.add_parser("train", help="run the training loop from a config file")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--out-dir", default=None, help="override output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients to finite differences")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--fd-step", type=float, default=1e-4,
                   help="central-difference step (default 1e-4)")
    p.add_argument("--corrupt-gradients", action="store_true",
                   help="deliberately damage one gradient (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infer", help="top-k entity retrieval for query records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--image-store", required=True)
    p.add_argument("--text-store", required=True)
    p.add_argument("--queries", required=True, help="query dataset JSONL")
    p.add_argument("--k", type=int, default=5, help="ranked list depth (default 5)")
    p.add_argument("--out", default=None, help="prediction JSONL path (default stdout)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="seen/unseen top-1 accuracy and harmonic mean")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--image-store", required=True)
    p.add_argument("--text-store", required=True)
    p.add_argument("--testset", required=True, help="labeled dataset JSONL")
    p.add_argument("--k", type=int, default=5, help="depth of the prediction dump")
    p.add_argument("--predictions", default=None, help="optional prediction JSONL")
    p.add_argument("--report", default=None, help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a deterministic synthetic fixture")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on bad flags, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
