"""Command-line surface: data synthesis, validation, training, evaluation,
repository management, and inspection.

Every command takes its settings from flags plus an optional JSON config
file ({"key": value} object; unknown keys are rejected). All randomness
derives from --seed, so any command rerun with identical inputs writes
byte-identical outputs. Exit codes: 0 success, 1 runtime failure with a
message on stderr, 2 bad flags (argparse usage text).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import random
import sys

from .model import (LayerGroupConfig, build_repository, config_from_corpus,
                    forward, load_checkpoint)
from .numerics import Matrix, Vector, active_backend, matvec, softmax
from .operators import rope_freqs
from .attention import rope_equivalence_check
from .repository import load as load_repository
from .repository import build_index, persist, query_approx, query_exact
from .schema import ingest_jsonl, write_jsonl
from .training import (GeneratorSpec, ObjectiveWeights, build_batch,
                       build_eval_batch, eval_link_prediction, gen_synthetic,
                       knn_interpolated_distribution, role_consistency_loss,
                       train)


class CLIError(ValueError):
    pass


def _load_json_config(path, allowed: set) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CLIError(f"{path}: invalid JSON: {exc.msg} "
                           f"(line {exc.lineno})")
    if not isinstance(cfg, dict):
        raise CLIError(f"{path}: config must be a JSON object")
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise CLIError(f"{path}: unknown config keys {unknown}; "
                       f"allowed: {sorted(allowed)}")
    return cfg


def _take(cfg: dict, key, default, kind):
    v = cfg.get(key, default)
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind) or isinstance(v, bool) and kind is not bool:
        raise CLIError(f"config key {key!r} must be {kind.__name__}, "
                       f"got {type(v).__name__}")
    return v


# ------------------------------------------------------------------ commands

_GEN_KEYS = {"entities", "relations", "sentences", "nary_rate",
             "corruption_rate", "heldout_fraction"}


def _cmd_gen_data(args) -> int:
    cfg = _load_json_config(args.config, _GEN_KEYS)
    spec = GeneratorSpec(
        entities=_take(cfg, "entities", 20, int),
        relations=_take(cfg, "relations", 3, int),
        sentences=_take(cfg, "sentences", 10, int),
        nary_rate=_take(cfg, "nary_rate", 0.0, float),
        corruption_rate=_take(cfg, "corruption_rate", 0.0, float),
        heldout_fraction=_take(cfg, "heldout_fraction", 0.5, float))
    corpus = gen_synthetic(spec, seed=args.seed)
    write_jsonl(corpus, args.out)
    print(f"wrote {args.out}: {len(corpus.records)} records, "
          f"{len(corpus.instances)} instances, "
          f"vocab {len(corpus.vocabulary)}")
    return 0


def _cmd_validate(args) -> int:
    corpus = ingest_jsonl(args.corpus)   # raises with line numbers
    print(f"{args.corpus}: 0 violations, {len(corpus.instances)} instances, "
          f"{len(corpus.entities)} entities, vocab {len(corpus.vocabulary)}")
    return 0


_MODEL_KEYS = {"d_model", "head_count", "slot_op_kind", "relation_op_kind",
               "instance_op_kind", "low_rank_rank", "ffn_mult", "readout",
               "cross_top_k", "layer_groups"}
_TRAIN_KEYS = _MODEL_KEYS | {"lr", "warmup", "weight_decay", "mask_rate",
                             "lp_rate", "rc_pairs", "align_pairs",
                             "align_negatives", "align_temperature",
                             "static_batch", "weights"}


def _model_config(corpus, cfg: dict, seed: int):
    over = {k: cfg[k] for k in _MODEL_KEYS - {"layer_groups"} if k in cfg}
    if "layer_groups" in cfg:
        raw = cfg["layer_groups"]
        if not isinstance(raw, list):
            raise CLIError("config key 'layer_groups' must be a list")
        over["layer_groups"] = tuple(LayerGroupConfig.from_dict(g)
                                     for g in raw)
    return config_from_corpus(corpus, seed=seed, **over)


def _cmd_train(args) -> int:
    cfg = _load_json_config(args.config, _TRAIN_KEYS)
    corpus = ingest_jsonl(args.corpus)
    model_cfg = _model_config(corpus, cfg, args.seed)
    wraw = cfg.get("weights", {})
    if not isinstance(wraw, dict):
        raise CLIError("config key 'weights' must be an object")
    unknown = sorted(set(wraw) - {"mlm", "lp", "rc", "align", "knn"})
    if unknown:
        raise CLIError(f"unknown objective weights {unknown}")
    weights = ObjectiveWeights(**{k: float(v) for k, v in wraw.items()})
    log_path = args.out + ".metrics.csv"
    result = train(
        model_cfg, corpus, weights, steps=args.steps, seed=args.seed,
        lr=_take(cfg, "lr", 3e-3, float),
        warmup=_take(cfg, "warmup", 50, int),
        weight_decay=_take(cfg, "weight_decay", 0.0, float),
        mask_rate=_take(cfg, "mask_rate", 0.15, float),
        lp_rate=_take(cfg, "lp_rate", 0.5, float),
        rc_pairs=_take(cfg, "rc_pairs", 2, int),
        align_pairs=_take(cfg, "align_pairs", 4, int),
        align_negatives=_take(cfg, "align_negatives", 4, int),
        align_temperature=_take(cfg, "align_temperature", 0.1, float),
        static_batch=_take(cfg, "static_batch", False, bool),
        log_path=log_path, checkpoint_path=args.out)
    last = result.rows[-1] if result.rows else {}
    print(f"trained {args.steps} steps on {active_backend()} backend; "
          f"checkpoint {args.out}, metrics {log_path}")
    if last:
        print("final: " + ", ".join(
            f"{k}={last[k]:.4f}" for k in ("total_loss", "lp_mrr", "rc_acc")))
    return 0


_EVAL_KEYS = {"checkpoint", "provenance", "lambdas", "rc_pairs"}


def _cmd_eval(args) -> int:
    cfg = _load_json_config(args.config, _EVAL_KEYS)
    if "checkpoint" not in cfg:
        raise CLIError("eval config needs a 'checkpoint' key")
    params = load_checkpoint(_take(cfg, "checkpoint", "", str))
    corpus = ingest_jsonl(args.corpus)
    provenance = _take(cfg, "provenance", "heldout", str)

    metrics = eval_link_prediction(params, corpus, provenance)
    print(f"link prediction ({provenance}): mrr={metrics['mrr']:.4f} "
          f"hits@1={metrics['hits1']:.4f} hits@10={metrics['hits10']:.4f}")

    batch = build_batch(corpus, args.seed, 0, mask_rate=0.0, lp_rate=0.0,
                        rc_pairs=_take(cfg, "rc_pairs", 4, int))
    if batch.rc_targets:
        result = forward(batch, params)
        _, acc = role_consistency_loss(result, batch.rc_targets)
        print(f"role consistency: accuracy={acc:.4f} "
              f"over {len(batch.rc_targets)} corrupted positions")
    else:
        print("role consistency: skipped (no eligible instance pairs)")

    lambdas = cfg.get("lambdas", [0.0, 0.25, 0.5, 1.0])
    if not (isinstance(lambdas, list)
            and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                    for v in lambdas)):
        raise CLIError("config key 'lambdas' must be a list of numbers")
    _report_knn_perplexity(params, corpus, provenance, args.k,
                           [float(v) for v in lambdas])
    return 0


def _report_knn_perplexity(params, corpus, provenance, k, lambdas) -> None:
    """Perplexity of the tied-softmax distribution at masked tail rows,
    interpolated with repository retrieval over the training facts."""
    batch = build_eval_batch(corpus, provenance)
    facts = [i for i in sorted(corpus.instances, key=lambda x: x.instance_id)
             if i.schema.name != "sequence"
             and not i.schema.name.startswith("pos:")
             and i.provenance != provenance]
    if not batch.lp_queries or not facts:
        print("knn perplexity: skipped (nothing to evaluate)")
        return
    repo = build_repository(facts, params)
    result = forward(batch, params)
    hidden = result.struct_matrix()
    embed = params.tensors["embed"]
    # masked tail rows sit two past each recorded query's head row
    rows = [(q.row + 2, q.true_id) for q in batch.lp_queries]
    for lam in lambdas:
        nll = 0.0
        for row, true_id in rows:
            h = hidden.row(row)
            dist = softmax(matvec(embed, h))
            out, _ = knn_interpolated_distribution(dist, repo, h, k, lam)
            nll -= math.log(max(out.data[true_id], 1e-300))
        print(f"knn perplexity: lambda={lam:g} "
              f"ppl={math.exp(nll / len(rows)):.6g} over {len(rows)} rows")


_REPO_BUILD_KEYS = {"checkpoint", "centroids", "assignments"}


def _cmd_repo_build(args) -> int:
    cfg = _load_json_config(args.config, _REPO_BUILD_KEYS)
    if "checkpoint" not in cfg:
        raise CLIError("repo-build config needs a 'checkpoint' key")
    params = load_checkpoint(_take(cfg, "checkpoint", "", str))
    corpus = ingest_jsonl(args.corpus)
    facts = [i for i in sorted(corpus.instances, key=lambda x: x.instance_id)
             if i.schema.name != "sequence"
             and not i.schema.name.startswith("pos:")]
    repo = build_repository(facts, params, freeze=False)
    if repo.items:
        default_c = max(1, round(math.sqrt(len(repo.items))))
        build_index(repo, _take(cfg, "centroids", default_c, int),
                    seed=args.seed,
                    assignments=_take(cfg, "assignments", 3, int))
    else:
        repo.frozen = True
    persist(repo, args.out)
    c = len(repo.centroids) if repo.centroids else 0
    print(f"wrote {args.out}: {len(repo.items)} items from "
          f"{len(facts)} instances, {c} centroids")
    return 0


_REPO_QUERY_KEYS = {"repository", "query"}


def _cmd_repo_query(args) -> int:
    cfg = _load_json_config(args.config, _REPO_QUERY_KEYS)
    if "repository" not in cfg:
        raise CLIError("repo-query config needs a 'repository' key")
    repo = load_repository(_take(cfg, "repository", "", str))
    raw = cfg.get("query")
    if raw is not None:
        if not (isinstance(raw, list) and raw
                and all(isinstance(v, (int, float))
                        and not isinstance(v, bool) for v in raw)):
            raise CLIError("config key 'query' must be a list of numbers")
        if len(raw) != repo.dim:
            raise CLIError(f"query has {len(raw)} coordinates, "
                           f"repository keys have {repo.dim}")
        q = Vector(repo.dim, [float(v) for v in raw])
    else:
        rng = random.Random(args.seed)
        q = Vector(repo.dim, [rng.gauss(0.0, 1.0) for _ in range(repo.dim)])
    print("rank\tscore\tslot\tinstance\ttoken_id\tprovenance\tmethod")
    if not repo.items:
        print(f"(empty repository: 0 items, dim {repo.dim})")
        return 0
    k = min(args.k, len(repo.items))
    for method, hits in (
            ("exact", query_exact(repo, q, k)),
            ("approx", query_approx(repo, q, k, args.probes)
             if repo.centroids else [])):
        for rank, (item, score) in enumerate(hits, start=1):
            print(f"{rank}\t{score:.6f}\t{item.slot}\t{item.instance}"
                  f"\t{item.token_id}\t{item.provenance or '-'}\t{method}")
    return 0


def _cmd_rope_check(args) -> int:
    if args.dim < 2 or args.dim % 2:
        raise CLIError(f"--dim must be even and >= 2, got {args.dim}")
    if args.positions < 1:
        raise CLIError(f"--positions must be >= 1, got {args.positions}")
    rng = random.Random(args.seed)
    freqs = rope_freqs(args.dim)
    worst = 0.0
    for _ in range(1000):
        q = Vector(args.dim, [rng.gauss(0, 1) for _ in range(args.dim)])
        k = Vector(args.dim, [rng.gauss(0, 1) for _ in range(args.dim)])
        i = rng.randrange(args.positions + 1)
        j = rng.randrange(args.positions + 1)
        _, _, gap = rope_equivalence_check(q, k, i, j, freqs)
        worst = max(worst, gap)
    print(f"rope-check: dim {args.dim}, positions <= {args.positions}, "
          f"1000 draws, max gap {worst:.3e}")
    if worst > 1e-9:
        raise CLIError(f"max gap {worst:.3e} exceeds 1e-9")
    return 0


_INSPECT_KEYS = {"checkpoint"}


def _cmd_inspect_attention(args) -> int:
    cfg = _load_json_config(args.config, _INSPECT_KEYS)
    if "checkpoint" not in cfg:
        raise CLIError("inspect-attention config needs a 'checkpoint' key")
    params = load_checkpoint(_take(cfg, "checkpoint", "", str))
    corpus = ingest_jsonl(args.corpus)
    batch = build_eval_batch(corpus, provenance="\x00never")
    want = True
    if args.layer is not None and args.head is not None:
        want = {(args.layer, args.head)}
    result = forward(batch, params, capture=want)
    picked = sorted(
        (lh, probs) for lh, probs in result.attention.items()
        if (args.layer is None or lh[0] == args.layer)
        and (args.head is None or lh[1] == args.head))
    if not picked:
        raise CLIError(
            f"no attention captured for layer={args.layer} head={args.head} "
            f"(model has {params.config.layer_count} layers, "
            f"{params.config.head_count} heads)")
    for (layer, head), probs in picked:
        base = f"{args.out}-L{layer}H{head}"
        with open(base + ".csv", "w", newline="") as fh:
            w = csv.writer(fh)
            for r in range(probs.rows):
                w.writerow([repr(probs.at(r, c)) for c in range(probs.cols)])
        _write_pgm(probs, base + ".pgm")
        print(f"wrote {base}.csv and {base}.pgm "
              f"({probs.rows}x{probs.cols})")
    return 0


def _write_pgm(probs: Matrix, path) -> None:
    """Plain-text grayscale heatmap; 255 = attention weight 1.0."""
    lines = ["P2", f"{probs.cols} {probs.rows}", "255"]
    for r in range(probs.rows):
        lines.append(" ".join(
            str(min(255, max(0, int(probs.at(r, c) * 255.0 + 0.5))))
            for c in range(probs.cols)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------------ plumbing

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="journeykit",
        description="Role-transport attention toolkit: synthesize corpora, "
                    "train, evaluate, and inspect.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, helptext, *flags):
        sp = sub.add_parser(name, help=helptext)
        sp.set_defaults(fn=fn)
        for flag in flags:
            spec = _FLAGS[flag]
            sp.add_argument(flag, **spec)
        return sp

    add("gen-data", _cmd_gen_data,
        "synthesize a planted-rule corpus as JSONL",
        "--out", "--seed", "--config")
    add("validate", _cmd_validate,
        "check a corpus file; exit 0 iff no violations",
        "--corpus")
    add("train", _cmd_train,
        "train a model; writes checkpoint and metrics CSV",
        "--corpus", "--config", "--out", "--seed", "--steps")
    add("eval", _cmd_eval,
        "report ranking metrics, role-consistency accuracy, and "
        "retrieval-interpolated perplexity",
        "--corpus", "--config", "--seed", "--k")
    add("repo-build", _cmd_repo_build,
        "encode facts into an indexed repository snapshot",
        "--corpus", "--config", "--out", "--seed")
    add("repo-query", _cmd_repo_query,
        "query a repository snapshot (exact and approximate)",
        "--config", "--seed", "--k", "--probes")
    add("rope-check", _cmd_rope_check,
        "verify rotary-equivalence of positional transport",
        "--dim", "--positions", "--seed")
    add("inspect-attention", _cmd_inspect_attention,
        "dump attention weights as CSV and PGM heatmaps",
        "--corpus", "--config", "--out", "--layer", "--head")
    return p


_FLAGS = {
    "--config": dict(metavar="PATH", default=None,
                     help="JSON config file (object of settings)"),
    "--corpus": dict(metavar="PATH", required=True,
                     help="JSONL corpus file"),
    "--out": dict(metavar="PATH", required=True, help="output path/prefix"),
    "--seed": dict(metavar="N", type=int, default=0,
                   help="seed for all randomness (default 0)"),
    "--steps": dict(metavar="N", type=int, default=200,
                    help="optimizer steps (default 200)"),
    "--k": dict(metavar="N", type=int, default=10,
                help="result count / neighbor count (default 10)"),
    "--probes": dict(metavar="N", type=int, default=4,
                     help="inverted lists scanned (default 4)"),
    "--dim": dict(metavar="N", type=int, default=32,
                  help="vector width (default 32)"),
    "--positions": dict(metavar="N", type=int, default=128,
                        help="largest position index (default 128)"),
    "--layer": dict(metavar="N", type=int, default=None,
                    help="restrict to one layer index"),
    "--head": dict(metavar="N", type=int, default=None,
                   help="restrict to one head index"),
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
