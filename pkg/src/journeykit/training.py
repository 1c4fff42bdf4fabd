"""Objectives, optimizer loop, synthetic data, and evaluation metrics.

Five loss terms over one mixed batch of sentence views and facts: masked
token recovery on both streams, link prediction through relation operators
(RotatE-style rotation of the head state scored against tied entity
embeddings), role-consistency denoising (recover tokens swapped between
same-role positions of two instances), a contrastive alignment between
sentence spans and encoded entity keys, and a kNN-interpolated output
distribution used at evaluation time only.

Batches are rebuilt per step from per-(seed, step, term) child RNGs, so a
term's annotations never influence another term's randomness and switching
a weight to zero leaves the rest of the trajectory untouched. Instances are
processed in sorted-id order, which makes whole runs bitwise reproducible.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field

from .model import (ForwardResult, ModelConfig, Parameters, TokenRef,
                    forward, init_params, save_checkpoint)
from .numerics import Matrix, Vector, kern
from .numerics import autodiff as ad
from .repository import Repository, query_exact
from .schema import Corpus, CorpusBuilder

MASK_ID = 0   # the vocabulary reserves index 0 for the mask token


class TrainingError(ValueError):
    pass


# -------------------------------------------------------------- batch types

@dataclass
class LPQuery:
    row: int          # head-token row in the structured stream
    relation: str
    true_id: int


@dataclass
class TrainingBatch:
    instances: list
    lang_tokens: list
    struct_tokens: list
    adjacency: dict
    mlm_targets: list = field(default_factory=list)   # (stream, row, true id)
    lp_queries: list = field(default_factory=list)
    rc_targets: list = field(default_factory=list)    # (row, true id)
    alignment_pairs: list = field(default_factory=list)
    candidate_ids: list = field(default_factory=list)


@dataclass
class ObjectiveWeights:
    mlm: float = 1.0
    lp: float = 1.0
    rc: float = 1.0
    align: float = 0.5
    knn: float = 0.0   # evaluation-time interpolation only

    def validate(self) -> None:
        vals = (self.mlm, self.lp, self.rc, self.align, self.knn)
        if any(v < 0 for v in vals):
            raise TrainingError("objective weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise TrainingError("at least one objective weight must be "
                                "positive")


def _is_structured(inst) -> bool:
    slots = set(inst.schema.slots)
    return {"HEAD", "RELATION", "TAIL"} <= slots or "PREDICATE" in slots


def _is_triple(inst) -> bool:
    return tuple(inst.schema.slots) == ("HEAD", "RELATION", "TAIL")


def _child_rng(seed, step, term) -> random.Random:
    return random.Random(f"{seed}:{step}:{term}")


def build_batch(corpus: Corpus, seed, step, *, mask_rate: float = 0.15,
                lp_rate: float = 0.5, rc_pairs: int = 2,
                align_pairs: int = 4, align_negatives: int = 4,
                exclude_provenance: str = "heldout") -> TrainingBatch:
    """One full-corpus batch with fresh objective annotations.

    Corruption order keeps the terms disjoint: link-prediction tails are
    masked first, role swaps pick among untouched fact rows, and masked
    modeling draws from whatever is left. Alignment pairs only reference
    rows whose input ids are intact.
    """
    insts = sorted((i for i in corpus.instances
                    if i.provenance != exclude_provenance),
                   key=lambda i: i.instance_id)
    lang_toks, struct_toks = [], []
    lang_ids, struct_ids = [], []
    row_of = {}
    for inst in insts:
        structured = _is_structured(inst)
        toks, ids = (struct_toks, struct_ids) if structured \
            else (lang_toks, lang_ids)
        for t_i, tok in enumerate(inst.tokens):
            row_of[(inst.instance_id, t_i)] = ("struct" if structured
                                               else "lang", len(toks))
            toks.append((tok.token_id, tok.slot, inst.instance_id,
                         tok.within))
            ids.append(tok.token_id)

    touched = set()   # ("struct"|"lang", row) with corrupted/masked input
    batch = TrainingBatch(instances=insts, lang_tokens=[], struct_tokens=[],
                          adjacency=dict(corpus.adjacency))
    batch.candidate_ids = sorted(corpus.entity_token_ids())

    triples = [i for i in insts if _is_triple(i)]

    # link prediction: mask a tail, remember (head row, relation, truth)
    rng = _child_rng(seed, step, "lp")
    for inst in triples:
        if rng.random() >= lp_rate:
            continue
        _, head_row = row_of[(inst.instance_id, 0)]
        _, tail_row = row_of[(inst.instance_id, 2)]
        rel = corpus.vocabulary.token(inst.tokens[1].token_id)
        batch.lp_queries.append(
            LPQuery(head_row, rel, struct_ids[tail_row]))
        struct_ids[tail_row] = MASK_ID
        touched.add(("struct", tail_row))

    # role-consistency: swap same-slot tokens between two untouched facts
    rng = _child_rng(seed, step, "rc")
    eligible = [i for i in triples
                if not any(row_of[(i.instance_id, t)] in touched
                           for t in (0, 2))]
    rng.shuffle(eligible)
    for k in range(min(rc_pairs, len(eligible) // 2)):
        a, b = eligible[2 * k], eligible[2 * k + 1]
        t_i = 0 if rng.random() < 0.5 else 2   # HEAD or TAIL
        _, ra = row_of[(a.instance_id, t_i)]
        _, rb = row_of[(b.instance_id, t_i)]
        va, vb = struct_ids[ra], struct_ids[rb]
        struct_ids[ra], struct_ids[rb] = vb, va
        batch.rc_targets.extend([(ra, va), (rb, vb)])
        touched.update({("struct", ra), ("struct", rb)})

    # masked modeling over both streams (80/10/10 recipe)
    rng = _child_rng(seed, step, "mlm")
    vocab_n = len(corpus.vocabulary)
    for stream, ids in (("lang", lang_ids), ("struct", struct_ids)):
        for row in range(len(ids)):
            if (stream, row) in touched or rng.random() >= mask_rate:
                continue
            batch.mlm_targets.append((stream, row, ids[row]))
            roll = rng.random()
            if roll < 0.8:
                ids[row] = MASK_ID
            elif roll < 0.9 and vocab_n > 1:
                ids[row] = rng.randrange(1, vocab_n)
            touched.add((stream, row))

    # alignment: entity mentions in sequence views vs encoded entity keys
    rng = _child_rng(seed, step, "align")
    entity_ids = set(batch.candidate_ids)
    lang_rows = [r for r, (tid, slot, _, _) in enumerate(lang_toks)
                 if tid in entity_ids and ("lang", r) not in touched
                 and slot.startswith("POSITION_")]
    struct_rows = {}
    for r, (tid, _, _, _) in enumerate(struct_toks):
        if tid in entity_ids and ("struct", r) not in touched:
            struct_rows.setdefault(tid, []).append(r)
    candidates = [r for r in lang_rows if lang_ids[r] in struct_rows]
    rng.shuffle(candidates)
    pos_ids = set()
    positives = []
    for r in candidates[:align_pairs]:
        tid = lang_ids[r]
        positives.append(((r,), struct_rows[tid][0], "positive"))
        pos_ids.add(tid)
    neg_rows = [rows[0] for tid, rows in sorted(struct_rows.items())
                if tid not in pos_ids]
    rng.shuffle(neg_rows)
    negatives = [((), r, "negative")
                 for r in neg_rows[:align_negatives]]
    if positives and negatives:
        batch.alignment_pairs = positives + negatives

    batch.lang_tokens = [TokenRef(ids_val, slot, inst, within)
                         for ids_val, (_, slot, inst, within)
                         in zip(lang_ids, lang_toks)]
    batch.struct_tokens = [TokenRef(ids_val, slot, inst, within)
                           for ids_val, (_, slot, inst, within)
                           in zip(struct_ids, struct_toks)]
    return batch


def build_eval_batch(corpus: Corpus, provenance: str = "heldout"
                     ) -> TrainingBatch:
    """All instances, with every triple of the given provenance turned into
    a link-prediction query (tail masked); no randomness."""
    insts = sorted(corpus.instances, key=lambda i: i.instance_id)
    batch = TrainingBatch(instances=insts, lang_tokens=[], struct_tokens=[],
                          adjacency=dict(corpus.adjacency))
    batch.candidate_ids = sorted(corpus.entity_token_ids())
    struct_rows = []
    for inst in insts:
        structured = _is_structured(inst)
        for t_i, tok in enumerate(inst.tokens):
            ref = TokenRef(tok.token_id, tok.slot, inst.instance_id,
                           tok.within)
            if structured:
                if _is_triple(inst) and inst.provenance == provenance:
                    if t_i == 0:
                        head_row = len(struct_rows)
                    elif t_i == 2:
                        rel = corpus.vocabulary.token(inst.tokens[1].token_id)
                        batch.lp_queries.append(
                            LPQuery(head_row, rel, tok.token_id))
                        ref = TokenRef(MASK_ID, tok.slot, inst.instance_id,
                                       tok.within)
                struct_rows.append(ref)
            else:
                batch.lang_tokens.append(ref)
    batch.struct_tokens = struct_rows
    return batch


# -------------------------------------------------------------- loss terms

def _unembed(result: ForwardResult):
    key = "_unembed"
    cache = result.__dict__.setdefault("_loss_cache", {})
    if key not in cache:
        cache[key] = ad.transpose(result.tape, result.leaves["embed"])
    return cache[key]


def _stream_var(result: ForwardResult, stream: str) -> ad.Var:
    v = result.lang if stream == "lang" else result.struct
    if v is None:
        raise TrainingError(f"batch has no {stream} tokens")
    return v


def mlm_loss(result: ForwardResult, targets) -> ad.Var:
    """Mean cross-entropy of softmax(hidden . embed^T) at masked positions."""
    if not targets:
        raise TrainingError("mlm_loss called with no targets; skip the term")
    t = result.tape
    parts, true_ids = [], []
    for stream in ("lang", "struct"):
        rows = [row for s, row, _ in targets if s == stream]
        if not rows:
            continue
        hid = _stream_var(result, stream)
        for s, row, tid in targets:
            if s == stream:
                if not 0 <= row < hid.m.rows:
                    raise TrainingError(f"mlm target row {row} outside "
                                        f"{stream} stream")
                true_ids.append(tid)
        parts.append(ad.matmul(t, ad.gather_rows(t, hid, rows),
                               _unembed(result)))
    logits = parts[0] if len(parts) == 1 else ad.stack_rows(t, parts)
    return ad.cross_entropy(t, logits, true_ids)


def link_prediction_loss(result: ForwardResult, lp_queries, candidate_ids):
    """Score every candidate tail as (R_r^T q_head) . embed_cand / sqrt(d)
    plus the relation bias; cross-entropy against the true tail.

    Returns (loss Var, metrics dict with mrr / hits1 / hits10). Rankings
    break ties by candidate position (stable, reproducible).
    """
    if not lp_queries:
        raise TrainingError("link_prediction_loss called with no queries")
    if not candidate_ids:
        raise TrainingError("empty candidate set")
    cfg = result.config
    t = result.tape
    cand_pos = {tid: i for i, tid in enumerate(candidate_ids)}
    rel_ord = {r: i for i, r in enumerate(cfg.relation_ids)}
    rows, rel_idx, targets = [], [], []
    for q in lp_queries:
        if q.true_id not in cand_pos:
            raise TrainingError(f"true id {q.true_id} absent from the "
                                "candidate set")
        if q.relation not in rel_ord:
            raise TrainingError(f"relation {q.relation!r} has no operator")
        rows.append(q.row)
        rel_idx.append(rel_ord[q.relation])
        targets.append(cand_pos[q.true_id])
    hid = _stream_var(result, "struct")
    q_rows = ad.gather_rows(t, hid, rows)
    rel_stack = ad.stack_rows(t, [result.leaves[f"op.rel.{r}"]
                                  for r in cfg.relation_ids])
    ang = ad.gather_rows(t, rel_stack, rel_idx)
    q2 = ad.rotate(t, q_rows, ad.scale(t, ang, -1.0))
    cand = ad.gather_rows(t, result.leaves["embed"], candidate_ids)
    logits = ad.scale(t, ad.matmul(t, q2, ad.transpose(t, cand)),
                      1.0 / math.sqrt(cfg.d_model))
    if cfg.relation_ids:
        n_c = len(candidate_ids)
        flat = [ri for ri in rel_idx for _ in range(n_c)]
        logits = ad.add(t, logits,
                        ad.pair_gather(t, result.leaves["bias.rel"], flat,
                                       len(rows), n_c))
    loss = ad.cross_entropy(t, logits, targets)
    mrr, h1, h10 = _ranking_metrics(logits.m, targets)
    return loss, {"mrr": mrr, "hits1": h1, "hits10": h10}


def _ranking_metrics(score_matrix: Matrix, targets):
    rr, h1, h10 = 0.0, 0, 0
    n = score_matrix.cols
    for i, true_j in enumerate(targets):
        s_true = score_matrix.at(i, true_j)
        rank = 1
        for j in range(n):
            sj = score_matrix.at(i, j)
            if sj > s_true or (sj == s_true and j < true_j):
                rank += 1
        rr += 1.0 / rank
        h1 += rank == 1
        h10 += rank <= 10
    m = len(targets)
    return rr / m, h1 / m, h10 / m


def random_baseline_mrr(candidates: int) -> float:
    """Expected reciprocal rank under a uniformly random ranking."""
    return sum(1.0 / r for r in range(1, candidates + 1)) / candidates


def role_consistency_loss(result: ForwardResult, rc_targets):
    """Recover original token ids at positions whose same-role tokens were
    swapped across instances. Returns (loss Var, accuracy)."""
    if not rc_targets:
        raise TrainingError("role_consistency_loss called with no targets")
    t = result.tape
    hid = _stream_var(result, "struct")
    rows = [r for r, _ in rc_targets]
    for r, _ in rc_targets:
        if not 0 <= r < hid.m.rows:
            raise TrainingError(f"role-consistency row {r} outside the "
                                "structured stream")
    true_ids = [tid for _, tid in rc_targets]
    logits = ad.matmul(t, ad.gather_rows(t, hid, rows), _unembed(result))
    loss = ad.cross_entropy(t, logits, true_ids)
    correct = 0
    for i, tid in enumerate(true_ids):
        best, best_j = -math.inf, -1
        for j in range(logits.m.cols):
            v = logits.m.at(i, j)
            if v > best:
                best, best_j = v, j
        correct += best_j == tid
    return loss, correct / len(true_ids)


def alignment_loss(result: ForwardResult, alignment_pairs,
                   temperature: float = 0.1) -> ad.Var:
    """InfoNCE over (mean-pooled sentence span, encoded entity key) pairs;
    every positive is contrasted against the batch's shared negatives."""
    positives = [p for p in alignment_pairs if p[2] == "positive"]
    negatives = [p for p in alignment_pairs if p[2] == "negative"]
    if any(p[2] not in ("positive", "negative") for p in alignment_pairs):
        raise TrainingError("alignment labels must be positive/negative")
    if not positives:
        raise TrainingError("alignment_loss called with no positive pairs")
    if not negatives:
        raise TrainingError("every positive needs at least one in-batch "
                            "negative")
    t = result.tape
    keys = result.encoded_keys()
    lang = _stream_var(result, "lang")
    pooled = []
    for span, _, _ in positives:
        if not span:
            raise TrainingError("positive pair with an empty span")
        mean = Matrix(1, len(span))
        for j in range(len(span)):
            mean.data[j] = 1.0 / len(span)
        pooled.append(ad.matmul(t, t.constant(mean),
                                ad.gather_rows(t, lang, list(span))))
    p_mat = pooled[0] if len(pooled) == 1 else ad.stack_rows(t, pooled)
    k_pos = ad.gather_rows(t, keys, [p[1] for p in positives])
    k_neg = ad.gather_rows(t, keys, [p[1] for p in negatives])
    ones = Matrix(result.config.d_model, 1)
    for i in range(ones.rows):
        ones.data[i] = 1.0
    own = ad.matmul(t, ad.hadamard(t, p_mat, k_pos), t.constant(ones))
    rest = ad.matmul(t, p_mat, ad.transpose(t, k_neg))
    logits = ad.scale(t, ad.concat_cols(t, [own, rest]), 1.0 / temperature)
    return ad.cross_entropy(t, logits, [0] * len(positives))


def knn_interpolated_distribution(model_dist: Vector, repo: Repository,
                                  query: Vector, k: int, lam: float,
                                  temperature: float = 1.0):
    """Blend the model distribution with a softmax over retrieved items
    aggregated by token id: out = lam * retrieval + (1 - lam) * model.

    Returns (distribution, warned); warned is True when the repository was
    empty and the model distribution passed through unchanged.
    """
    if not 0.0 <= lam <= 1.0:
        raise TrainingError(f"lambda must be in [0, 1], got {lam}")
    if temperature <= 0:
        raise TrainingError("temperature must be positive")
    total = math.fsum(model_dist.data)
    if abs(total - 1.0) > 1e-6 or any(v < 0 for v in model_dist.data):
        raise TrainingError("model_dist is not a probability vector")
    if not repo.frozen:
        raise TrainingError("repository must be frozen")
    if not len(repo.items):
        return model_dist.copy(), True
    hits = query_exact(repo, query, min(k, len(repo.items)))
    mx = max(score for _, score in hits)
    weights = [math.exp((score - mx) / temperature) for _, score in hits]
    z = math.fsum(weights)
    out = Vector(model_dist.dim)
    for (item, _), w in zip(hits, weights):
        if not 0 <= item.token_id < model_dist.dim:
            raise TrainingError(f"retrieved item token id {item.token_id} "
                                "outside the distribution")
        out.data[item.token_id] += lam * w / z
    for i in range(model_dist.dim):
        out.data[i] += (1.0 - lam) * model_dist.data[i]
    if lam == 0.0:
        return model_dist.copy(), False
    return out, False


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: Parameters
    rows: list
    log_path: str | None = None

    def final(self, column: str) -> float:
        return self.rows[-1][column] if self.rows else 0.0

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


_CSV_COLUMNS = ("step", "total_loss", "loss_mlm", "loss_lp", "loss_rc",
                "loss_align", "lp_mrr", "lp_hits1", "rc_acc", "grad_norm")


def train(config: ModelConfig, corpus: Corpus, weights: ObjectiveWeights,
          steps: int, seed: int = 0, *, lr: float = 3e-3, warmup: int = 50,
          weight_decay: float = 0.0, mask_rate: float = 0.15,
          lp_rate: float = 0.5, rc_pairs: int = 2,
          align_pairs: int = 4, align_negatives: int = 4,
          align_temperature: float = 0.1, static_batch: bool = False,
          log_path=None, checkpoint_path=None,
          params: Parameters | None = None) -> TrainResult:
    """Adam loop over the summed weighted objectives.

    weight_decay applies decoupled decay to projection matrices only
    (embeddings, operator parameters, biases, and norm gains are exempt),
    nudging solutions toward the embedding-plus-operator geometry.
    static_batch reuses the step-1 annotations every step (a fixed
    full-batch objective; useful for monotone-descent checks). Metrics are
    appended per step to the CSV at log_path when given. A non-finite loss
    or gradient aborts with the step number and per-term breakdown.
    """
    weights.validate()
    config.validate()
    if steps < 0:
        raise TrainingError("steps must be >= 0")
    if params is None:
        params = init_params(config)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    state = {name: (Matrix(m.rows, m.cols), Matrix(m.rows, m.cols))
             for name, m in params.tensors.items()}
    rows = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
    try:
        for step in range(1, steps + 1):
            batch = build_batch(
                corpus, seed, 1 if static_batch else step,
                mask_rate=mask_rate, lp_rate=lp_rate, rc_pairs=rc_pairs,
                align_pairs=align_pairs, align_negatives=align_negatives)
            tape = ad.Tape()
            result = forward(batch, params, config, tape=tape)
            terms = {}
            metrics = {"lp_mrr": 0.0, "lp_hits1": 0.0, "rc_acc": 0.0}
            if weights.mlm > 0 and batch.mlm_targets:
                terms["mlm"] = (weights.mlm,
                                mlm_loss(result, batch.mlm_targets))
            if weights.lp > 0 and batch.lp_queries:
                lv, m = link_prediction_loss(result, batch.lp_queries,
                                             batch.candidate_ids)
                terms["lp"] = (weights.lp, lv)
                metrics["lp_mrr"], metrics["lp_hits1"] = m["mrr"], m["hits1"]
            if weights.rc > 0 and batch.rc_targets:
                lv, acc = role_consistency_loss(result, batch.rc_targets)
                terms["rc"] = (weights.rc, lv)
                metrics["rc_acc"] = acc
            if weights.align > 0 and batch.alignment_pairs:
                terms["align"] = (weights.align,
                                  alignment_loss(result,
                                                 batch.alignment_pairs,
                                                 align_temperature))
            if not terms:
                raise TrainingError(f"step {step}: no active loss terms "
                                    "(all weights zero or no annotations)")
            total = None
            for w, lv in terms.values():
                scaled = ad.scale(tape, lv, w)
                total = scaled if total is None else ad.add(tape, total,
                                                            scaled)
            breakdown = {name: lv.m.data[0] for name, (_, lv) in
                         terms.items()}
            if not all(math.isfinite(v) for v in breakdown.values()):
                raise TrainingError(
                    f"non-finite loss at step {step}: " +
                    ", ".join(f"{k}={v!r}" for k, v in breakdown.items()))
            tape.backward(total)
            sq = 0.0
            for name in params.tensors:
                g = result.leaves[name].grad
                if g is None:
                    continue
                for v in g.data:
                    sq += v * v
            grad_norm = math.sqrt(sq)
            if not math.isfinite(grad_norm):
                raise TrainingError(
                    f"non-finite gradient at step {step}: " +
                    ", ".join(f"{k}={v!r}" for k, v in breakdown.items()))
            lr_t = lr * min(1.0, step / warmup) if warmup else lr
            c1 = 1.0 - beta1 ** step
            c2 = 1.0 - beta2 ** step
            for name, m in params.tensors.items():
                g = result.leaves[name].grad
                if g is None:
                    continue
                mom, var = state[name]
                n = len(m.data)
                if weight_decay and ".w" in name:
                    kern.scal(m.data, 1.0 - lr_t * weight_decay, m.data, n)
                kern.adam_step(m.data, g.data, mom.data, var.data, n,
                               lr_t, beta1, beta2, eps, c1, c2)
            row = {
                "step": step,
                "total_loss": total.m.data[0],
                "loss_mlm": breakdown.get("mlm", 0.0),
                "loss_lp": breakdown.get("lp", 0.0),
                "loss_rc": breakdown.get("rc", 0.0),
                "loss_align": breakdown.get("align", 0.0),
                "lp_mrr": metrics["lp_mrr"],
                "lp_hits1": metrics["lp_hits1"],
                "rc_acc": metrics["rc_acc"],
                "grad_norm": grad_norm,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([repr(row[c]) if c != "step" else row[c]
                                 for c in _CSV_COLUMNS])
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return TrainResult(params=params, rows=rows, log_path=log_path)


def eval_link_prediction(params: Parameters, corpus: Corpus,
                         provenance: str = "heldout",
                         repo: Repository | None = None) -> dict:
    """Rank the true tail of every triple with the given provenance, tails
    masked in the input; deterministic (no sampling)."""
    batch = build_eval_batch(corpus, provenance)
    if not batch.lp_queries:
        raise TrainingError(f"no triples with provenance {provenance!r}")
    result = forward(batch, params, repo=repo)
    _, metrics = link_prediction_loss(result, batch.lp_queries,
                                      batch.candidate_ids)
    return metrics


# ------------------------------------------------------------ data synthesis

@dataclass
class GeneratorSpec:
    entities: int = 20
    relations: int = 3
    sentences: int = 10
    nary_rate: float = 0.0
    corruption_rate: float = 0.0
    heldout_fraction: float = 0.5

    def validate(self) -> None:
        bad = []
        if self.entities < 2:
            bad.append("entities must be >= 2")
        if not 0 <= self.relations <= 3:
            bad.append("relations must be in 0..3 (planted shift patterns)")
        if self.relations >= 2 and self.entities < 4:
            bad.append("two shift relations need at least 4 entities")
        if self.sentences < 0:
            bad.append("sentences must be >= 0")
        for name in ("nary_rate", "corruption_rate", "heldout_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad.append(f"{name} must be in [0, 1]")
        if bad:
            raise TrainingError("inconsistent generator spec: " +
                                "; ".join(bad))


_TEMPLATES = (
    (("the", "{h}", "links", "to", "{t}"),
     ("DET", "NOUN", "VERB", "ADP", "NOUN")),
    (("{h}", "and", "{t}", "are", "linked"),
     ("NOUN", "CCONJ", "NOUN", "AUX", "VERB")),
    (("record", "shows", "{h}", "near", "{t}"),
     ("NOUN", "VERB", "NOUN", "ADP", "NOUN")),
)


def gen_synthetic(spec: GeneratorSpec, seed: int = 0) -> Corpus:
    """Planted-rule corpus: r1 shifts the entity ring by s1, r2 by s2, and
    r3 by s1+s2 (so r3 = r1 composed with r2). A fraction of r3 facts is
    held out by provenance for link-prediction evaluation; every sentence
    verbalizes a training fact so the streams share entity tokens.
    """
    spec.validate()
    rng = random.Random(seed)
    n = spec.entities
    ents = [f"e{i}" for i in range(n)]
    b = CorpusBuilder()
    s1 = 1
    s2 = rng.randrange(2, n - 1) if n > 3 else 1
    shifts = [s1, s2, (s1 + s2) % n][:spec.relations]
    train_pairs = []
    for ri, shift in enumerate(shifts, start=1):
        rel = f"r{ri}"
        heldout_rows = set()
        if ri == 3 and spec.heldout_fraction > 0:
            count = round(spec.heldout_fraction * n)
            heldout_rows = set(rng.sample(range(n), count))
        for i in range(n):
            t_ent = ents[(i + shift) % n]
            if i in heldout_rows:
                b.add_triple(ents[i], rel, t_ent, provenance="heldout")
            elif spec.corruption_rate and rng.random() < spec.corruption_rate:
                wrong = ents[rng.randrange(n)]
                while wrong == t_ent:
                    wrong = ents[rng.randrange(n)]
                b.add_triple(ents[i], rel, wrong, provenance="corrupt")
            else:
                b.add_triple(ents[i], rel, t_ent, provenance="train")
                if ri < 3:
                    train_pairs.append((ents[i], t_ent))
    if spec.nary_rate and spec.relations >= 2:
        for i in range(n):
            if rng.random() < spec.nary_rate:
                b.add_nary("grp", {"A": ents[i],
                                   "B": ents[(i + s1) % n],
                                   "C": ents[(i + s2) % n]},
                           provenance="train")
    if not train_pairs:   # no relations: mention ring neighbors
        train_pairs = [(ents[i], ents[(i + 1) % n]) for i in range(n)]
    for _ in range(spec.sentences):
        h, t_ent = rng.choice(train_pairs)
        tokens, pos = rng.choice(_TEMPLATES)
        b.add_sentence([w.format(h=h, t=t_ent) for w in tokens], list(pos))
    return b.build()


def derive_composed_facts(corpus: Corpus) -> set:
    """Brute-force rule engine: every (h, r3, t) reachable as r1 then r2
    from the training triples. Upper-bound oracle for the planted rule."""
    by_rel = {"r1": {}, "r2": {}}
    for inst in corpus.instances:
        if not _is_triple(inst) or inst.provenance not in ("train",):
            continue
        h, r, t = (corpus.vocabulary.token(tok.token_id)
                   for tok in inst.tokens)
        if r in by_rel:
            by_rel[r][h] = t
    out = set()
    for h, mid in by_rel["r1"].items():
        t = by_rel["r2"].get(mid)
        if t is not None:
            out.add((h, "r3", t))
    return out
