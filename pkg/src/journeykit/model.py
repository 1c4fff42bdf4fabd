"""Dual-stream transformer with role-transport attention.

Two token streams share one embedding table: a language stream over
sentence-view tokens and a structured stream over fact tokens. Each layer
group owns a stream, a masking level, and a journey mode; attention scores
move queries and keys through role operators before the dot product
(per-token endpoint transport, so the full pairwise transport never has to
be materialized). Cross groups let language queries attend over key-value
items that live outside the model, either a frozen repository snapshot or
items re-encoded from the structured tokens in the batch each step.

Blocks are pre-norm residual; feed-forward is a two-layer tanh MLP.
Checkpoints are a named tensor table behind a magic string and a
configuration hash.

Batches must be built in a canonical instance order (the training module
sorts by instance id); with that, forward outputs are bitwise reproducible
and independent of how the caller ordered the input instances.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field

from ._binio import Reader, f64_bytes, pack_i64, pack_text
from .numerics import Matrix, Vector
from .numerics import autodiff as ad
from .operators import OperatorTable, RoleOperator, position_index, rope_freqs
from .repository import Repository, encode_instance, query_exact

CHECKPOINT_MAGIC = b"JRCK0001"
STREAMS = ("language", "structured", "cross")
LEVELS = ("instance_local", "neighborhood", "global")
JOURNEY_MODES = ("slot_journey", "instance_journey")
SLOT_OP_KINDS = ("rotation", "diagonal", "low_rank")
READOUTS = ("mean_pool", "attention_pool")


class ModelError(ValueError):
    pass


# ------------------------------------------------------------ configuration

@dataclass
class LayerGroupConfig:
    stream: str
    level: str = "instance_local"
    layers: int = 1
    positional_transport: bool = True
    journey_mode: str = "slot_journey"

    def to_dict(self) -> dict:
        return {"stream": self.stream, "level": self.level,
                "layers": self.layers,
                "positional_transport": self.positional_transport,
                "journey_mode": self.journey_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerGroupConfig":
        return cls(**d)


def default_layer_groups() -> tuple:
    """Desk-scale stack: structured local x2, structured neighborhood x1,
    language local x2, cross global x1, language global x1."""
    return (
        LayerGroupConfig("structured", "instance_local", 2),
        LayerGroupConfig("structured", "neighborhood", 1,
                         journey_mode="instance_journey"),
        LayerGroupConfig("language", "instance_local", 2),
        LayerGroupConfig("cross", "global", 1, positional_transport=False),
        LayerGroupConfig("language", "global", 1, positional_transport=False,
                         journey_mode="instance_journey"),
    )


@dataclass
class ModelConfig:
    vocab_size: int
    slot_ids: tuple = ()
    relation_ids: tuple = ()
    d_model: int = 32
    head_count: int = 2
    layer_groups: tuple = field(default_factory=default_layer_groups)
    slot_op_kind: str = "rotation"
    relation_op_kind: str = "rotation"
    instance_op_kind: str = "rotation"
    low_rank_rank: int = 2
    ffn_mult: int = 2
    readout: str = "mean_pool"
    cross_top_k: int = 0
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.head_count

    @property
    def layer_count(self) -> int:
        return sum(g.layers for g in self.layer_groups)

    def validate(self) -> None:
        bad = []
        if self.vocab_size < 1:
            bad.append(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.head_count < 1 or self.d_model < 1:
            bad.append("d_model and head_count must be positive")
        elif self.d_model % self.head_count:
            bad.append(f"d_model {self.d_model} not divisible by "
                       f"head_count {self.head_count}")
        elif self.head_dim % 2:
            bad.append(f"head_dim {self.head_dim} must be even for "
                       "rotation transport")
        if self.d_model % 2:
            bad.append("d_model must be even for relation rotations")
        if not self.layer_groups:
            bad.append("at least one layer group is required")
        for gi, g in enumerate(self.layer_groups):
            if g.stream not in STREAMS:
                bad.append(f"group {gi}: unknown stream {g.stream!r}")
            if g.level not in LEVELS:
                bad.append(f"group {gi}: unknown level {g.level!r}")
            if g.journey_mode not in JOURNEY_MODES:
                bad.append(f"group {gi}: unknown journey mode "
                           f"{g.journey_mode!r}")
            if g.layers < 1:
                bad.append(f"group {gi}: layers must be >= 1")
            if g.stream == "cross" and g.journey_mode != "slot_journey":
                bad.append(f"group {gi}: cross groups support slot_journey "
                           "only (stored items carry no instance operators)")
        if self.slot_op_kind not in SLOT_OP_KINDS:
            bad.append(f"unknown slot_op_kind {self.slot_op_kind!r}")
        if self.relation_op_kind != "rotation":
            bad.append("relation operators support the rotation kind only")
        if self.instance_op_kind != "rotation":
            bad.append("instance operators support the rotation kind only")
        if self.readout not in READOUTS:
            bad.append(f"unknown readout {self.readout!r}")
        if self.low_rank_rank < 1:
            bad.append("low_rank_rank must be >= 1")
        if self.ffn_mult < 1:
            bad.append("ffn_mult must be >= 1")
        if self.cross_top_k < 0:
            bad.append("cross_top_k must be >= 0 (0 means attend all items)")
        seen = set()
        for s in self.slot_ids:
            if position_index(s) is not None:
                bad.append(f"slot_ids must not contain positional slots: {s}")
            if s in seen:
                bad.append(f"duplicate slot id {s!r}")
            seen.add(s)
        if len(set(self.relation_ids)) != len(self.relation_ids):
            bad.append("duplicate relation ids")
        if bad:
            raise ModelError("invalid config: " + "; ".join(bad))

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "slot_ids": list(self.slot_ids),
            "relation_ids": list(self.relation_ids),
            "d_model": self.d_model,
            "head_count": self.head_count,
            "layer_groups": [g.to_dict() for g in self.layer_groups],
            "slot_op_kind": self.slot_op_kind,
            "relation_op_kind": self.relation_op_kind,
            "instance_op_kind": self.instance_op_kind,
            "low_rank_rank": self.low_rank_rank,
            "ffn_mult": self.ffn_mult,
            "readout": self.readout,
            "cross_top_k": self.cross_top_k,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["slot_ids"] = tuple(d.get("slot_ids", ()))
        d["relation_ids"] = tuple(d.get("relation_ids", ()))
        d["layer_groups"] = tuple(LayerGroupConfig.from_dict(g)
                                  for g in d.get("layer_groups", ()))
        return cls(**d)


def config_digest(config: ModelConfig) -> str:
    raw = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


def config_from_corpus(corpus, **overrides) -> ModelConfig:
    """Derive slot and relation vocabularies from a validated corpus."""
    slots = set()
    relations = set()
    for inst in corpus.instances:
        for tok in inst.tokens:
            if position_index(tok.slot) is None:
                slots.add(tok.slot)
            if tok.slot in ("RELATION", "PREDICATE"):
                relations.add(corpus.vocabulary.token(tok.token_id))
    cfg = ModelConfig(vocab_size=len(corpus.vocabulary),
                      slot_ids=tuple(sorted(slots)),
                      relation_ids=tuple(sorted(relations)),
                      **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class TokenRef:
    """One token as the model sees it: id, slot, owning instance."""
    token_id: int
    slot: str
    instance: str
    within: int | None = None


class Parameters:
    """Named tensor table plus the config it was built for."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def clone(self) -> "Parameters":
        return Parameters(self.config,
                          {k: m.copy() for k, m in self.tensors.items()})

    def finite(self) -> bool:
        return all(m.is_finite() for m in self.tensors.values())


def _tensor_specs(config: ModelConfig):
    """Yield (name, rows, cols, init) in a fixed order.

    init is one of "uniform", "zeros", "ones", "small", or
    ("rope", ordinal, width): ordinal steps along the positional frequency
    schedule so every slot and relation starts at a distinct transport.
    """
    d = config.d_model
    f = config.ffn_mult * d
    hd = config.head_dim
    r = config.low_rank_rank
    yield "embed", config.vocab_size, d, "uniform"
    for i in range(config.layer_count):
        yield f"L{i}.wq", d, d, "uniform"
        yield f"L{i}.wk", d, d, "uniform"
        yield f"L{i}.wv", d, d, "uniform"
        yield f"L{i}.wo", d, d, "uniform"
        yield f"L{i}.ln1.g", 1, d, "ones"
        yield f"L{i}.ln1.b", 1, d, "zeros"
        yield f"L{i}.ffn.w1", d, f, "uniform"
        yield f"L{i}.ffn.b1", 1, f, "zeros"
        yield f"L{i}.ffn.w2", f, d, "uniform"
        yield f"L{i}.ffn.b2", 1, d, "zeros"
        yield f"L{i}.ln2.g", 1, d, "ones"
        yield f"L{i}.ln2.b", 1, d, "zeros"
    for ordinal, s in enumerate(config.slot_ids, start=1):
        for h in range(config.head_count):
            if config.slot_op_kind == "rotation":
                yield f"op.slot.{s}.h{h}", 1, hd // 2, ("rope", ordinal, hd)
            elif config.slot_op_kind == "diagonal":
                yield f"op.slot.{s}.h{h}", 1, hd, "zeros"
            else:
                yield f"op.slot.{s}.h{h}.u", hd, r, "small"
                yield f"op.slot.{s}.h{h}.v", hd, r, "small"
    for ordinal, rel in enumerate(config.relation_ids, start=1):
        yield f"op.rel.{rel}", 1, d // 2, ("rope", ordinal, d)
    s_count = len(config.slot_ids)
    if s_count:
        yield "bias.slotpair", config.head_count, s_count * s_count, "zeros"
    if config.relation_ids:
        yield "bias.rel", 1, len(config.relation_ids), "zeros"
    yield "readout.w1", d, d, "uniform"
    yield "readout.b1", 1, d, "zeros"
    yield "readout.w2", d, hd // 2, "zeros"
    yield "readout.b2", 1, hd // 2, "zeros"
    if config.readout == "attention_pool":
        yield "readout.score", 1, d, "uniform"
    yield "repo.wk", d, d, "uniform"
    yield "repo.wv", d, d, "uniform"


def init_params(config: ModelConfig) -> Parameters:
    """Seeded init: uniform +-1/sqrt(d) projections, identity layer norms,
    zero biases, slot/relation rotations staggered along the positional
    frequency schedule, and a zero final readout layer so every instance
    operator starts exactly at the identity."""
    config.validate()
    rng = random.Random(config.seed)
    scale = 1.0 / math.sqrt(config.d_model)
    tensors = {}
    for name, rows, cols, init in _tensor_specs(config):
        m = Matrix(rows, cols)
        if init == "uniform":
            for i in range(rows * cols):
                m.data[i] = rng.uniform(-scale, scale)
        elif init == "small":
            for i in range(rows * cols):
                m.data[i] = rng.uniform(-0.1, 0.1)
        elif init == "ones":
            for i in range(rows * cols):
                m.data[i] = 1.0
        elif init != "zeros":
            _, ordinal, width = init
            freqs = rope_freqs(width)
            for i in range(cols):
                m.data[i] = ordinal * freqs[i % len(freqs)]
        tensors[name] = m
    return Parameters(config, tensors)


# ------------------------------------------------------------- forward pass

@dataclass
class ForwardResult:
    tape: ad.Tape
    leaves: dict
    lang: ad.Var | None
    struct: ad.Var | None
    lang_tokens: list
    struct_tokens: list
    attention: dict
    cross_items: list
    config: ModelConfig
    _ctx: object = None

    def lang_matrix(self) -> Matrix | None:
        return self.lang.m.copy() if self.lang is not None else None

    def struct_matrix(self) -> Matrix | None:
        return self.struct.m.copy() if self.struct is not None else None

    def encoded_keys(self) -> ad.Var:
        """Differentiable retrieval keys for the structured tokens, one row
        per token, shared with any cross block in the same forward."""
        if not self.struct_tokens:
            raise ModelError("no structured tokens to encode")
        keys, _ = self._ctx.cross_items_cache(self.struct_tokens)
        return keys


class _Ctx:
    """Per-forward scratch: leaf handles, cached constants and gathers."""

    def __init__(self, tape, leaves, config, capture, cross_top_k):
        self.t = tape
        self.lv = leaves
        self.cfg = config
        self.capture = capture
        self.cross_top_k = cross_top_k
        self.attention = {}
        self.cache = {}
        self.freqs_head = rope_freqs(config.head_dim)
        self.freqs_full = rope_freqs(config.d_model)
        self.slot_ord = {s: i for i, s in enumerate(config.slot_ids)}

    def want(self, li, head) -> bool:
        if self.capture is None:
            return False
        if self.capture is True:
            return True
        return (li, head) in self.capture

    def grab(self, li, head, probs) -> None:
        if self.want(li, head):
            self.attention[(li, head)] = probs.m.copy()

    def const(self, key, build):
        if key not in self.cache:
            self.cache[key] = self.t.constant(build())
        return self.cache[key]

    def zero_row(self, w):
        return self.const(("zero", w), lambda: Matrix(1, w))

    def eye(self, n):
        return self.const(("eye", n), lambda: Matrix.identity(n))

    def ordinal(self, slot) -> int:
        o = self.slot_ord.get(slot)
        if o is not None:
            return o
        if position_index(slot) is not None:
            return len(self.cfg.slot_ids)
        raise ModelError(f"slot {slot!r} has no learned operator "
                         "(not in config.slot_ids)")

    def slot_idx(self, toks):
        key = ("sidx", id(toks))
        if key not in self.cache:
            self.cache[key] = [self.ordinal(tok.slot) for tok in toks]
        return self.cache[key]

    def slot_stack(self, head):
        """Learned rotation angle rows, one per slot, plus a zero row for
        positional slots (their transport is pure position)."""
        key = ("sstack", head)
        if key not in self.cache:
            if not self.cfg.slot_ids:
                self.cache[key] = None
            else:
                rows = [self.lv[f"op.slot.{s}.h{head}"]
                        for s in self.cfg.slot_ids]
                rows.append(self.zero_row(self.cfg.head_dim // 2))
                self.cache[key] = ad.stack_rows(self.t, rows)
        return self.cache[key]

    def diag_stack(self, head, sign):
        key = ("dstack", head, sign)
        if key not in self.cache:
            ck = ("dclamp", head)
            if ck not in self.cache:
                rows = [self.lv[f"op.slot.{s}.h{head}"]
                        for s in self.cfg.slot_ids]
                rows.append(self.zero_row(self.cfg.head_dim))
                stacked = ad.stack_rows(self.t, rows)
                self.cache[ck] = ad.clamp(self.t, stacked,
                                          -math.log(10.0), math.log(10.0))
            logm = self.cache[ck]
            if sign < 0:
                logm = ad.scale(self.t, logm, -1.0)
            self.cache[key] = ad.exp(self.t, logm)
        return self.cache[key]

    def lr_realized(self, slot, head):
        """I + c UV^T with c shrinking the product norm onto the budget."""
        key = ("lr", slot, head)
        if key not in self.cache:
            t = self.t
            u = self.lv[f"op.slot.{slot}.h{head}.u"]
            v = self.lv[f"op.slot.{slot}.h{head}.v"]
            nu = ad.sqrt_scalar(t, ad.sum_all(t, ad.hadamard(t, u, u)))
            nv = ad.sqrt_scalar(t, ad.sum_all(t, ad.hadamard(t, v, v)))
            n = ad.hadamard(t, nu, nv)
            floor = ad.clamp(t, n, 0.8, float("inf"))
            c = ad.scale(t, ad.recip_scalar(t, floor), 0.8)
            uvt = ad.matmul(t, u, ad.transpose(t, v))
            scaled = ad.scale_by_scalar_var(t, uvt, c)
            self.cache[key] = ad.add(t, self.eye(self.cfg.head_dim), scaled)
        return self.cache[key]

    def pos_angles(self, toks):
        """Constant positional + within-slot rotation angles per token."""
        key = ("pang", id(toks))
        if key not in self.cache:
            half = self.cfg.head_dim // 2
            m = Matrix(len(toks), half)
            any_nonzero = False
            for i, tok in enumerate(toks):
                step = position_index(tok.slot) or 0
                if tok.within is not None:
                    step += tok.within
                if step:
                    any_nonzero = True
                    for j, f in enumerate(self.freqs_head):
                        m.data[i * half + j] = step * f
            self.cache[key] = self.t.constant(m) if any_nonzero else None
        return self.cache[key]

    def pair_bias(self, q_toks, k_toks, head):
        if not self.cfg.slot_ids:
            return None
        key = ("pidx", id(q_toks), id(k_toks))
        if key not in self.cache:
            s_count = len(self.cfg.slot_ids)
            qo = [self.slot_ord.get(tok.slot, -1) for tok in q_toks]
            ko = [self.slot_ord.get(tok.slot, -1) for tok in k_toks]
            self.cache[key] = [qi * s_count + kj if qi >= 0 and kj >= 0
                               else -1 for qi in qo for kj in ko]
        idx = self.cache[key]
        rk = ("brow", head)
        if rk not in self.cache:
            self.cache[rk] = ad.gather_rows(self.t, self.lv["bias.slotpair"],
                                            [head])
        return ad.pair_gather(self.t, self.cache[rk], idx,
                              len(q_toks), len(k_toks))

    def mask_for(self, q_toks, k_toks, level, adjacency):
        key = ("mask", id(q_toks), id(k_toks), level)
        if key not in self.cache:
            n = len(k_toks)
            if level == "global":
                mask = bytearray(b"\x01" * (len(q_toks) * n))
            else:
                mask = bytearray(len(q_toks) * n)
                for i, qt in enumerate(q_toks):
                    near = adjacency.get(qt.instance, ()) \
                        if level == "neighborhood" else ()
                    for j, kt in enumerate(k_toks):
                        if kt.instance == qt.instance or kt.instance in near:
                            mask[i * n + j] = 1
            self.cache[key] = mask
        return self.cache[key]

    # ------------------------------------------------------ journey stages

    def angle_total(self, toks, group, head, inst):
        key = ("ang", id(toks), group.positional_transport,
               group.journey_mode, head)
        if key not in self.cache:
            terms = []
            if self.cfg.slot_op_kind == "rotation":
                stacked = self.slot_stack(head)
                if stacked is not None:
                    terms.append(ad.gather_rows(self.t, stacked,
                                                self.slot_idx(toks)))
            if group.positional_transport:
                pos = self.pos_angles(toks)
                if pos is not None:
                    terms.append(pos)
            if group.journey_mode == "instance_journey" and inst is not None:
                terms.append(inst.rows_for(self, toks))
            total = None
            for term in terms:
                total = term if total is None else ad.add(self.t, total, term)
            neg = None if total is None else ad.scale(self.t, total, -1.0)
            self.cache[key] = neg
        return self.cache[key]

    def transport(self, x, toks, group, head, side, inst):
        """Move queries (E^T q) or keys (E^-1 k) through their own endpoint
        operator E = Slot o Positional o Instance, staged left to right."""
        t = self.t
        kind = self.cfg.slot_op_kind
        if kind == "diagonal" and self.cfg.slot_ids:
            mags = self.diag_stack(head, +1 if side == "query" else -1)
            x = ad.hadamard(t, x,
                            ad.gather_rows(t, mags, self.slot_idx(toks)))
        elif kind == "low_rank" and self.cfg.slot_ids:
            x = self._low_rank_apply(x, toks, head, side)
        neg = self.angle_total(toks, group, head, inst)
        if neg is not None:
            x = ad.rotate(t, x, neg)
        return x

    def _low_rank_apply(self, x, toks, head, side):
        t = self.t
        groups = {}
        for i, tok in enumerate(toks):
            groups.setdefault(self.ordinal(tok.slot), []).append(i)
        parts, order = [], []
        for o in sorted(groups):
            rows = groups[o]
            sub = ad.gather_rows(t, x, rows)
            if o < len(self.cfg.slot_ids):
                m = self.lr_realized(self.cfg.slot_ids[o], head)
                if side == "key":
                    m = ad.transpose(t, ad.inverse(t, m))
                sub = ad.matmul(t, sub, m)
            parts.append(sub)
            order.extend(rows)
        inv = [0] * len(order)
        for p, i in enumerate(order):
            inv[i] = p
        return ad.gather_rows(t, ad.stack_rows(t, parts), inv)


class _InstanceAngles:
    """Rotation angles per instance, derived from pooled token embeddings
    through the readout projector. Zero final layer at init keeps every
    instance operator at the identity until training moves it."""

    def __init__(self, ctx, token_lists):
        by_id = {}
        for toks in token_lists:
            for tok in toks:
                by_id.setdefault(tok.instance, []).append(tok.token_id)
        self.ids = sorted(by_id)
        self.ord = {iid: i for i, iid in enumerate(self.ids)}
        t, lv = ctx.t, ctx.lv
        rows = []
        for iid in self.ids:
            ids = by_id[iid]
            emb = ad.gather_rows(t, lv["embed"], ids)
            if ctx.cfg.readout == "attention_pool":
                s = ad.matmul(t, emb, ad.transpose(t, lv["readout.score"]))
                probs = ad.masked_softmax(t, ad.transpose(t, s),
                                          bytearray(b"\x01" * len(ids)))
                pooled = ad.matmul(t, probs, emb)
            else:
                mean = Matrix(1, len(ids))
                for j in range(len(ids)):
                    mean.data[j] = 1.0 / len(ids)
                pooled = ad.matmul(t, t.constant(mean), emb)
            h1 = ad.tanh(t, ad.add_row_broadcast(
                t, ad.matmul(t, pooled, lv["readout.w1"]), lv["readout.b1"]))
            ang = ad.add_row_broadcast(
                t, ad.matmul(t, h1, lv["readout.w2"]), lv["readout.b2"])
            rows.append(ang)
        rows.append(ctx.zero_row(ctx.cfg.head_dim // 2))
        self.stack = ad.stack_rows(ctx.t, rows)

    def rows_for(self, ctx, toks):
        idx = [self.ord.get(tok.instance, len(self.ids)) for tok in toks]
        return ad.gather_rows(ctx.t, self.stack, idx)


def _check_tokens(toks, vocab_size, stream):
    for tok in toks:
        if not 0 <= tok.token_id < vocab_size:
            raise ModelError(f"{stream} token id {tok.token_id} outside "
                             f"vocabulary of size {vocab_size}")


def _ffn(ctx, h, li):
    t, lv = ctx.t, ctx.lv
    pre = ad.layernorm(t, h, lv[f"L{li}.ln2.g"], lv[f"L{li}.ln2.b"])
    f1 = ad.tanh(t, ad.add_row_broadcast(
        t, ad.matmul(t, pre, lv[f"L{li}.ffn.w1"]), lv[f"L{li}.ffn.b1"]))
    f2 = ad.add_row_broadcast(
        t, ad.matmul(t, f1, lv[f"L{li}.ffn.w2"]), lv[f"L{li}.ffn.b2"])
    return ad.add(t, h, f2)


def _attend(ctx, h, q_toks, group, li, k_toks, kmat, vmat, mask):
    """Shared attention core: pre-norm, per-head transport, masked softmax,
    value mix, output projection, residual, feed-forward."""
    t, lv, cfg = ctx.t, ctx.lv, ctx.cfg
    hd = cfg.head_dim
    pre = ad.layernorm(t, h, lv[f"L{li}.ln1.g"], lv[f"L{li}.ln1.b"])
    q = ad.matmul(t, pre, lv[f"L{li}.wq"])
    if kmat is None:
        kmat = ad.matmul(t, pre, lv[f"L{li}.wk"])
        vmat = ad.matmul(t, pre, lv[f"L{li}.wv"])
    outs = []
    for head in range(cfg.head_count):
        qh = ad.gather_cols(t, q, head * hd, hd)
        kh = ad.gather_cols(t, kmat, head * hd, hd)
        vh = ad.gather_cols(t, vmat, head * hd, hd)
        q2 = ctx.transport(qh, q_toks, group, head, "query", ctx.inst)
        k2 = ctx.transport(kh, k_toks, group, head, "key", ctx.inst)
        scores = ad.scale(t, ad.matmul(t, q2, ad.transpose(t, k2)),
                          1.0 / math.sqrt(hd))
        bias = ctx.pair_bias(q_toks, k_toks, head)
        if bias is not None:
            scores = ad.add(t, scores, bias)
        probs = ad.masked_softmax(t, scores, mask)
        ctx.grab(li, head, probs)
        outs.append(ad.matmul(t, probs, vh))
    o = ad.matmul(t, ad.concat_cols(t, outs), lv[f"L{li}.wo"])
    return _ffn(ctx, ad.add(t, h, o), li)


def _encode_items(ctx, struct_toks):
    """Differentiable twin of the repository encoder: key = W_k applied to
    the slot-transported embedding (plus positional and within-slot
    rotations at full width), value = W_v applied to the raw embedding."""
    t, lv, cfg = ctx.t, ctx.lv, ctx.cfg
    ids = [tok.token_id for tok in struct_toks]
    x = ad.gather_rows(t, lv["embed"], ids)
    hd = cfg.head_dim
    if cfg.slot_op_kind == "rotation":
        parts = []
        for head in range(cfg.head_count):
            stacked = ctx.slot_stack(head)
            xh = ad.gather_cols(t, x, head * hd, hd)
            if stacked is not None:
                ang = ad.gather_rows(t, stacked, ctx.slot_idx(struct_toks))
                xh = ad.rotate(t, xh, ang)
            parts.append(xh)
        y = ad.concat_cols(t, parts)
    elif cfg.slot_op_kind == "diagonal":
        parts = []
        for head in range(cfg.head_count):
            mags = ctx.diag_stack(head, +1)
            xh = ad.gather_cols(t, x, head * hd, hd)
            parts.append(ad.hadamard(
                t, xh, ad.gather_rows(t, mags, ctx.slot_idx(struct_toks))))
        y = ad.concat_cols(t, parts)
    else:
        parts = []
        for head in range(cfg.head_count):
            xh = ad.gather_cols(t, x, head * hd, hd)
            groups = {}
            for i, tok in enumerate(struct_toks):
                groups.setdefault(ctx.ordinal(tok.slot), []).append(i)
            sub_parts, order = [], []
            for o in sorted(groups):
                rows = groups[o]
                sub = ad.gather_rows(t, xh, rows)
                if o < len(cfg.slot_ids):
                    m = ctx.lr_realized(cfg.slot_ids[o], head)
                    sub = ad.matmul(t, sub, ad.transpose(t, m))
                sub_parts.append(sub)
                order.extend(rows)
            inv = [0] * len(order)
            for p, i in enumerate(order):
                inv[i] = p
            parts.append(ad.gather_rows(t, ad.stack_rows(t, sub_parts), inv))
        y = ad.concat_cols(t, parts)
    halves = cfg.d_model // 2
    ang = Matrix(len(struct_toks), halves)
    any_step = False
    for i, tok in enumerate(struct_toks):
        step = position_index(tok.slot) or 0
        if tok.within is not None:
            step += tok.within
        if step:
            any_step = True
            for j, f in enumerate(ctx.freqs_full):
                ang.data[i * halves + j] = step * f
    if any_step:
        y = ad.rotate(t, y, t.constant(ang))
    keys = ad.matmul(t, y, lv["repo.wk"])
    values = ad.matmul(t, x, lv["repo.wv"])
    return keys, values


def _cross_block(ctx, h, toks, group, li, repo, struct_toks, adjacency):
    t = ctx.t
    if repo is not None:
        if not len(repo.items):
            raise ModelError("cross-attention over an empty repository")
        k_toks = [TokenRef(it.token_id, it.slot, it.instance)
                  for it in repo.items]
        kmat = t.constant(Matrix.from_rows([it.key.tolist()
                                            for it in repo.items]))
        vmat = t.constant(Matrix.from_rows([it.value.tolist()
                                            for it in repo.items]))
    else:
        if not struct_toks:
            raise ModelError(
                "cross-attention needs a frozen repository or structured "
                "instances in the batch")
        k_toks = struct_toks
        kmat, vmat = ctx.cross_items_cache(struct_toks)
    mask = ctx.mask_for(toks, k_toks, group.level, adjacency)
    if repo is not None and ctx.cross_top_k:
        mask = _retrieval_mask(ctx, h, li, repo, mask, len(k_toks))
    inst_saved, ctx.inst = ctx.inst, None
    try:
        out = _attend(ctx, h, toks, group, li, k_toks, kmat, vmat, mask)
    finally:
        ctx.inst = inst_saved
    return out, [(tok.slot, tok.instance, tok.token_id) for tok in k_toks]


def _retrieval_mask(ctx, h, li, repo, level_mask, n_items):
    """Per-query hard top-k selection; gradients flow only through the
    values of the surviving items (straight-through)."""
    t, lv = ctx.t, ctx.lv
    pre = ad.layernorm(t, h, lv[f"L{li}.ln1.g"], lv[f"L{li}.ln1.b"])
    q = ad.matmul(t, pre, lv[f"L{li}.wq"])
    pos = {id(item): j for j, item in enumerate(repo.items)}
    k = min(ctx.cross_top_k, n_items)
    mask = bytearray(len(level_mask))
    rows = q.m.rows
    for i in range(rows):
        hits = query_exact(repo, Vector(q.m.cols, q.m.row(i).data), k)
        for item, _ in hits:
            j = pos[id(item)]
            if level_mask[i * n_items + j]:
                mask[i * n_items + j] = 1
        if not any(mask[i * n_items:(i + 1) * n_items]):
            raise ModelError(
                f"retrieval for query {i} found no items allowed by the "
                f"{k}-item budget and the level mask")
    return mask


def forward(batch, params: Parameters, config: ModelConfig | None = None,
            repo: Repository | None = None, tape: ad.Tape | None = None,
            capture=None) -> ForwardResult:
    """Run the layer stack over one batch.

    With a caller-supplied tape the pass is recorded for backward; leaves
    are created for every named tensor and returned in the result. Without
    one, a throwaway tape runs the same math gradient-free.

    Cross groups attend a frozen repository when one is given, otherwise
    the structured tokens of the batch are re-encoded differentiably each
    call. capture may be True or a set of (layer, head) pairs.
    """
    config = config if config is not None else params.config
    config.validate()
    lang_toks = list(batch.lang_tokens)
    struct_toks = list(batch.struct_tokens)
    adjacency = getattr(batch, "adjacency", {}) or {}
    has_cross = any(g.stream == "cross" for g in config.layer_groups)
    if has_cross and lang_toks and repo is None and not struct_toks:
        raise ModelError(
            "cross-attention needs a frozen repository or structured "
            "instances in the batch")
    if repo is not None and not repo.frozen:
        raise ModelError("repository must be frozen before forward")
    if repo is not None and repo.dim != config.d_model:
        raise ModelError(f"repository dim {repo.dim} != d_model "
                         f"{config.d_model}")
    _check_tokens(lang_toks, config.vocab_size, "language")
    _check_tokens(struct_toks, config.vocab_size, "structured")

    own = tape if tape is not None else ad.Tape()
    requires = tape is not None
    leaves = {name: own.leaf(m, requires=requires)
              for name, m in params.tensors.items()}
    ctx = _Ctx(own, leaves, config, capture, config.cross_top_k)

    def embed_rows(toks):
        return ad.gather_rows(own, leaves["embed"],
                              [tok.token_id for tok in toks])

    h_lang = embed_rows(lang_toks) if lang_toks else None
    h_struct = embed_rows(struct_toks) if struct_toks else None

    needs_instance = any(g.journey_mode == "instance_journey"
                         for g in config.layer_groups)
    ctx.inst = (_InstanceAngles(ctx, [lang_toks, struct_toks])
                if needs_instance else None)

    encoded = {}

    def items_for(toks):
        if id(toks) not in encoded:
            encoded[id(toks)] = _encode_items(ctx, toks)
        return encoded[id(toks)]

    ctx.cross_items_cache = items_for

    cross_items = []
    li = 0
    for group in config.layer_groups:
        for _ in range(group.layers):
            if group.stream == "language" and h_lang is not None:
                mask = ctx.mask_for(lang_toks, lang_toks, group.level,
                                    adjacency)
                h_lang = _attend(ctx, h_lang, lang_toks, group, li,
                                 lang_toks, None, None, mask)
            elif group.stream == "structured" and h_struct is not None:
                mask = ctx.mask_for(struct_toks, struct_toks, group.level,
                                    adjacency)
                h_struct = _attend(ctx, h_struct, struct_toks, group, li,
                                   struct_toks, None, None, mask)
            elif group.stream == "cross" and h_lang is not None:
                h_lang, cross_items = _cross_block(
                    ctx, h_lang, lang_toks, group, li, repo, struct_toks,
                    adjacency)
            li += 1

    return ForwardResult(tape=own, leaves=leaves, lang=h_lang,
                         struct=h_struct, lang_tokens=lang_toks,
                         struct_tokens=struct_toks,
                         attention=ctx.attention, cross_items=cross_items,
                         config=config, _ctx=ctx)


def cross_attend_position_agnostic(hidden, repo: Repository,
                                   params: Parameters, top_k: int = 0,
                                   return_weights: bool = False):
    """One position-agnostic cross-attention block over given hidden states.

    hidden is a list of (vector, slot_id, instance_id) triples; positions
    never enter the computation, so two entries with equal vectors and
    slots produce equal outputs wherever they sit. Items are retrieved from
    the frozen repository (all of them when top_k is 0) and attended with
    slot-journey transport only.
    """
    config = params.config
    config.validate()
    if not repo.frozen:
        raise ModelError("repository must be frozen")
    li = 0
    group = None
    for g in config.layer_groups:
        if g.stream == "cross":
            group = LayerGroupConfig("cross", "global", 1,
                                     positional_transport=False,
                                     journey_mode="slot_journey")
            break
        li += g.layers
    if group is None:
        raise ModelError("config has no cross-attention group")
    rows = []
    toks = []
    for vec, slot, instance in hidden:
        if vec.dim != config.d_model:
            raise ModelError(f"hidden dim {vec.dim} != d_model "
                             f"{config.d_model}")
        rows.append(vec.tolist())
        toks.append(TokenRef(0, slot, instance))
    tape = ad.Tape()
    leaves = {name: tape.leaf(m, requires=False)
              for name, m in params.tensors.items()}
    ctx = _Ctx(tape, leaves, config, True if return_weights else None, top_k)
    ctx.inst = None
    h = tape.constant(Matrix.from_rows(rows))
    out, _ = _cross_block(ctx, h, toks, group, li, repo, [], {})
    vecs = [Vector(config.d_model, out.m.row(i).data)
            for i in range(out.m.rows)]
    if return_weights:
        return vecs, {head: ctx.attention[(li, head)]
                      for head in range(config.head_count)}
    return vecs


# ------------------------------------------------- repository interop

def export_operator_table(params: Parameters) -> OperatorTable:
    """Full-width operator table matching the model's per-head transports
    exactly (heads become blocks of one d_model-sized operator)."""
    cfg = params.config
    table = OperatorTable(cfg.d_model, pos_freqs=rope_freqs(cfg.d_model))
    hd = cfg.head_dim
    for s in cfg.slot_ids:
        if cfg.slot_op_kind == "rotation":
            angles = []
            for h in range(cfg.head_count):
                angles.extend(params.tensors[f"op.slot.{s}.h{h}"].data)
            table.add_slot(s, RoleOperator.rotation(angles, 1.0))
        elif cfg.slot_op_kind == "diagonal":
            logm = []
            for h in range(cfg.head_count):
                logm.extend(params.tensors[f"op.slot.{s}.h{h}"].data)
            table.add_slot(s, RoleOperator.diagonal(logm))
        else:
            r = cfg.low_rank_rank
            u = Matrix(cfg.d_model, cfg.head_count * r)
            v = Matrix(cfg.d_model, cfg.head_count * r)
            for h in range(cfg.head_count):
                uh = params.tensors[f"op.slot.{s}.h{h}.u"]
                vh = params.tensors[f"op.slot.{s}.h{h}.v"]
                nu = math.sqrt(sum(x * x for x in uh.data))
                nv = math.sqrt(sum(x * x for x in vh.data))
                c = 0.8 / max(nu * nv, 0.8)
                for i in range(hd):
                    for j in range(r):
                        u.put(h * hd + i, h * r + j, c * uh.at(i, j))
                        v.put(h * hd + i, h * r + j, vh.at(i, j))
            table.add_slot(s, RoleOperator.low_rank(u, v, clamp=False))
    for rel in cfg.relation_ids:
        table.add_relation(
            rel, RoleOperator.rotation(params.tensors[f"op.rel.{rel}"].data,
                                       1.0))
    return table


def build_repository(instances, params: Parameters,
                     freeze: bool = True) -> Repository:
    """Encode structured instances into a repository with the model's
    embedding table, slot operators, and key/value projections."""
    cfg = params.config
    table = export_operator_table(params)
    from .numerics import transpose as _tr
    w_k = _tr(params.tensors["repo.wk"])
    w_v = _tr(params.tensors["repo.wv"])
    repo = Repository(cfg.d_model)
    for inst in instances:
        repo.add(encode_instance(inst, params.tensors["embed"], w_k, w_v,
                                 table))
    repo.frozen = bool(freeze)
    return repo


# ----------------------------------------------------------- checkpointing

def save_checkpoint(params: Parameters, path) -> None:
    cfg_json = json.dumps(params.config.to_dict(), sort_keys=True)
    digest = hashlib.sha256(cfg_json.encode("utf-8")).hexdigest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(pack_text(cfg_json))
        fh.write(pack_text(digest))
        fh.write(pack_i64(len(params.tensors)))
        for name, m in params.tensors.items():
            fh.write(pack_text(name))
            fh.write(pack_i64(m.rows))
            fh.write(pack_i64(m.cols))
            fh.write(f64_bytes(m.data))


def load_checkpoint(path, config: ModelConfig | None = None) -> Parameters:
    """Read a checkpoint; when a config is passed its hash must match the
    stored one."""
    with open(path, "rb") as fh:
        r = Reader(fh, ModelError)
        magic = r.take(8)
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"unrecognized checkpoint version: magic "
                             f"{magic!r}, expected {CHECKPOINT_MAGIC!r}")
        cfg_json = r.text()
        digest = r.text()
        actual = hashlib.sha256(cfg_json.encode("utf-8")).hexdigest()
        if digest != actual:
            raise ModelError("checkpoint config hash does not match its "
                             "stored config (corrupt file)")
        if config is not None and config_digest(config) != digest:
            raise ModelError(
                "config hash mismatch: checkpoint was saved with a "
                "different configuration")
        stored = ModelConfig.from_dict(json.loads(cfg_json))
        stored.validate()
        count = r.i64()
        tensors = {}
        for _ in range(count):
            name = r.text()
            rows, cols = r.i64(), r.i64()
            if rows < 0 or cols < 0:
                raise ModelError(f"corrupt tensor shape for {name!r}")
            m = Matrix(rows, cols, r.f64s(rows * cols))
            if not m.is_finite():
                raise ModelError(f"non-finite values in tensor {name!r}")
            tensors[name] = m
        r.expect_eof()
    expected = {(n, rw, cl) for n, rw, cl, _ in _tensor_specs(stored)}
    got = {(n, m.rows, m.cols) for n, m in tensors.items()}
    if expected != got:
        missing = sorted(n for n, _, _ in expected - got)
        extra = sorted(n for n, _, _ in got - expected)
        raise ModelError(f"checkpoint tensors do not fit the stored config "
                         f"(missing or misshapen: {missing[:4]}, "
                         f"unexpected: {extra[:4]})")
    return Parameters(stored, tensors)
