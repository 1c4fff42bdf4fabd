"""Structured instances, sentence views, corpora, and JSONL ingestion.

A corpus mixes facts (triples, n-ary records) and sentences. Each sentence
is expanded into parallel views: a sequence view with positional slots, a
part-of-speech view with within-slot positions, and an optional semantic
role view. The same surface token appears once per view, tied together by
explicit link records, which also feed the instance adjacency used by
neighborhood attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .operators import position_index

MASK_TOKEN = "[MASK]"


class SchemaError(ValueError):
    pass


class Vocabulary:
    """Token-string <-> index table. Index 0 is reserved for the mask token."""

    def __init__(self):
        self._tokens: list[str] = []
        self._index: dict[str, int] = {}
        self.add(MASK_TOKEN)

    def add(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            idx = len(self._tokens)
            self._tokens.append(token)
            self._index[token] = idx
        return idx

    def index(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            raise SchemaError(f"unknown token {token!r}")
        return idx

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise SchemaError(f"token index {idx} out of range")
        return self._tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __len__(self) -> int:
        return len(self._tokens)

    def tokens(self) -> list[str]:
        return list(self._tokens)


@dataclass(frozen=True)
class SlotSchema:
    name: str
    slots: tuple
    allows_within_slot_positions: bool = False
    allows_positions: bool = False  # admit the generated POSITION_k family

    def __post_init__(self):
        if len(set(self.slots)) != len(self.slots):
            raise SchemaError(f"duplicate slot ids in schema {self.name!r}")

    def admits(self, slot) -> bool:
        if slot in self.slots:
            return True
        return self.allows_positions and position_index(slot) is not None


@dataclass(frozen=True)
class Token:
    token_id: int
    slot: str
    within: int | None = None


@dataclass(frozen=True)
class Link:
    token_index: int
    other_instance: str
    other_token_index: int


@dataclass
class StructuredInstance:
    instance_id: str
    schema: SlotSchema
    tokens: list
    provenance: str = ""
    links: list = field(default_factory=list)


TRIPLE_SCHEMA = SlotSchema("triple", ("HEAD", "RELATION", "TAIL"))
SEQUENCE_SCHEMA = SlotSchema("sequence", (), allows_positions=True)


@dataclass
class Violation:
    instance: str
    token_index: int | None
    rule: str
    message: str

    def __str__(self):
        where = (f"{self.instance}[{self.token_index}]"
                 if self.token_index is not None else self.instance)
        return f"{where}: {self.rule}: {self.message}"


class Corpus:
    """Frozen bundle of instances plus vocabulary and adjacency."""

    def __init__(self, vocabulary: Vocabulary, entities, instances,
                 adjacency, records):
        self.vocabulary = vocabulary
        self.entities = frozenset(entities)
        self.instances = list(instances)
        self.adjacency = {k: frozenset(v) for k, v in adjacency.items()}
        self.records = list(records)
        self.by_id = {inst.instance_id: inst for inst in self.instances}

    def entity_token_ids(self) -> set:
        return {self.vocabulary.index(e) for e in self.entities}

    def neighbors(self, instance_id) -> frozenset:
        return self.adjacency.get(instance_id, frozenset())


# ------------------------------------------------------------- constructors

def triple_to_instance(h: str, r: str, t: str, vocab: Vocabulary,
                       instance_id: str,
                       provenance: str = "") -> StructuredInstance:
    """One directed edge (h, r, t), reified as its own instance."""
    tokens = [Token(vocab.index(h), "HEAD"),
              Token(vocab.index(r), "RELATION"),
              Token(vocab.index(t), "TAIL")]
    return StructuredInstance(instance_id, TRIPLE_SCHEMA, tokens, provenance)


def instance_to_triple(inst: StructuredInstance, vocab: Vocabulary):
    if inst.schema.name != "triple":
        raise SchemaError(f"{inst.instance_id} is not a triple instance")
    by_slot = {tok.slot: tok.token_id for tok in inst.tokens}
    return (vocab.token(by_slot["HEAD"]), vocab.token(by_slot["RELATION"]),
            vocab.token(by_slot["TAIL"]))


def nary_to_instance(pred: str, args: dict, vocab: Vocabulary,
                     instance_id: str,
                     provenance: str = "") -> StructuredInstance:
    """An n-ary fact: predicate plus one role-labeled participant per arg."""
    slots = ("PREDICATE",) + tuple(args.keys())
    schema = SlotSchema(f"nary:{'|'.join(slots)}", slots)
    tokens = [Token(vocab.index(pred), "PREDICATE")]
    for role, entity in args.items():
        tokens.append(Token(vocab.index(entity), role))
    return StructuredInstance(instance_id, schema, tokens, provenance)


def sentence_views(tokens, pos_tags, srl=None, *, vocab: Vocabulary,
                   sentence_id: str, provenance: str = ""):
    """Expand a sentence into its parallel views, linked token-by-token.

    Emits a sequence view (POSITION_k slots), a POS view (tag slots with
    within-slot occurrence counts), and an SRL view when a role assignment
    is given. Links are recorded once per view pair, on the later view.
    """
    if len(pos_tags) != len(tokens):
        raise SchemaError(
            f"pos tags misaligned with tokens at index "
            f"{min(len(tokens), len(pos_tags))}: "
            f"{len(tokens)} tokens vs {len(pos_tags)} tags")
    ids = [vocab.add(t) for t in tokens]
    seq_id = f"{sentence_id}/seq"
    pos_id = f"{sentence_id}/pos"

    seq = StructuredInstance(
        seq_id, SEQUENCE_SCHEMA,
        [Token(tid, f"POSITION_{j + 1}") for j, tid in enumerate(ids)],
        provenance)

    pos_schema = SlotSchema(f"pos:{sentence_id}",
                            tuple(dict.fromkeys(pos_tags)),
                            allows_within_slot_positions=True)
    seen: dict[str, int] = {}
    pos_tokens = []
    for tid, tag in zip(ids, pos_tags):
        seen[tag] = seen.get(tag, 0) + 1
        pos_tokens.append(Token(tid, tag, within=seen[tag]))
    pos = StructuredInstance(
        pos_id, pos_schema, pos_tokens, provenance,
        links=[Link(j, seq_id, j) for j in range(len(ids))])

    views = [seq, pos]
    if srl is not None:
        roles = tuple(srl.keys())
        srl_schema = SlotSchema(f"srl:{sentence_id}", roles,
                                allows_within_slot_positions=True)
        srl_tokens = []
        srl_links = []
        for role, indexes in srl.items():
            for within, j in enumerate(indexes, start=1):
                if not 0 <= j < len(ids):
                    raise SchemaError(
                        f"srl role {role!r} references token index {j} "
                        f"outside sentence of length {len(ids)}")
                k = len(srl_tokens)
                srl_tokens.append(Token(ids[j], role, within=within))
                srl_links.append(Link(k, seq_id, j))
                srl_links.append(Link(k, pos_id, j))
        views.append(StructuredInstance(f"{sentence_id}/srl", srl_schema,
                                        srl_tokens, provenance, srl_links))
    return views


# ---------------------------------------------------------------- adjacency

def build_adjacency(instances, entities, vocab: Vocabulary) -> dict:
    """Neighbors = instances sharing an entity token, plus linked views."""
    adj: dict[str, set] = {inst.instance_id: set() for inst in instances}
    entity_ids = {vocab.index(e) for e in entities if e in vocab}
    holders: dict[int, list] = {}
    for inst in instances:
        mine = {tok.token_id for tok in inst.tokens if tok.token_id in entity_ids}
        for tid in mine:
            holders.setdefault(tid, []).append(inst.instance_id)
    for members in holders.values():
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                if a != b:
                    adj[a].add(b)
                    adj[b].add(a)
    for inst in instances:
        for link in inst.links:
            if link.other_instance in adj:
                adj[inst.instance_id].add(link.other_instance)
                adj[link.other_instance].add(inst.instance_id)
    return adj


# ---------------------------------------------------------------- validate

def validate(corpus: Corpus) -> list:
    """Total check of every corpus invariant; violations, never exceptions."""
    out: list[Violation] = []
    seen_ids = set()
    vocab_size = len(corpus.vocabulary)
    for inst in corpus.instances:
        if inst.instance_id in seen_ids:
            out.append(Violation(inst.instance_id, None, "unique-id",
                                 "duplicate instance id"))
        seen_ids.add(inst.instance_id)
        for j, tok in enumerate(inst.tokens):
            if not 0 <= tok.token_id < vocab_size:
                out.append(Violation(inst.instance_id, j, "token-range",
                                     f"token id {tok.token_id} outside "
                                     f"vocabulary of {vocab_size}"))
            if not inst.schema.admits(tok.slot):
                out.append(Violation(inst.instance_id, j, "slot-membership",
                                     f"slot {tok.slot!r} not in schema "
                                     f"{inst.schema.name!r}"))
            has_within = tok.within is not None
            if has_within != inst.schema.allows_within_slot_positions:
                out.append(Violation(
                    inst.instance_id, j, "within-slot-position",
                    "present" if has_within else "missing"))
        for link in inst.links:
            if link.other_instance not in corpus.by_id:
                out.append(Violation(inst.instance_id, link.token_index,
                                     "link-target",
                                     f"links to missing instance "
                                     f"{link.other_instance!r}"))
            else:
                other = corpus.by_id[link.other_instance]
                if not 0 <= link.other_token_index < len(other.tokens):
                    out.append(Violation(inst.instance_id, link.token_index,
                                         "link-target",
                                         f"token {link.other_token_index} "
                                         f"outside {link.other_instance!r}"))
            if not 0 <= link.token_index < len(inst.tokens):
                out.append(Violation(inst.instance_id, link.token_index,
                                     "link-source", "source index out of range"))

    for a, nbrs in corpus.adjacency.items():
        if a not in corpus.by_id:
            out.append(Violation(a, None, "adjacency-id", "unknown instance"))
        for b in nbrs:
            if b not in corpus.adjacency or a not in corpus.adjacency.get(b, ()):
                out.append(Violation(a, None, "adjacency-symmetry",
                                     f"{a} -> {b} has no reverse entry"))

    # every shared-entity pair must be present
    expected = build_adjacency(corpus.instances, corpus.entities,
                               corpus.vocabulary)
    for a, nbrs in expected.items():
        missing = nbrs - set(corpus.adjacency.get(a, frozenset()))
        for b in sorted(missing):
            out.append(Violation(a, None, "adjacency-missing",
                                 f"shared entity or link with {b} "
                                 f"not in adjacency"))
    return out


# ------------------------------------------------------------------ builder

class CorpusBuilder:
    """Accumulates records and instances, then freezes into a Corpus."""

    def __init__(self):
        self.vocab = Vocabulary()
        self.entities: set[str] = set()
        self.instances: list[StructuredInstance] = []
        self.records: list[dict] = []
        self._n = 0

    def _next_id(self, prefix: str) -> str:
        self._n += 1
        return f"{prefix}{self._n - 1}"

    def add_triple(self, h: str, r: str, t: str, provenance: str = "") -> str:
        for s in (h, r, t):
            self.vocab.add(s)
        self.entities.update((h, t))
        iid = self._next_id("i")
        self.instances.append(
            triple_to_instance(h, r, t, self.vocab, iid, provenance))
        rec = {"kind": "triple", "h": h, "r": r, "t": t}
        if provenance:
            rec["provenance"] = provenance
        self.records.append(rec)
        return iid

    def add_nary(self, pred: str, args: dict, provenance: str = "") -> str:
        self.vocab.add(pred)
        for entity in args.values():
            self.vocab.add(entity)
            self.entities.add(entity)
        iid = self._next_id("i")
        self.instances.append(
            nary_to_instance(pred, args, self.vocab, iid, provenance))
        rec = {"kind": "nary", "pred": pred, "args": dict(args)}
        if provenance:
            rec["provenance"] = provenance
        self.records.append(rec)
        return iid

    def add_sentence(self, tokens, pos_tags, srl=None):
        sid = self._next_id("s")
        views = sentence_views(tokens, pos_tags, srl, vocab=self.vocab,
                               sentence_id=sid)
        self.instances.extend(views)
        rec = {"kind": "sentence", "tokens": list(tokens),
               "pos": list(pos_tags)}
        if srl is not None:
            rec["srl"] = {k: list(v) for k, v in srl.items()}
        self.records.append(rec)
        return [v.instance_id for v in views]

    def build(self, check: bool = True) -> Corpus:
        adjacency = build_adjacency(self.instances, self.entities, self.vocab)
        corpus = Corpus(self.vocab, self.entities, self.instances,
                        adjacency, self.records)
        if check:
            violations = validate(corpus)
            if violations:
                listing = "; ".join(str(v) for v in violations[:10])
                raise SchemaError(
                    f"corpus has {len(violations)} violation(s): {listing}")
        return corpus


# -------------------------------------------------------------------- JSONL

_ALLOWED_FIELDS = {
    "triple": {"kind", "h", "r", "t", "provenance"},
    "nary": {"kind", "pred", "args", "provenance"},
    "sentence": {"kind", "tokens", "pos", "srl"},
}


def _reject_fields(rec: dict, kind: str, ln: int) -> None:
    extra = set(rec) - _ALLOWED_FIELDS[kind]
    if extra:
        raise SchemaError(
            f"line {ln}: unknown field(s) {sorted(extra)} for kind {kind!r}")


def _want(rec: dict, key: str, typ, ln: int):
    if key not in rec:
        raise SchemaError(f"line {ln}: missing field {key!r}")
    val = rec[key]
    if not isinstance(val, typ):
        raise SchemaError(
            f"line {ln}: field {key!r} must be {typ.__name__}, "
            f"got {type(val).__name__}")
    return val


def _str_list(rec: dict, key: str, ln: int):
    val = _want(rec, key, list, ln)
    if not all(isinstance(x, str) for x in val):
        raise SchemaError(f"line {ln}: field {key!r} must hold strings")
    return val


def ingest_jsonl(path) -> Corpus:
    """Parse a JSONL corpus strictly; any violation fails with its line."""
    builder = CorpusBuilder()
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {ln}: invalid JSON: {exc.msg}")
            if not isinstance(rec, dict):
                raise SchemaError(f"line {ln}: record must be an object")
            kind = rec.get("kind")
            if kind not in _ALLOWED_FIELDS:
                raise SchemaError(f"line {ln}: unknown kind {kind!r}")
            _reject_fields(rec, kind, ln)
            prov = rec.get("provenance", "")
            if not isinstance(prov, str):
                raise SchemaError(f"line {ln}: provenance must be a string")
            if kind == "triple":
                h = _want(rec, "h", str, ln)
                r = _want(rec, "r", str, ln)
                t = _want(rec, "t", str, ln)
                builder.add_triple(h, r, t, prov)
            elif kind == "nary":
                pred = _want(rec, "pred", str, ln)
                args = _want(rec, "args", dict, ln)
                if not all(isinstance(k, str) and isinstance(v, str)
                           for k, v in args.items()):
                    raise SchemaError(f"line {ln}: args must map role to entity")
                builder.add_nary(pred, args, prov)
            else:
                tokens = _str_list(rec, "tokens", ln)
                pos = _str_list(rec, "pos", ln)
                srl = rec.get("srl")
                if srl is not None:
                    if not isinstance(srl, dict) or not all(
                            isinstance(k, str) and isinstance(v, list)
                            and all(isinstance(i, int) for i in v)
                            for k, v in srl.items()):
                        raise SchemaError(
                            f"line {ln}: srl must map role to token indexes")
                try:
                    builder.add_sentence(tokens, pos, srl)
                except SchemaError as exc:
                    raise SchemaError(f"line {ln}: {exc}")
    corpus = builder.build(check=False)
    violations = validate(corpus)
    if violations:
        listing = "; ".join(str(v) for v in violations[:10])
        raise SchemaError(
            f"corpus failed validation with {len(violations)} "
            f"violation(s): {listing}")
    return corpus


def write_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in corpus.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
