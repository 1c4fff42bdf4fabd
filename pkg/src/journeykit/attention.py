"""Journey-conditioned attention: scoring, masks, and the RoPE equivalence.

Scores follow score(i, j) = q_i^T P k_j / sqrt(d) + bias, where P transports
the query's role into the key's role. Masks restrict attention by receptive
level: within one instance, across linked instances, or unrestricted.
"""

from __future__ import annotations

import math

from .numerics import Matrix, Vector, dot, matvec, rotate_vector, transpose
from .operators import (Journey, OperatorTable, RoleOperator, invert,
                        journey, instance_journey)

LEVELS = ("instance_local", "neighborhood", "global")
MODES = ("slot_journey", "instance_journey")


class AttentionError(ValueError):
    pass


class AttentionMask:
    """Boolean queries x keys matrix stored flat; true means attendable."""

    __slots__ = ("level", "rows", "cols", "allow")

    def __init__(self, level: str, rows: int, cols: int, allow=None):
        if level not in LEVELS:
            raise AttentionError(f"unknown mask level {level!r}")
        self.level = level
        self.rows = rows
        self.cols = cols
        self.allow = bytearray(rows * cols) if allow is None else allow
        if len(self.allow) != rows * cols:
            raise AttentionError(
                f"mask buffer length {len(self.allow)} != {rows}x{cols}")

    def allowed(self, i: int, j: int) -> bool:
        return bool(self.allow[i * self.cols + j])

    def set(self, i: int, j: int, value: bool = True) -> None:
        self.allow[i * self.cols + j] = 1 if value else 0


class SlotPairBias:
    """Additive score biases; any pair or relation not set reads as 0."""

    def __init__(self):
        self.table: dict = {}
        self.relation_bias: dict = {}

    def get(self, slot_i, slot_j, head: int = 0) -> float:
        return self.table.get((slot_i, slot_j, head), 0.0)

    def set(self, slot_i, slot_j, head: int, value: float) -> None:
        self.table[(slot_i, slot_j, head)] = value

    def get_relation(self, relation_id, head: int = 0) -> float:
        return self.relation_bias.get((relation_id, head), 0.0)

    def set_relation(self, relation_id, head: int, value: float) -> None:
        self.relation_bias[(relation_id, head)] = value


def journey_score(q: Vector, k: Vector, p: Journey, bias: float,
                  d: int) -> float:
    """q^T P k / sqrt(d) + bias."""
    if q.dim != p.matrix.cols or k.dim != p.matrix.cols:
        raise AttentionError(
            f"dim mismatch: q[{q.dim}], k[{k.dim}], journey "
            f"{p.matrix.rows}x{p.matrix.cols}")
    return dot(q, matvec(p.matrix, k)) / math.sqrt(d) + bias


def edge_score(q_h: Vector, k_t: Vector, r_op: RoleOperator, b_r: float,
               d: int, reverse: bool = False) -> float:
    """Directed relation transport: q_h^T R_r k_t / sqrt(d) + b_r.

    The reverse direction (tail querying head) transports with R_r^{-1}.
    """
    if q_h.dim != r_op.dim or k_t.dim != r_op.dim:
        raise AttentionError(
            f"dim mismatch: q[{q_h.dim}], k[{k_t.dim}], operator dim {r_op.dim}")
    op = invert(r_op) if reverse else r_op
    return dot(q_h, matvec(op.realized, k_t)) / math.sqrt(d) + b_r


def rope_equivalence_check(q: Vector, k: Vector, i: int, j: int, freqs):
    """Score q against k at positions i, j along two independent paths.

    Path one composes the positional journey matrix and transports the key.
    Path two never builds a journey: it rotates q and k separately (each by
    its own position's inverse rotation, so the shared frame cancels) and
    takes a plain dot product. Returns (lhs, rhs, |lhs - rhs|).
    """
    freqs = list(freqs)
    table = OperatorTable(2 * len(freqs), pos_freqs=freqs)
    p = journey(f"POSITION_{i}", f"POSITION_{j}", table)
    lhs = dot(q, matvec(p.matrix, k))

    qr = rotate_vector(q, [-i * f for f in freqs])
    kr = rotate_vector(k, [-j * f for f in freqs])
    rhs = dot(qr, kr)
    return lhs, rhs, abs(lhs - rhs)


def build_mask(level: str, instances, adjacency) -> AttentionMask:
    """Token-level mask for a row of instances laid out in order."""
    owners = []
    for inst in instances:
        if inst.instance_id not in adjacency:
            raise AttentionError(
                f"instance {inst.instance_id!r} missing from adjacency")
        owners.extend(inst.instance_id for _ in inst.tokens)
    n = len(owners)
    mask = AttentionMask(level, n, n)
    if level == "global":
        mask.allow = bytearray(b"\x01" * (n * n))
        return mask
    for i in range(n):
        for j in range(n):
            same = owners[i] == owners[j]
            if level == "instance_local":
                ok = same
            else:
                ok = same or owners[j] in adjacency.get(owners[i], ())
            if ok:
                mask.allow[i * n + j] = 1
    return mask


def attend(queries, keys_values, mask: AttentionMask, table: OperatorTable,
           bias: SlotPairBias, mode: str = "slot_journey", head: int = 0,
           capture: dict | None = None):
    """Masked journey attention: per query, softmax over transported scores.

    queries: list of (q: Vector, slot, instance); keys_values: list of
    (k: Vector, v: Vector, slot, instance). Journeys are looked up per
    (slot, instance) pair through a per-call memo, and the query is
    transported once per pair (q^T P k = (P^T q)^T k). Pass a dict as
    ``capture`` to receive the score and weight matrices.
    """
    if mode not in MODES:
        raise AttentionError(f"unknown journey mode {mode!r}")
    nq, nk = len(queries), len(keys_values)
    if mask.rows != nq or mask.cols != nk:
        raise AttentionError(
            f"mask is {mask.rows}x{mask.cols}, batch is {nq}x{nk}")
    if nq == 0:
        return []
    d = queries[0][0].dim
    scale = 1.0 / math.sqrt(d)

    memo: dict = {}

    def transported(q: Vector, qslot, qinst, kslot, kinst) -> Vector:
        if mode == "slot_journey":
            key = (qslot, kslot)
            if key not in memo:
                memo[key] = transpose(journey(qslot, kslot, table, head).matrix)
        else:
            key = (qslot, qinst, kslot, kinst)
            if key not in memo:
                memo[key] = transpose(
                    instance_journey(qslot, qinst, kinst, kslot, table,
                                     head).matrix)
        return matvec(memo[key], q)

    scores = Matrix(nq, nk)
    for i, (q, qslot, qinst) in enumerate(queries):
        cache: dict = {}
        for j, (k, _v, kslot, kinst) in enumerate(keys_values):
            if not mask.allow[i * nk + j]:
                continue
            pkey = (kslot, kinst)
            if pkey not in cache:
                cache[pkey] = transported(q, qslot, qinst, kslot, kinst)
            u = cache[pkey]
            scores.put(i, j, dot(u, k) * scale + bias.get(qslot, kslot, head))

    outputs = []
    alphas = Matrix(nq, nk)
    for i, (q, qslot, qinst) in enumerate(queries):
        base = i * nk
        hi = -math.inf
        for j in range(nk):
            if mask.allow[base + j] and scores.data[base + j] > hi:
                hi = scores.data[base + j]
        if hi == -math.inf:
            raise AttentionError(
                f"query {i} (slot {qslot!r}, instance {qinst!r}) "
                f"has no unmasked keys")
        tot = 0.0
        for j in range(nk):
            if mask.allow[base + j]:
                w = math.exp(scores.data[base + j] - hi)
                alphas.data[base + j] = w
                tot += w
        out = Vector(keys_values[0][1].dim)
        for j in range(nk):
            if mask.allow[base + j]:
                w = alphas.data[base + j] / tot
                alphas.data[base + j] = w
                v = keys_values[j][1]
                for c in range(out.dim):
                    out.data[c] += w * v.data[c]
        outputs.append(out)

    if capture is not None:
        capture["scores"] = scores
        capture["alphas"] = alphas
    return outputs
