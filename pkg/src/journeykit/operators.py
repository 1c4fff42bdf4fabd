"""Role operators, their inverses, and journey composition.

A role operator realizes one of three parameterizations as a dense d x d
matrix: block-diagonal 2x2 rotations, a positive diagonal, or a low-rank
update of the identity. Journeys transport a query's representation from
one role to another by composing operators with inverses, and positional
roles fall out as the special case of rotations indexed by position.
"""

from __future__ import annotations

import math
from array import array

from .numerics import Matrix, NumericsError, Vector, inverse, matmul, transpose

KAPPA = 10.0
_LOG_KAPPA = math.log(KAPPA)

# Low-rank update norms are capped so every singular value of I + U V^T
# stays within [1 - _LOW_RANK_BUDGET, 1 + _LOW_RANK_BUDGET], a subset of
# the [1/KAPPA, KAPPA] stability band.
_LOW_RANK_BUDGET = 0.8

POSITION_PREFIX = "POSITION_"

_KINDS = ("rotation", "diagonal", "low_rank")


class OperatorError(ValueError):
    pass


def rope_freqs(d: int, base: float = 10000.0):
    """The rotary frequency schedule: theta_m = base^(-2m/d) for m < d/2."""
    if d <= 0 or d % 2:
        raise OperatorError(f"rotation operators need positive even dim, got {d}")
    return array("d", (base ** (-2.0 * m / d) for m in range(d // 2)))


def position_index(slot_id) -> int | None:
    """Position k for virtual slots named POSITION_k, else None."""
    if isinstance(slot_id, str) and slot_id.startswith(POSITION_PREFIX):
        tail = slot_id[len(POSITION_PREFIX):]
        try:
            return int(tail)
        except ValueError:
            return None
    return None


class RoleOperator:
    """One realized role transport: R_s, R_e, or R_r."""

    __slots__ = ("dim", "param_kind", "params", "_realized")

    def __init__(self, dim: int, param_kind: str, params: dict):
        if param_kind not in _KINDS:
            raise OperatorError(f"unknown parameterization {param_kind!r}")
        if dim <= 0 or dim % 2:
            raise OperatorError(f"operator dim must be positive even, got {dim}")
        self.dim = dim
        self.param_kind = param_kind
        self.params = params
        self._realized = None

    # ------------------------------------------------------------- factories

    @classmethod
    def rotation(cls, freqs, step: float = 1.0) -> "RoleOperator":
        freqs = freqs if isinstance(freqs, array) else array("d", freqs)
        if any(not math.isfinite(f) for f in freqs):
            raise OperatorError("non-finite rotation frequency")
        return cls(2 * len(freqs), "rotation",
                   {"freqs": freqs, "step": float(step)})

    @classmethod
    def diagonal(cls, log_mags) -> "RoleOperator":
        vals = array("d", (min(_LOG_KAPPA, max(-_LOG_KAPPA, v))
                           for v in log_mags))
        return cls(len(vals), "diagonal", {"log_mags": vals})

    @classmethod
    def low_rank(cls, u: Matrix, v: Matrix, clamp: bool = True) -> "RoleOperator":
        if u.shape != v.shape:
            raise OperatorError(
                f"low-rank factors must share shape, got {u.shape} vs {v.shape}")
        if clamp:
            u = _clamped_factor(u, v)
        return cls(u.rows, "low_rank", {"u": u, "v": v})

    @classmethod
    def identity(cls, dim: int) -> "RoleOperator":
        return cls.rotation(array("d", bytes(8 * (dim // 2))), 0.0)

    # -------------------------------------------------------------- realize

    @property
    def realized(self) -> Matrix:
        if self._realized is None:
            self._realized = self._realize()
        return self._realized

    def _realize(self) -> Matrix:
        d = self.dim
        m = Matrix(d, d)
        if self.param_kind == "rotation":
            step = self.params["step"]
            for t, f in enumerate(self.params["freqs"]):
                a = f * step
                c, s = math.cos(a), math.sin(a)
                i = 2 * t
                m.put(i, i, c)
                m.put(i, i + 1, -s)
                m.put(i + 1, i, s)
                m.put(i + 1, i + 1, c)
            return m
        if self.param_kind == "diagonal":
            for i, v in enumerate(self.params["log_mags"]):
                m.put(i, i, math.exp(v))
            return m
        u, v = self.params["u"], self.params["v"]
        for i in range(d):
            m.put(i, i, 1.0)
        uvt = matmul(u, transpose(v))
        for i in range(d * d):
            m.data[i] += uvt.data[i]
        return m

    def angles(self):
        """Per-block rotation angles (rotation kind only)."""
        if self.param_kind != "rotation":
            raise OperatorError(f"angles undefined for {self.param_kind}")
        step = self.params["step"]
        return array("d", (f * step for f in self.params["freqs"]))


def _clamped_factor(u: Matrix, v: Matrix) -> Matrix:
    nu = math.sqrt(sum(x * x for x in u.data))
    nv = math.sqrt(sum(x * x for x in v.data))
    prod = nu * nv
    if prod <= _LOW_RANK_BUDGET:
        return u
    scale = _LOW_RANK_BUDGET / prod
    out = Matrix(u.rows, u.cols, array("d", (x * scale for x in u.data)))
    return out


def realize_rotation(step_index, freqs) -> RoleOperator:
    """Block-diagonal rotations R(theta_m * step_index), one 2x2 per pair."""
    return RoleOperator.rotation(freqs, float(step_index))


def invert(op: RoleOperator) -> RoleOperator:
    """Closed-form inverse per parameterization."""
    if op.param_kind == "rotation":
        return RoleOperator.rotation(op.params["freqs"], -op.params["step"])
    if op.param_kind == "diagonal":
        return RoleOperator.diagonal(
            array("d", (-v for v in op.params["log_mags"])))
    u, v = op.params["u"], op.params["v"]
    r = u.cols
    s = matmul(transpose(v), u)
    for i in range(r):
        s.data[i * r + i] += 1.0
    try:
        s_inv = inverse(s)
    except NumericsError as exc:
        raise OperatorError(
            f"low-rank operator not invertible (stability clamp violated): {exc}")
    u_star = matmul(u, s_inv)
    for i in range(len(u_star.data)):
        u_star.data[i] = -u_star.data[i]
    # Woodbury form: (I + U V^T)^{-1} = I + (-U S^{-1}) V^T; already stable,
    # so the clamp must not rescale it.
    return RoleOperator.low_rank(u_star, v, clamp=False)


class OperatorTable:
    """All role operators for one model: slots, relations, instances.

    When per_head is set every id maps to head_count operators; otherwise a
    single operator is shared (head index ignored on lookup). Positional
    slots POSITION_k are virtual: realized on demand from pos_freqs, never
    stored, so the table stays finite.
    """

    def __init__(self, dim: int, head_count: int = 1, per_head: bool = False,
                 pos_freqs=None):
        if head_count < 1:
            raise OperatorError(f"head_count must be >= 1, got {head_count}")
        self.dim = dim
        self.head_count = head_count
        self.per_head = per_head
        self.pos_freqs = (array("d", pos_freqs) if pos_freqs is not None
                          else rope_freqs(dim))
        self.slot_ops: dict = {}
        self.relation_ops: dict = {}
        self.instance_ops: dict = {}

    def _normalize(self, ops):
        if isinstance(ops, RoleOperator):
            ops = [ops]
        ops = list(ops)
        want = self.head_count if self.per_head else 1
        if len(ops) != want:
            raise OperatorError(
                f"expected {want} operator(s) per id, got {len(ops)}")
        for op in ops:
            if op.dim != self.dim:
                raise OperatorError(
                    f"operator dim {op.dim} != table dim {self.dim}")
        return tuple(ops)

    def add_slot(self, slot_id, ops) -> None:
        self.slot_ops[slot_id] = self._normalize(ops)

    def add_relation(self, relation_id, ops) -> None:
        self.relation_ops[relation_id] = self._normalize(ops)

    def add_instance(self, instance_id, ops) -> None:
        self.instance_ops[instance_id] = self._normalize(ops)

    def _pick(self, ops, head: int) -> RoleOperator:
        return ops[head] if self.per_head else ops[0]

    def slot_op(self, slot_id, head: int = 0) -> RoleOperator:
        ops = self.slot_ops.get(slot_id)
        if ops is not None:
            return self._pick(ops, head)
        k = position_index(slot_id)
        if k is not None:
            return realize_rotation(k, self.pos_freqs)
        raise OperatorError(f"unknown slot id {slot_id!r}")

    def relation_op(self, relation_id, head: int = 0) -> RoleOperator:
        ops = self.relation_ops.get(relation_id)
        if ops is None:
            raise OperatorError(f"unknown relation id {relation_id!r}")
        return self._pick(ops, head)

    def instance_op(self, instance_id, head: int = 0) -> RoleOperator:
        ops = self.instance_ops.get(instance_id)
        if ops is None:
            raise OperatorError(f"unknown instance id {instance_id!r}")
        return self._pick(ops, head)

    def has_slot(self, slot_id) -> bool:
        return slot_id in self.slot_ops or position_index(slot_id) is not None

    def slots(self):
        return sorted(self.slot_ops, key=str)


class Journey:
    """A composed transport matrix plus the path that built it."""

    __slots__ = ("matrix", "path")

    def __init__(self, matrix: Matrix, path):
        self.matrix = matrix
        self.path = tuple(path)


def _compose(steps, table: OperatorTable, head: int) -> Journey:
    """Ordered product of (kind, id, direction) steps."""
    lookup = {"slot": table.slot_op, "relation": table.relation_op,
              "instance": table.instance_op}
    mat = None
    for kind, op_id, direction in steps:
        op = lookup[kind](op_id, head)
        if direction == "inverse":
            op = invert(op)
        mat = op.realized if mat is None else matmul(mat, op.realized)
    return Journey(mat, steps)


def recompose(path, table: OperatorTable, head: int = 0) -> Matrix:
    """Recompute a journey's matrix from its recorded path (for audits)."""
    return _compose(list(path), table, head).matrix


def journey(a, b, table: OperatorTable, head: int = 0) -> Journey:
    """P_{a->b} = R_a R_b^{-1}: transport from role a into role b's frame."""
    return _compose([("slot", a, "forward"), ("slot", b, "inverse")],
                    table, head)


def instance_journey(s, e1, e2, s2, table: OperatorTable,
                     head: int = 0) -> Journey:
    """P = R_s R_e1 R_e2^{-1} R_s2^{-1}, crossing an instance boundary."""
    return _compose([("slot", s, "forward"), ("instance", e1, "forward"),
                     ("instance", e2, "inverse"), ("slot", s2, "inverse")],
                    table, head)


def cross_sentence_journey(i: int, e1, e2, j: int, table: OperatorTable,
                           head: int = 0) -> Journey:
    """P = R_i R_e1 R_e2^{-1} R_j^{-1} with positional rotations at i and j.

    For e1 = e2 the instance factors cancel and this reduces to the
    relative rotation R_{i-j}.
    """
    return _compose([("slot", f"{POSITION_PREFIX}{i}", "forward"),
                     ("instance", e1, "forward"),
                     ("instance", e2, "inverse"),
                     ("slot", f"{POSITION_PREFIX}{j}", "inverse")],
                    table, head)


def _pool(token_vectors, readout: str, score_row: Matrix | None) -> Vector:
    d = token_vectors[0].dim
    n = len(token_vectors)
    if readout == "mean_pool":
        out = Vector(d)
        for v in token_vectors:
            for i in range(d):
                out.data[i] += v.data[i]
        for i in range(d):
            out.data[i] /= n
        return out
    if readout != "attention_pool":
        raise OperatorError(f"unknown readout {readout!r}")
    if score_row is None:
        raise OperatorError("attention_pool needs a leading 1 x d score row")
    scores = [sum(score_row.data[i] * v.data[i] for i in range(d))
              for v in token_vectors]
    hi = max(scores)
    ws = [math.exp(s - hi) for s in scores]
    tot = sum(ws)
    out = Vector(d)
    for w, v in zip(ws, token_vectors):
        for i in range(d):
            out.data[i] += (w / tot) * v.data[i]
    return out


def derive_instance_operator(token_vectors, readout: str, projector,
                             kind: str = "rotation",
                             rank: int = 2) -> RoleOperator:
    """Pool token vectors, project twice with tanh between, build an operator.

    projector is a flat stack of matrices: [score_row]? then W1 (d x h),
    b1 (1 x h), W2 (h x p), b2 (1 x p), where p is the parameter count of
    the requested kind. The kind's stability clamp is applied last.
    """
    if not token_vectors:
        raise OperatorError("cannot derive an operator from zero tokens")
    stack = list(projector)
    score_row = stack.pop(0) if readout == "attention_pool" else None
    if len(stack) != 4:
        raise OperatorError(
            f"projector needs W1, b1, W2, b2, got {len(stack)} matrices")
    w1, b1, w2, b2 = stack
    pooled = _pool(token_vectors, readout, score_row)
    d = pooled.dim

    h1 = matmul(pooled.as_row(), w1)
    for i in range(h1.cols):
        h1.data[i] = math.tanh(h1.data[i] + b1.data[i])
    out = matmul(h1, w2)
    params = array("d", (out.data[i] + b2.data[i] for i in range(out.cols)))

    if kind == "rotation":
        if len(params) != d // 2:
            raise OperatorError(
                f"rotation needs {d // 2} parameters, projector gave {len(params)}")
        return RoleOperator.rotation(params, 1.0)
    if kind == "diagonal":
        if len(params) != d:
            raise OperatorError(
                f"diagonal needs {d} parameters, projector gave {len(params)}")
        return RoleOperator.diagonal(params)
    if kind == "low_rank":
        if len(params) != 2 * d * rank:
            raise OperatorError(
                f"low_rank rank {rank} needs {2 * d * rank} parameters, "
                f"projector gave {len(params)}")
        u = Matrix(d, rank, params[:d * rank])
        v = Matrix(d, rank, params[d * rank:])
        return RoleOperator.low_rank(u, v)
    raise OperatorError(f"unknown parameterization {kind!r}")
