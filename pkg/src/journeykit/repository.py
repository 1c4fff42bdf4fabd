"""The separable key-value repository: encoding, retrieval, persistence.

Structured instances are encoded once into (key, value, slot, instance)
items that live outside the model. Exact retrieval ranks by inner product;
the approximate path adds an inverted-file index over k-means centroids so
queries probe a few lists instead of scanning everything. Snapshots are a
small self-contained binary format.
"""

from __future__ import annotations

import math
import random
import struct
from array import array
from dataclasses import dataclass

from ._binio import Reader, f64_bytes, pack_i64, pack_text
from .numerics import Matrix, Vector, matvec
from .operators import OperatorTable, realize_rotation
from .schema import StructuredInstance

MAGIC = b"JRKV0001"


class RepositoryError(ValueError):
    pass


@dataclass
class RepositoryItem:
    key: Vector
    value: Vector
    slot: str
    instance: str
    provenance: str = ""
    token_id: int = -1


class Repository:
    """Append-only store of items; freeze to attach the approximate index."""

    def __init__(self, dim: int, value_dim: int | None = None):
        self.dim = dim
        self.value_dim = dim if value_dim is None else value_dim
        self.items: list[RepositoryItem] = []
        self.frozen = False
        self.centroids: list[Vector] | None = None
        self.lists: list[list[int]] | None = None

    def add(self, items) -> None:
        if self.frozen:
            raise RepositoryError(
                "repository is frozen; build a new snapshot to add items")
        for item in items:
            if item.key.dim != self.dim or item.value.dim != self.value_dim:
                raise RepositoryError(
                    f"item dims ({item.key.dim}, {item.value.dim}) do not "
                    f"match repository ({self.dim}, {self.value_dim})")
            self.items.append(item)

    def __len__(self) -> int:
        return len(self.items)


def _embed(embeddings, token_id: int) -> Vector:
    if isinstance(embeddings, Matrix):
        if not 0 <= token_id < embeddings.rows:
            raise RepositoryError(f"token id {token_id} outside embedding table")
        return Vector(embeddings.cols, embeddings.row(token_id))
    if isinstance(embeddings, dict):
        if token_id not in embeddings:
            raise RepositoryError(f"token id {token_id} has no embedding")
        return embeddings[token_id]
    return embeddings(token_id)


def encode_instance(inst: StructuredInstance, embeddings, w_k: Matrix,
                    w_v: Matrix, table: OperatorTable,
                    head: int = 0) -> list:
    """One item per token: key = W_k (R_s x), value = W_v x.

    Tokens carrying a within-slot position compose the slot operator with
    a positional rotation at that index, preserving order inside the slot.
    """
    out = []
    for tok in inst.tokens:
        x = _embed(embeddings, tok.token_id)
        op = table.slot_op(tok.slot, head)
        rx = matvec(op.realized, x)
        if tok.within is not None:
            rx = matvec(realize_rotation(tok.within, table.pos_freqs).realized,
                        rx)
        out.append(RepositoryItem(
            key=matvec(w_k, rx),
            value=matvec(w_v, x),
            slot=tok.slot,
            instance=inst.instance_id,
            provenance=inst.provenance,
            token_id=tok.token_id))
    return out


def _score(q: Vector, k: Vector) -> float:
    acc = 0.0
    for a, b in zip(q.data, k.data):
        acc += a * b
    return acc


def query_exact(repo: Repository, q: Vector, top_k: int,
                filter=None) -> list:
    """Top-k items by inner product; ties broken by insertion order."""
    if top_k < 1:
        raise RepositoryError(f"top_k must be >= 1, got {top_k}")
    if q.dim != repo.dim:
        raise RepositoryError(f"query dim {q.dim} != repository dim {repo.dim}")
    scored = []
    for idx, item in enumerate(repo.items):
        if filter is not None and not filter(item.slot, item.instance,
                                             item.provenance):
            continue
        scored.append((-_score(q, item.key), idx))
    scored.sort()
    return [(repo.items[idx], -neg) for neg, idx in scored[:top_k]]


def _sq_dist(a: Vector, b: Vector) -> float:
    acc = 0.0
    for x, y in zip(a.data, b.data):
        d = x - y
        acc += d * d
    return acc


def _kmeans(keys: list, c: int, seed: int, iters: int = 25):
    """k-means++ init then Lloyd iterations; deterministic given the seed."""
    rng = random.Random(seed)
    n = len(keys)
    first = rng.randrange(n)
    centroids = [keys[first].copy()]
    d2 = [_sq_dist(k, centroids[0]) for k in keys]
    while len(centroids) < c:
        total = sum(d2)
        if total <= 0.0:
            # all remaining points coincide with a centroid; spread evenly
            centroids.append(keys[rng.randrange(n)].copy())
        else:
            r = rng.random() * total
            acc = 0.0
            pick = n - 1
            for i, w in enumerate(d2):
                acc += w
                if acc >= r:
                    pick = i
                    break
            centroids.append(keys[pick].copy())
        for i in range(n):
            d2[i] = min(d2[i], _sq_dist(keys[i], centroids[-1]))

    assign = [0] * n
    for _ in range(iters):
        for i, k in enumerate(keys):
            best, arg = math.inf, 0
            for ci, cen in enumerate(centroids):
                dist = _sq_dist(k, cen)
                if dist < best:
                    best, arg = dist, ci
            assign[i] = arg
        counts = [0] * c
        sums = [Vector(keys[0].dim) for _ in range(c)]
        for i, a in enumerate(assign):
            counts[a] += 1
            for t in range(keys[0].dim):
                sums[a].data[t] += keys[i].data[t]
        for ci in range(c):
            if counts[ci] == 0:
                # reseed an empty cluster at the point farthest from its centroid
                far, pick = -1.0, 0
                for i, k in enumerate(keys):
                    dist = _sq_dist(k, centroids[assign[i]])
                    if dist > far:
                        far, pick = dist, i
                centroids[ci] = keys[pick].copy()
                assign[pick] = ci
            else:
                for t in range(keys[0].dim):
                    sums[ci].data[t] /= counts[ci]
                centroids[ci] = sums[ci]
    for i, k in enumerate(keys):
        best, arg = math.inf, 0
        for ci, cen in enumerate(centroids):
            dist = _sq_dist(k, cen)
            if dist < best:
                best, arg = dist, ci
        assign[i] = arg
    return centroids, assign


def _augment(keys: list) -> list:
    """Lift keys onto a sphere: append sqrt(M^2 - |k|^2) with M = max |k|.

    Inner product against any query then orders identically to Euclidean
    distance from [q, 0] in the lifted space, so Euclidean k-means cells
    align with the inner-product retrieval objective.
    """
    sq = [sum(x * x for x in k.data) for k in keys]
    m2 = max(sq)
    out = []
    for k, s in zip(keys, sq):
        buf = array("d", k.data)
        buf.append(math.sqrt(max(0.0, m2 - s)))
        out.append(Vector(len(buf), buf))
    return out


def build_index(repo: Repository, centroids: int, seed: int = 0,
                assignments: int = 3) -> Repository:
    """Cluster norm-augmented keys, attach inverted lists, freeze the repo.

    Each item is filed under its `assignments` nearest centroids (capped at
    the centroid count). Replication trades list size for recall; 1 gives
    classic single-assignment IVF.
    """
    if not repo.items:
        raise RepositoryError("cannot index an empty repository")
    if centroids > len(repo.items):
        raise RepositoryError(
            f"{centroids} centroids for {len(repo.items)} items")
    if centroids < 1:
        raise RepositoryError("centroid count must be >= 1")
    if assignments < 1:
        raise RepositoryError("assignments must be >= 1")
    keys = _augment([item.key for item in repo.items])
    cents, _ = _kmeans(keys, centroids, seed)
    repl = min(assignments, centroids)
    lists: list[list[int]] = [[] for _ in range(centroids)]
    for idx, k in enumerate(keys):
        order = sorted(range(centroids),
                       key=lambda ci: (_sq_dist(k, cents[ci]), ci))
        for ci in order[:repl]:
            lists[ci].append(idx)
    repo.centroids = cents
    repo.lists = lists
    repo.frozen = True
    return repo


def query_approx(repo: Repository, q: Vector, top_k: int,
                 probes: int) -> list:
    """Scan the `probes` nearest inverted lists, rank as in query_exact.

    List order is Euclidean distance from the lifted query [q, 0] to the
    lifted centroids, which is exactly inner-product order on the keys.
    """
    if not repo.frozen or repo.centroids is None:
        raise RepositoryError("approximate query needs a frozen, indexed "
                              "repository")
    if probes < 1:
        raise RepositoryError(f"probes must be >= 1, got {probes}")
    if q.dim != repo.dim:
        raise RepositoryError(f"query dim {q.dim} != repository dim {repo.dim}")
    lifted = Vector(repo.dim + 1, array("d", list(q.data) + [0.0]))

    order = sorted(range(len(repo.centroids)),
                   key=lambda ci: (_sq_dist(lifted, repo.centroids[ci]), ci))
    seen = set()
    scored = []
    for ci in order[:probes]:
        for idx in repo.lists[ci]:
            if idx in seen:
                continue
            seen.add(idx)
            item = repo.items[idx]
            scored.append((-_score(q, item.key), idx))
    scored.sort()
    return [(repo.items[idx], -neg) for neg, idx in scored[:top_k]]


# ------------------------------------------------------------- persistence

def persist(repo: Repository, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        c = len(repo.centroids) if repo.centroids is not None else 0
        fh.write(struct.pack("<qqqqq", repo.dim, repo.value_dim,
                             len(repo.items), c, 1 if repo.frozen else 0))
        for item in repo.items:
            fh.write(f64_bytes(item.key.data))
            fh.write(f64_bytes(item.value.data))
            for text in (item.slot, item.instance, item.provenance):
                fh.write(pack_text(text))
            fh.write(pack_i64(item.token_id))
        if c:
            for cen in repo.centroids:
                fh.write(f64_bytes(cen.data))
            for lst in repo.lists:
                fh.write(pack_i64(len(lst)))
                fh.write(struct.pack(f"<{len(lst)}q", *lst))


def load(path) -> Repository:
    with open(path, "rb") as fh:
        r = Reader(fh, RepositoryError)
        magic = r.take(8)
        if magic != MAGIC:
            raise RepositoryError(
                f"unrecognized snapshot version: magic {magic!r}, "
                f"expected {MAGIC!r}")
        dim, value_dim, count, c, frozen = (r.i64() for _ in range(5))
        if dim < 1 or value_dim < 1 or count < 0 or c < 0:
            raise RepositoryError("corrupt snapshot header")
        repo = Repository(dim, value_dim)
        for _ in range(count):
            key = Vector(dim, r.f64s(dim))
            value = Vector(value_dim, r.f64s(value_dim))
            slot = r.text()
            instance = r.text()
            provenance = r.text()
            token_id = r.i64()
            repo.items.append(RepositoryItem(key, value, slot, instance,
                                             provenance, token_id))
        if c:
            repo.centroids = [Vector(dim + 1, r.f64s(dim + 1))
                              for _ in range(c)]
            repo.lists = []
            for _ in range(c):
                n = r.i64()
                if n < 0 or n > count:
                    raise RepositoryError(
                        f"corrupt inverted list length {n} at offset "
                        f"{r.offset - 8}")
                raw = r.take(8 * n)
                repo.lists.append(list(struct.unpack(f"<{n}q", raw)))
        repo.frozen = bool(frozen)
        r.expect_eof()
    return repo
