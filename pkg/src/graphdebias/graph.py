"""Attributed-graph container, attribute-combination grouping, and example splits.

File formats
------------
Edge list: one undirected edge per line as two node identifiers separated by
whitespace or a comma; ``#``-prefixed lines are ignored.

Attribute table: CSV with header ``id,<name1>,...,<nameK>`` followed by one
row per node (identifier plus K category strings). ``#``-prefixed lines are
ignored. Node identifiers are densified to ``[0, N)`` in first-appearance
order of this file.

Binary snapshot (little-endian):
    magic   b"GDGR" + version byte 0x01
    u64     N, K, E_ordered
    per attribute: u32 name length + utf-8 name, u8 sensitive flag,
                   u32 value count, then per value u32 length + utf-8 bytes
                   (value order defines the integer codes)
    per node: u32 length + utf-8 original identifier
    i64[N+1]        CSR row pointers
    i64[E_ordered]  CSR column indices (strictly sorted per row)
    i32[N*K]        attribute codes, row-major
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

_MAGIC = b"GDGR"
_VERSION = 1


@dataclass(frozen=True)
class AttributeSchema:
    """Names, category dictionaries, and sensitivity flags for node attributes."""

    names: tuple[str, ...]
    value_names: tuple[tuple[str, ...], ...]  # per attribute, code -> category string
    sensitive_mask: tuple[bool, ...]

    def __post_init__(self):
        if not (len(self.names) == len(self.value_names) == len(self.sensitive_mask)):
            raise ValueError("schema fields must have one entry per attribute")

    @property
    def n_attributes(self) -> int:
        return len(self.names)

    @property
    def sensitive_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.sensitive_mask) if s)

    @property
    def nonsensitive_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.sensitive_mask) if not s)

    def value_code(self, attr: int, value: str) -> int:
        try:
            return self.value_names[attr].index(value)
        except ValueError:
            raise KeyError(
                f"unknown value {value!r} for attribute {self.names[attr]!r}"
            ) from None

    def attribute_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown attribute {name!r}") from None


@dataclass(frozen=True)
class AttributedGraph:
    """Undirected attributed graph in canonical CSR form.

    Neighbor lists are strictly sorted, symmetric, and free of self-loops and
    duplicates. Instances are immutable after construction and safe to share
    across threads.
    """

    indptr: np.ndarray  # (N+1,) int64
    indices: np.ndarray  # (E_ordered,) int64
    attributes: np.ndarray  # (N, K) int32
    schema: AttributeSchema
    node_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = self.n_nodes
        if not self.node_ids:
            object.__setattr__(self, "node_ids", tuple(str(i) for i in range(n)))
        if len(self.node_ids) != n:
            raise ValueError("node_ids length must equal node count")
        if self.attributes.shape != (n, self.schema.n_attributes):
            raise ValueError("attribute matrix shape mismatch")
        for i, values in enumerate(self.schema.value_names):
            col = self.attributes[:, i]
            if col.size and (col.min() < 0 or col.max() >= len(values)):
                raise ValueError(f"attribute {self.schema.names[i]!r} has out-of-range codes")
        self._validate_adjacency()

    def _validate_adjacency(self):
        indptr, indices = self.indptr, self.indices
        if indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValueError("malformed CSR row pointers")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("row pointers must be non-decreasing")
        n = self.n_nodes
        if len(indices) and (indices.min() < 0 or indices.max() >= n):
            raise ValueError("neighbor index out of range")
        row = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
        if np.any(row == indices):
            raise ValueError("self-loop in adjacency")
        # strictly sorted within each row => no duplicates
        inner = np.ones(len(indices), dtype=bool)
        if len(indices) > 1:
            inner[1:] = indices[1:] > indices[:-1]
            inner[indptr[1:-1]] = True
        if not inner.all():
            raise ValueError("neighbor lists must be strictly sorted")
        # symmetry: the multiset of (u,v) equals the multiset of (v,u)
        fwd = row * n + indices
        bwd = indices * n + row
        if not np.array_equal(np.sort(fwd), np.sort(bwd)):
            raise ValueError("adjacency is not symmetric")

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_attributes(self) -> int:
        return self.schema.n_attributes

    @property
    def n_edges_directed(self) -> int:
        return len(self.indices)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def directed_edges(self) -> np.ndarray:
        """All ordered edges as an (E_ordered, 2) array."""
        row = np.repeat(np.arange(self.n_nodes, dtype=np.int64), self.degrees)
        return np.column_stack([row, self.indices])

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        pos = np.searchsorted(nb, v)
        return pos < len(nb) and nb[pos] == v


def from_edge_list(
    edges: np.ndarray,
    attributes: np.ndarray,
    schema: AttributeSchema,
    node_ids: tuple[str, ...] = (),
) -> AttributedGraph:
    """Canonicalize a raw undirected edge array into an AttributedGraph.

    Self-loops and duplicate edges are dropped with a counted warning rather
    than rejected; real edge lists are dirty.
    """
    n = attributes.shape[0]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    self_mask = edges[:, 0] == edges[:, 1]
    n_self = int(self_mask.sum())
    edges = edges[~self_mask]
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    undirected = np.unique(np.column_stack([lo, hi]), axis=0)
    n_dup = len(edges) - len(undirected)
    if n_self or n_dup:
        logger.warning("dropped %d self-loop(s) and %d duplicate edge(s)", n_self, n_dup)
    both = np.concatenate([undirected, undirected[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, both[:, 0] + 1, 1)
    indptr = np.cumsum(indptr)
    return AttributedGraph(
        indptr=indptr,
        indices=both[:, 1].copy(),
        attributes=np.asarray(attributes, dtype=np.int32),
        schema=schema,
        node_ids=node_ids,
    )


def _data_lines(path) -> Iterable[str]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield line


def load_graph(edge_path, attr_path) -> AttributedGraph:
    """Load an attributed graph from an edge list and an attribute table.

    Node identifiers are densified to [0, N) in first-appearance order of the
    attribute file; the original identifiers are retained for report output.
    All attributes load as non-sensitive; use :func:`mark_sensitive` to flag
    the ones an experiment debiases.
    """
    rows = list(csv.reader(_data_lines(attr_path)))
    if not rows:
        raise ValueError(f"empty attribute file {attr_path}")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[0] != "id":
        raise ValueError("attribute header must be 'id,<name1>,...,<nameK>'")
    names = tuple(header[1:])
    k = len(names)
    node_ids: list[str] = []
    id_index: dict[str, int] = {}
    value_index: list[dict[str, int]] = [dict() for _ in range(k)]
    codes: list[list[int]] = []
    for row in rows[1:]:
        row = [c.strip() for c in row]
        if len(row) != k + 1:
            raise ValueError(f"ragged attribute row for id {row[0] if row else '?'!r}")
        node_id = row[0]
        if node_id in id_index:
            raise ValueError(f"duplicate node id {node_id!r} in attribute file")
        id_index[node_id] = len(node_ids)
        node_ids.append(node_id)
        node_codes = []
        for i, value in enumerate(row[1:]):
            node_codes.append(value_index[i].setdefault(value, len(value_index[i])))
        codes.append(node_codes)
    if not node_ids:
        raise ValueError("attribute file contains no node rows")

    edge_rows = []
    for line in _data_lines(edge_path):
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"malformed edge line: {line!r}")
        for p in parts:
            if p not in id_index:
                raise ValueError(f"edge file references unknown node id {p!r}")
        edge_rows.append((id_index[parts[0]], id_index[parts[1]]))
    if not edge_rows:
        raise ValueError(f"empty edge set in {edge_path}")

    schema = AttributeSchema(
        names=names,
        value_names=tuple(
            tuple(sorted(vi, key=vi.get)) for vi in value_index
        ),
        sensitive_mask=tuple(False for _ in range(k)),
    )
    return from_edge_list(
        np.array(edge_rows, dtype=np.int64),
        np.array(codes, dtype=np.int32),
        schema,
        node_ids=tuple(node_ids),
    )


def mark_sensitive(g: AttributedGraph, names: Iterable[str]) -> AttributedGraph:
    """Return a copy of ``g`` whose schema flags the given attributes as sensitive."""
    wanted = set(names)
    unknown = wanted - set(g.schema.names)
    if unknown:
        raise KeyError(f"unknown attribute name(s): {sorted(unknown)}")
    mask = tuple(name in wanted for name in g.schema.names)
    return replace(g, schema=replace(g.schema, sensitive_mask=mask))


# ---------------------------------------------------------------------------
# Binary snapshot
# ---------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_graph(g: AttributedGraph, path) -> None:
    parts = [_MAGIC, bytes([_VERSION])]
    parts.append(struct.pack("<QQQ", g.n_nodes, g.n_attributes, g.n_edges_directed))
    for name, values, sens in zip(
        g.schema.names, g.schema.value_names, g.schema.sensitive_mask
    ):
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", int(sens)))
        parts.append(struct.pack("<I", len(values)))
        for v in values:
            parts.append(_pack_str(v))
    for node_id in g.node_ids:
        parts.append(_pack_str(node_id))
    parts.append(g.indptr.astype("<i8").tobytes())
    parts.append(g.indices.astype("<i8").tobytes())
    parts.append(np.ascontiguousarray(g.attributes, dtype="<i4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        chunk = self.data[self.pos:self.pos + n]
        if len(chunk) != n:
            raise ValueError("truncated graph snapshot")
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_saved_graph(path) -> AttributedGraph:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != _MAGIC or r.take(1)[0] != _VERSION:
        raise ValueError(f"{path} is not a graph snapshot")
    n, k, e = r.unpack("<QQQ")
    names, value_names, mask = [], [], []
    for _ in range(k):
        names.append(r.string())
        mask.append(bool(r.take(1)[0]))
        (nv,) = r.unpack("<I")
        value_names.append(tuple(r.string() for _ in range(nv)))
    node_ids = tuple(r.string() for _ in range(n))
    indptr = np.frombuffer(r.take(8 * (n + 1)), dtype="<i8").astype(np.int64)
    indices = np.frombuffer(r.take(8 * e), dtype="<i8").astype(np.int64)
    attributes = np.frombuffer(r.take(4 * n * k), dtype="<i4").astype(np.int32)
    schema = AttributeSchema(tuple(names), tuple(value_names), tuple(mask))
    return AttributedGraph(
        indptr=indptr,
        indices=indices,
        attributes=attributes.reshape(n, k),
        schema=schema,
        node_ids=node_ids,
    )


# ---------------------------------------------------------------------------
# Attribute-combination grouping
# ---------------------------------------------------------------------------

class GroupIndex:
    """Ordered-pair statistics for attribute value combinations.

    The pair universe is all N^2 ordered node pairs including self-pairs;
    edges are counted once per direction. Keys concatenate the attribute
    codes of the pair's two endpoints, restricted to the non-sensitive
    attributes in ``nonsensitive`` mode. Pair counts come analytically from
    per-profile node counts; edge counts from one pass over directed edges.
    """

    def __init__(self, g: AttributedGraph, mode: str):
        if mode not in ("full", "nonsensitive"):
            raise ValueError(f"unknown group mode {mode!r}")
        self.mode = mode
        if mode == "full":
            attr_indices = tuple(range(g.n_attributes))
        else:
            attr_indices = g.schema.nonsensitive_indices
        self.attr_indices = attr_indices
        cols = g.attributes[:, list(attr_indices)] if attr_indices else np.zeros(
            (g.n_nodes, 0), dtype=np.int32
        )
        profiles, profile_of_node = np.unique(cols, axis=0, return_inverse=True)
        self.profiles = profiles
        self.profile_of_node = profile_of_node.astype(np.int64)
        self.profile_counts = np.bincount(self.profile_of_node, minlength=len(profiles))
        self._profile_index = {
            tuple(int(c) for c in profiles[p]): p for p in range(len(profiles))
        }
        p = len(profiles)
        self.pair_count_grid = np.outer(self.profile_counts, self.profile_counts).astype(np.int64)
        edges = g.directed_edges()
        eid = self.profile_of_node[edges[:, 0]] * p + self.profile_of_node[edges[:, 1]]
        self.edge_count_grid = np.bincount(eid, minlength=p * p).reshape(p, p).astype(np.int64)
        self.n_pairs_total = int(g.n_nodes) ** 2
        self.n_edges_total = g.n_edges_directed

    @property
    def n_profiles(self) -> int:
        return len(self.profiles)

    @property
    def n_keys(self) -> int:
        return self.n_profiles ** 2

    def key_of_pair(self, u: int, v: int) -> tuple[int, ...]:
        pu = self.profiles[self.profile_of_node[u]]
        pv = self.profiles[self.profile_of_node[v]]
        return tuple(int(c) for c in pu) + tuple(int(c) for c in pv)

    def pair_key_ids(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        """Dense key ids (profile(u) * P + profile(v)) for vectorized lookups."""
        return self.profile_of_node[us] * self.n_profiles + self.profile_of_node[vs]

    def _locate(self, key: tuple[int, ...]) -> tuple[int, int]:
        a = len(self.attr_indices)
        if len(key) != 2 * a:
            raise KeyError(f"key {key!r} has wrong arity for mode {self.mode!r}")
        try:
            return self._profile_index[tuple(key[:a])], self._profile_index[tuple(key[a:])]
        except KeyError:
            raise KeyError(f"key {key!r} not present in this graph") from None

    def keys(self) -> list[tuple[int, ...]]:
        out = []
        for p in range(self.n_profiles):
            tp = tuple(int(c) for c in self.profiles[p])
            for q in range(self.n_profiles):
                out.append(tp + tuple(int(c) for c in self.profiles[q]))
        return out

    def key_of_id(self, key_id: int) -> tuple[int, ...]:
        p, q = divmod(key_id, self.n_profiles)
        return tuple(int(c) for c in self.profiles[p]) + tuple(int(c) for c in self.profiles[q])

    def pair_count(self, key: tuple[int, ...]) -> int:
        p, q = self._locate(key)
        return int(self.pair_count_grid[p, q])

    def edge_count(self, key: tuple[int, ...]) -> int:
        p, q = self._locate(key)
        return int(self.edge_count_grid[p, q])

    def member_nodes(self, profile: tuple[int, ...]) -> np.ndarray:
        p = self._profile_index[tuple(profile)]
        return np.nonzero(self.profile_of_node == p)[0]


def build_group_index(g: AttributedGraph, mode: str) -> GroupIndex:
    return GroupIndex(g, mode)


# ---------------------------------------------------------------------------
# Train/test example splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeSplit:
    """Per-node positive/negative link-prediction examples, split train/test.

    Each row is (anchor node, partner node); every undirected edge appears as
    a positive for both endpoints.
    """

    train_pos: np.ndarray
    train_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray
    skipped_nodes: tuple[int, ...] = ()

    def counts(self) -> dict[str, int]:
        return {
            "train_pos": len(self.train_pos),
            "train_neg": len(self.train_neg),
            "test_pos": len(self.test_pos),
            "test_neg": len(self.test_neg),
        }


def _node_rng(seed: int, node: int, tag: int = 0) -> np.random.Generator:
    # Counter-style stream keyed by (master seed, tag, node id): reproducible
    # regardless of the order nodes are processed in.
    return np.random.default_rng(np.random.SeedSequence([seed, tag, node]))


def _sample_non_neighbors(
    g: AttributedGraph, u: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    n = g.n_nodes
    nbrs = g.neighbors(u)
    avail = n - 1 - len(nbrs)
    count = min(count, avail)
    if count <= 0:
        return np.empty(0, dtype=np.int64)
    if count * 3 >= avail:
        # dense case: enumerate the pool and draw without replacement
        pool = np.ones(n, dtype=bool)
        pool[nbrs] = False
        pool[u] = False
        candidates = np.nonzero(pool)[0]
        return rng.choice(candidates, size=count, replace=False)
    # sparse case: rejection-sample distinct non-neighbors
    chosen: list[int] = []
    seen: set[int] = set()
    forbidden = set(int(x) for x in nbrs)
    forbidden.add(u)
    while len(chosen) < count:
        batch = rng.integers(0, n, size=2 * (count - len(chosen)) + 8)
        for x in batch:
            x = int(x)
            if x in forbidden or x in seen:
                continue
            seen.add(x)
            chosen.append(x)
            if len(chosen) == count:
                break
    return np.array(chosen, dtype=np.int64)


def split_edges(
    g: AttributedGraph, train_frac: float, neg_ratio: int, seed: int
) -> EdgeSplit:
    """Build per-node positive and negative examples and split them train/test.

    Positives are a node's neighbors; negatives are ``neg_ratio`` times as
    many uniformly sampled non-neighbors. Each node's examples are shuffled
    and cut at ``train_frac`` with a per-node seeded stream, so the split is
    reproducible regardless of processing order.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")
    if neg_ratio < 1:
        raise ValueError("neg_ratio must be >= 1")
    n = g.n_nodes
    tr_pos, te_pos, tr_neg, te_neg = [], [], [], []
    skipped = []
    for u in range(n):
        nbrs = g.neighbors(u)
        deg = len(nbrs)
        if deg == 0:
            continue
        if deg >= n - 1:
            skipped.append(u)
            continue
        rng = _node_rng(seed, u)
        negs = _sample_non_neighbors(g, u, neg_ratio * deg, rng)
        pos_order = rng.permutation(deg)
        neg_order = rng.permutation(len(negs))
        n_pos_train = int(train_frac * deg)
        n_neg_train = int(train_frac * len(negs))
        pos = nbrs[pos_order]
        neg = negs[neg_order]
        for dest, partners in (
            (tr_pos, pos[:n_pos_train]),
            (te_pos, pos[n_pos_train:]),
            (tr_neg, neg[:n_neg_train]),
            (te_neg, neg[n_neg_train:]),
        ):
            if len(partners):
                dest.append(np.column_stack([np.full(len(partners), u, dtype=np.int64), partners]))
    if skipped:
        logger.warning("skipped %d node(s) with no available negatives", len(skipped))

    def _stack(chunks):
        if not chunks:
            return np.empty((0, 2), dtype=np.int64)
        return np.concatenate(chunks, axis=0)

    return EdgeSplit(
        train_pos=_stack(tr_pos),
        train_neg=_stack(tr_neg),
        test_pos=_stack(te_pos),
        test_neg=_stack(te_neg),
        skipped_nodes=tuple(skipped),
    )
