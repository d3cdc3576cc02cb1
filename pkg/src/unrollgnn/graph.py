"""Immutable typed-edge graphs with destination-indexed neighborhoods.

Edges are stored once per (src, rel, dst) triplet, sorted by (dst, src, rel).
That order fixes the summation order of every per-node aggregation, so
message passing over a given graph is bit-deterministic.

With ``augment_inverse=True`` every original triplet ``(u, r, v)`` with
``r < m`` gets a partner ``(v, r + m, u)``.  A homogeneous undirected graph
is the ``m = 1`` case: one original triplet per undirected edge, plus its
inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for malformed graph input."""


class Triplet(NamedTuple):
    src: int
    rel: int
    dst: int


class HeteroGraph:
    """A typed-edge graph with CSR-style in-edge lists.

    Attributes
    ----------
    n : int
        Number of nodes.
    m : int
        Number of original relation types.  Relation ids ``>= m`` are
        inverse relations (only present if ``inverse_augmented``).
    src, rel, dst : ndarray of int64
        Stored edges, sorted ascending by (dst, src, rel).
    indptr : ndarray of int64
        ``in_edges(v)`` occupies ``src[indptr[v]:indptr[v+1]]``.
    """

    __slots__ = ("n", "m", "inverse_augmented", "allow_self_loops",
                 "src", "rel", "dst", "indptr")

    def __init__(self, n, m, src, rel, dst, inverse_augmented, allow_self_loops=False):
        order = np.lexsort((rel, src, dst))
        self.n = int(n)
        self.m = int(m)
        self.inverse_augmented = bool(inverse_augmented)
        self.allow_self_loops = bool(allow_self_loops)
        self.src = np.ascontiguousarray(src[order], dtype=np.int64)
        self.rel = np.ascontiguousarray(rel[order], dtype=np.int64)
        self.dst = np.ascontiguousarray(dst[order], dtype=np.int64)
        counts = np.bincount(self.dst, minlength=self.n)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        for arr in (self.src, self.rel, self.dst, self.indptr):
            arr.setflags(write=False)

    def __setattr__(self, name, value):
        if hasattr(self, "indptr"):
            raise AttributeError("HeteroGraph is immutable")
        object.__setattr__(self, name, value)

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def num_relations(self) -> int:
        """Relation ids in use, inverse ids included."""
        return 2 * self.m if self.inverse_augmented else self.m

    def in_edges(self, v: int) -> list[tuple[int, int]]:
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return list(zip(self.src[lo:hi].tolist(), self.rel[lo:hi].tolist()))

    def neighbors(self, v: int) -> set[int]:
        """Nodes sending a message to ``v``."""
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return set(self.src[lo:hi].tolist())

    def forward_mask(self) -> np.ndarray:
        return self.rel < self.m

    def original_triplets(self) -> list[Triplet]:
        keep = self.rel < self.m
        return [Triplet(int(u), int(r), int(v))
                for u, r, v in zip(self.src[keep], self.rel[keep], self.dst[keep])]

    def triplets(self) -> list[Triplet]:
        return [Triplet(int(u), int(r), int(v))
                for u, r, v in zip(self.src, self.rel, self.dst)]

    def degree(self) -> np.ndarray:
        """Number of stored in-edges per node (undirected degree when augmented)."""
        return np.diff(self.indptr)

    def same_structure(self, other: "HeteroGraph") -> bool:
        return (self.n == other.n and self.m == other.m
                and self.inverse_augmented == other.inverse_augmented
                and np.array_equal(self.src, other.src)
                and np.array_equal(self.rel, other.rel)
                and np.array_equal(self.dst, other.dst))

    def __repr__(self) -> str:
        return (f"HeteroGraph(n={self.n}, m={self.m}, edges={self.num_edges}, "
                f"inverse_augmented={self.inverse_augmented})")


def build_graph(triplets: Iterable[Sequence[int]], n: int, m: int,
                augment_inverse: bool = True, allow_self_loops: bool = False) -> HeteroGraph:
    """Validate, deduplicate and index a triplet list.

    Input relation ids must be original ids (``< m``); inverse ids are
    generated here.
    """
    if n < 0 or m < 1:
        raise GraphError(f"need n >= 0 and m >= 1, got n={n}, m={m}")
    seen = set()
    for t in triplets:
        u, r, v = (int(x) for x in t)
        if not (0 <= u < n and 0 <= v < n and 0 <= r < m):
            raise GraphError(f"triplet {(u, r, v)} out of range for n={n}, m={m}")
        if u == v and not allow_self_loops:
            raise GraphError(f"self-loop {(u, r, v)} not permitted")
        seen.add((u, r, v))
    if augment_inverse:
        seen |= {(v, r + m, u) for (u, r, v) in list(seen)}
    if seen:
        arr = np.array(sorted(seen), dtype=np.int64)
        src, rel, dst = arr[:, 0], arr[:, 1], arr[:, 2]
    else:
        src = rel = dst = np.zeros(0, dtype=np.int64)
    return HeteroGraph(n, m, src, rel, dst, augment_inverse, allow_self_loops)


def undirected_pairs(triplets: Iterable[Sequence[int]]) -> list[Triplet]:
    """Collapse a homogeneous edge list to one triplet per unordered pair.

    Self-loops are dropped.  Used when a file lists both directions of each
    edge, which would otherwise count every edge twice in the energy.
    """
    pairs = set()
    for u, _, v in triplets:
        u, v = int(u), int(v)
        if u != v:
            pairs.add((min(u, v), max(u, v)))
    return [Triplet(u, 0, v) for u, v in sorted(pairs)]


def adjacency(g: HeteroGraph) -> sp.csr_matrix:
    """Symmetric adjacency of a homogeneous graph, counting original triplets."""
    if g.m != 1:
        raise GraphError(f"adjacency is defined for homogeneous graphs only (m={g.m})")
    keep = g.rel < g.m
    u, v = g.src[keep], g.dst[keep]
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    data = np.ones(rows.shape[0], dtype=np.float64)
    return sp.csr_matrix((data, (rows, cols)), shape=(g.n, g.n))


def laplacian(g: HeteroGraph) -> sp.csr_matrix:
    """``L = D - A`` for a homogeneous graph treated as undirected."""
    A = adjacency(g)
    deg = np.asarray(A.sum(axis=1)).ravel()
    return (sp.diags(deg) - A).tocsr()


@dataclass(frozen=True)
class Permutation:
    """Node relabeling: old node ``v`` becomes ``perm[v]``."""

    perm: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(p.shape[0])):
            raise GraphError("permutation must be a bijection on 0..n-1")
        p.setflags(write=False)
        object.__setattr__(self, "perm", p)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "Permutation":
        return cls(rng.permutation(n))

    def __len__(self) -> int:
        return self.perm.shape[0]

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.shape[0])
        return Permutation(inv)

    def compose(self, other: "Permutation") -> "Permutation":
        """Apply ``other`` first, then ``self``."""
        return Permutation(self.perm[other.perm])

    def rows(self, A: np.ndarray) -> np.ndarray:
        """Move row ``v`` of ``A`` to row ``perm[v]``."""
        out = np.empty_like(A)
        out[self.perm] = A
        return out


def permute(g: HeteroGraph, H: np.ndarray | None, p: Permutation):
    """Relabel nodes of ``g`` and rows of ``H`` by ``p``."""
    if len(p) != g.n:
        raise GraphError(f"permutation of size {len(p)} for graph with n={g.n}")
    keep = g.rel < g.m
    P = p.perm
    trip = zip(P[g.src[keep]], g.rel[keep], P[g.dst[keep]])
    g2 = build_graph(trip, g.n, g.m, augment_inverse=g.inverse_augmented,
                     allow_self_loops=g.allow_self_loops)
    H2 = None if H is None else p.rows(np.asarray(H))
    return g2, H2


# ----------------------------------------------------------------------
# node data

@dataclass(frozen=True)
class LabelSet:
    """Class id per node; ``-1`` marks an unobserved node."""

    labels: np.ndarray
    num_classes: int

    @property
    def mask(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def restrict(self, keep: np.ndarray) -> "LabelSet":
        """Hide labels outside the boolean mask ``keep``."""
        lab = np.where(keep, self.labels, -1)
        return LabelSet(lab, self.num_classes)

    def masked_onehot(self) -> np.ndarray:
        """Dense n x c one-hot, zero rows on unobserved nodes."""
        Y = np.zeros((self.n, self.num_classes))
        obs = np.flatnonzero(self.mask)
        Y[obs, self.labels[obs]] = 1.0
        return Y


def labels_from_onehot(Ybar: np.ndarray) -> LabelSet:
    Ybar = np.asarray(Ybar, dtype=np.float64)
    observed = Ybar.sum(axis=1) != 0
    lab = np.where(observed, Ybar.argmax(axis=1), -1)
    return LabelSet(lab.astype(np.int64), Ybar.shape[1])


# ----------------------------------------------------------------------
# file formats

def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            yield lineno, s


def read_triplets(path) -> list[Triplet]:
    """Read ``src<TAB>rel<TAB>dst`` lines; ``#`` lines are comments."""
    path = Path(path)
    out = []
    for lineno, s in _data_lines(path):
        parts = s.split("\t")
        try:
            if len(parts) != 3:
                raise ValueError("expected 3 tab-separated fields")
            u, r, v = (int(x) for x in parts)
            if min(u, r, v) < 0:
                raise ValueError("negative id")
        except ValueError as exc:
            raise GraphError(f"{path}:{lineno}: {exc}") from None
        out.append(Triplet(u, r, v))
    return out


def write_triplets(path, triplets: Iterable[Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, r, v in triplets:
            fh.write(f"{int(u)}\t{int(r)}\t{int(v)}\n")


def read_features(path) -> np.ndarray:
    path = Path(path)
    rows = []
    for lineno, s in _data_lines(path):
        try:
            rows.append([float(x) for x in s.split(",")])
        except ValueError as exc:
            raise GraphError(f"{path}:{lineno}: {exc}") from None
        if rows and len(rows[-1]) != len(rows[0]):
            raise GraphError(f"{path}:{lineno}: expected {len(rows[0])} columns")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def read_labels(path, n: int, num_classes: int | None = None) -> LabelSet:
    """Read ``node_id,class_id`` lines; absent nodes are unobserved."""
    path = Path(path)
    lab = np.full(n, -1, dtype=np.int64)
    for lineno, s in _data_lines(path):
        try:
            v, c = (int(x) for x in s.split(","))
        except ValueError as exc:
            raise GraphError(f"{path}:{lineno}: {exc}") from None
        if not 0 <= v < n:
            raise GraphError(f"{path}:{lineno}: node {v} out of range for n={n}")
        if c < 0:
            raise GraphError(f"{path}:{lineno}: negative class id")
        if lab[v] >= 0:
            raise GraphError(f"{path}:{lineno}: duplicate label for node {v}")
        lab[v] = c
    if num_classes is None:
        num_classes = int(lab.max()) + 1 if (lab >= 0).any() else 0
    return LabelSet(lab, num_classes)
