"""Seeded synthetic graphs and datasets used by tests and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import HeteroGraph, LabelSet, Triplet, build_graph


def random_pairs(n: int, density: float, rng: np.random.Generator) -> list[Triplet]:
    """Each unordered pair becomes an edge with probability ``density``."""
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.shape[0]) < density
    return [Triplet(int(u), 0, int(v)) for u, v in zip(iu[keep], ju[keep])]


def random_graph(n: int, density: float, rng: np.random.Generator) -> HeteroGraph:
    """Homogeneous undirected random graph (``m = 1``, inverse-augmented)."""
    return build_graph(random_pairs(n, density, rng), n, 1)


def random_hetero_triplets(n: int, m: int, density: float,
                           rng: np.random.Generator) -> list[Triplet]:
    """Directed typed edges; each ordered pair gets at most one relation."""
    out = []
    for u in range(n):
        for v in range(n):
            if u != v and rng.random() < density:
                out.append(Triplet(u, int(rng.integers(m)), v))
    return out


@dataclass
class NodeDataset:
    graph: HeteroGraph
    X: np.ndarray
    labels: LabelSet           # all labels (ground truth)
    train: np.ndarray          # boolean masks
    val: np.ndarray
    test: np.ndarray

    @property
    def n(self) -> int:
        return self.graph.n


def _split_masks(n, train_frac, val_frac, rng):
    order = rng.permutation(n)
    n_tr = max(1, int(round(train_frac * n)))
    n_va = int(round(val_frac * n))
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    masks[0][order[:n_tr]] = True
    masks[1][order[n_tr:n_tr + n_va]] = True
    masks[2][order[n_tr + n_va:]] = True
    return masks


def two_cluster(n_per: int = 15, p_in: float = 0.5, p_out: float = 0.02, d_x: int = 4,
                noise: float = 0.3, train_frac: float = 0.5, val_frac: float = 0.2,
                seed: int = 0) -> NodeDataset:
    """Two dense clusters; features are the cluster mean plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per
    y = np.repeat([0, 1], n_per)
    trip = []
    for u in range(n):
        for v in range(u + 1, n):
            p = p_in if y[u] == y[v] else p_out
            if rng.random() < p:
                trip.append(Triplet(u, 0, v))
    means = rng.normal(size=(2, d_x))
    means *= 2.0 / np.linalg.norm(means[0] - means[1])
    X = means[y] + noise * rng.normal(size=(n, d_x))
    tr, va, te = _split_masks(n, train_frac, val_frac, rng)
    return NodeDataset(build_graph(trip, n, 1), X, LabelSet(y.astype(np.int64), 2), tr, va, te)


@dataclass
class CorruptedFeatures:
    graph: HeteroGraph
    X: np.ndarray              # corrupted features
    X_clean: np.ndarray
    corrupted: np.ndarray      # boolean truth mask


def planted_corruption(n: int = 60, d_x: int = 4, fraction: float = 0.2, amplitude: float = 10.0,
                       density: float = 0.15, seed: int = 0) -> CorruptedFeatures:
    """Smooth features on a clustered graph with a fraction of rows corrupted.

    Clean features have unit scale; corrupted rows get additive noise of
    ``amplitude`` times that scale.
    """
    rng = np.random.default_rng(seed)
    k = 3
    y = rng.integers(k, size=n)
    trip = []
    for u in range(n):
        for v in range(u + 1, n):
            p = density * (3.0 if y[u] == y[v] else 0.2)
            if rng.random() < p:
                trip.append(Triplet(u, 0, v))
    centers = rng.normal(size=(k, d_x))
    X_clean = centers[y] + 0.1 * rng.normal(size=(n, d_x))
    n_bad = int(round(fraction * n))
    bad = np.zeros(n, dtype=bool)
    bad[rng.choice(n, size=n_bad, replace=False)] = True
    X = X_clean.copy()
    X[bad] += amplitude * rng.normal(size=(n_bad, d_x))
    return CorruptedFeatures(build_graph(trip, n, 1), X, X_clean, bad)


@dataclass
class BlockKG:
    n: int
    num_rel: int
    blocks: np.ndarray         # block id per node
    triplets: list             # all true triplets
    train: list                # triplets among old nodes
    new_nodes: np.ndarray
    support: list              # observed triplets touching new nodes
    queries: list              # held-out triplets touching new nodes

    def train_graph(self) -> HeteroGraph:
        return build_graph(self.train, self.n, self.num_rel)


def block_kg(n: int = 50, num_rel: int = 4, num_blocks: int = 5, p: float = 0.3,
             n_new: int = 5, query_frac: float = 0.3, seed: int = 0) -> BlockKG:
    """Relation ``r`` links block ``b`` to block ``(b + r + 1) mod B``.

    The last ``n_new`` node ids are unseen during training.  Their incident
    triplets are split into observed support edges and held-out queries.
    """
    rng = np.random.default_rng(seed)
    blocks = np.arange(n) % num_blocks
    trip = []
    for r in range(num_rel):
        for u in range(n):
            for v in range(n):
                if u != v and blocks[v] == (blocks[u] + r + 1) % num_blocks and rng.random() < p:
                    trip.append(Triplet(u, r, v))
    new = np.arange(n - n_new, n)
    is_new = np.zeros(n, dtype=bool)
    is_new[new] = True
    train = [t for t in trip if not (is_new[t.src] or is_new[t.dst])]
    touching = [t for t in trip if is_new[t.src] or is_new[t.dst]]
    order = rng.permutation(len(touching))
    n_q = int(round(query_frac * len(touching)))
    queries = sorted(touching[i] for i in order[:n_q])
    support = sorted(touching[i] for i in order[n_q:])
    return BlockKG(n, num_rel, blocks, trip, train, new, support, queries)
