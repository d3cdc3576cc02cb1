"""Knowledge-graph embeddings as an unrolled message-passing model.

Node embeddings are ``L`` gradient steps of the :class:`KgeBce` energy on
the negative graph, started from a fixed random ``H0``; only the relation
embeddings ``E`` are trained.  Unseen nodes are embedded by running the
same steps on their incident edges with ``E`` frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bilevel import DIVERGENCE, OuterAdam, TrainingDiverged, backtracking_gd
from .descent import DescentAlgorithm, HiddenState, step
from .energy import EnergyError, KgeBce, NbfBilinear, eval_energy, smooth_gradient
from .graph import HeteroGraph, Triplet, build_graph
from .prox import Identity, ProxOperator

MAX_RETRIES = 1000


class KgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class NegativeGraph:
    """Positive and sampled negative triplets in one graph.

    Negative triplets of relation ``r`` are stored with relation id
    ``num_rel + r``; both read embedding row ``r``.
    """

    graph: HeteroGraph
    num_rel: int
    positives: tuple
    negatives: tuple             # with original relation ids

    def polarity(self) -> np.ndarray:
        """+1 / -1 per stored edge of ``graph``."""
        orig = self.graph.rel % self.graph.m
        return np.where(orig < self.num_rel, 1, -1)


def build_negative_graph(g: HeteroGraph, k: int, seed: int = 0) -> NegativeGraph:
    """Sample ``k`` corrupted triplets per positive triplet.

    Each sample replaces the head (probability 1/2) or the tail by a
    uniform node, rejecting true triplets, self-loops and repeats.
    """
    if k < 1:
        raise KgeError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    pos = g.original_triplets()
    known = set(pos)
    chosen: set = set()
    negs = []
    for (u, r, v) in pos:
        for _ in range(k):
            for _attempt in range(MAX_RETRIES):
                w = int(rng.integers(g.n))
                cand = Triplet(w, r, v) if rng.random() < 0.5 else Triplet(u, r, w)
                if cand.src != cand.dst and cand not in known and cand not in chosen:
                    break
            else:
                raise KgeError(f"no negative found for {(u, r, v)} after {MAX_RETRIES} retries")
            chosen.add(cand)
            negs.append(cand)
    m = g.m
    union = list(pos) + [Triplet(a, r + m, b) for (a, r, b) in negs]
    G = build_graph(union, g.n, 2 * m)
    return NegativeGraph(G, m, tuple(pos), tuple(negs))


# ----------------------------------------------------------------------
# training

@dataclass
class KgeConfig:
    epochs: int = 50
    lr: float = 0.1
    optimizer: str = "gd"        # "gd" (backtracking) or "adam"
    L: int = 3
    gamma: float = 0.5           # inner step size
    dim: int = 8
    seed: int = 0
    init_scale: float = 0.5


@dataclass
class KgeModel:
    energy: KgeBce
    H0: np.ndarray
    E: np.ndarray
    L: int
    gamma: float

    def algo(self) -> DescentAlgorithm:
        return DescentAlgorithm("gd", self.gamma)


def kge_loss(model: KgeModel, neg: NegativeGraph, E=None):
    """``l_kge(H^(L)(E), E)``; returns a tape variable when ``E`` is one."""
    E = model.E if E is None else E
    P = {"E": E}
    H = model.H0
    S = HiddenState()
    for _ in range(model.L):
        H, S = step(model.algo(), model.energy, neg.graph, H, S, None, P)
    G = neg.graph
    keep = G.rel < G.m
    per_edge = model.energy.pair_loss(ad.gather(H, G.src[keep]), ad.gather(H, G.dst[keep]),
                                      G.rel[keep], P)
    return ad.sum(per_edge), H


def kge_loss_and_grad(model: KgeModel, neg: NegativeGraph, E=None):
    tape = ad.Tape()
    Ev = tape.leaf(model.E if E is None else E, name="E")
    loss, H = kge_loss(model, neg, Ev)
    tape.backward(loss)
    grad = np.zeros_like(Ev.value) if Ev.grad is None else Ev.grad
    return float(ad.value(loss)), grad, np.asarray(ad.value(H))


@dataclass
class KgeTrainResult:
    model: KgeModel
    history: list = field(default_factory=list)


def init_kge(neg: NegativeGraph, score: str, cfg: KgeConfig) -> KgeModel:
    rng = np.random.default_rng(cfg.seed)
    H0 = rng.normal(scale=cfg.init_scale, size=(neg.graph.n, cfg.dim))
    E = rng.normal(scale=cfg.init_scale, size=(neg.num_rel, cfg.dim))
    if score == "distmult":
        E = np.abs(E) + 0.5
    return KgeModel(KgeBce(neg.num_rel, score), H0, E, cfg.L, cfg.gamma)


def train_kge(neg: NegativeGraph, score: str = "distmult", cfg: KgeConfig = KgeConfig(),
              model: KgeModel | None = None) -> KgeTrainResult:
    """Fit relation embeddings; ``history`` holds the loss before each epoch."""
    model = model or init_kge(neg, score, cfg)
    opt = OuterAdam(cfg.lr) if cfg.optimizer == "adam" else None
    E = model.E
    history = []

    def objective(p):
        return kge_loss_and_grad(model, neg, p["E"])[0]

    for epoch in range(cfg.epochs):
        loss, grad, _ = kge_loss_and_grad(model, neg, E)
        history.append(loss)
        if not np.isfinite(loss) or loss > DIVERGENCE:
            raise TrainingDiverged(f"epoch {epoch}: loss {loss:.3e}", history)
        if opt is not None:
            E = opt.update({"E": E}, {"E": grad})["E"]
        else:
            E = backtracking_gd({"E": E}, {"E": grad}, loss, objective, cfg.lr, strict=True)[0]["E"]
    model = KgeModel(model.energy, model.H0, E, model.L, model.gamma)
    return KgeTrainResult(model, history)


def embed(model: KgeModel, neg: NegativeGraph) -> np.ndarray:
    """``H^(L)`` for the training graph."""
    return kge_loss_and_grad(model, neg)[2]


# ----------------------------------------------------------------------
# inductive inference

@dataclass
class InductiveResult:
    H: np.ndarray               # all node embeddings (old rows untouched)
    new_nodes: np.ndarray
    isolated: np.ndarray        # new nodes without incident support edges
    energies: list              # restricted energy after each step
    ranks: list                 # (query, gold_rank, hit) triples
    hits: float


def _restricted_step(energy, g, H, E, gamma, new_mask):
    grad = np.asarray(ad.value(smooth_gradient(energy, g, H, None, {"E": E})))
    grad[~new_mask] = 0.0
    return H - gamma * grad


def inductive_infer(H_known: np.ndarray, E: np.ndarray, num_rel: int, new_nodes,
                    support, queries, L: int = 3, gamma: float = 0.5, k: int = 10,
                    score: str = "distmult", known_triplets=(), backtrack: bool = True
                    ) -> InductiveResult:
    """Embed unseen nodes from their support edges, then rank query tails.

    ``H_known`` holds rows for every node id; rows of ``new_nodes`` are
    overwritten with zeros before inference.  Only new rows move.  Ranks
    are filtered (other known true tails are skipped) and pessimistic
    (ties count against the gold tail).
    """
    H = np.array(H_known, dtype=np.float64, copy=True)
    n = H.shape[0]
    new_nodes = np.asarray(new_nodes, dtype=np.int64)
    new_mask = np.zeros(n, dtype=bool)
    new_mask[new_nodes] = True
    H[new_mask] = 0.0
    incident = [t for t in support if new_mask[t[0]] or new_mask[t[2]]]
    touched = np.zeros(n, dtype=bool)
    for u, _, v in incident:
        touched[u] = touched[v] = True
    isolated = new_nodes[~touched[new_nodes]]
    energy = KgeBce(num_rel, score)
    g = build_graph(incident, n, 2 * num_rel)
    P = {"E": E}
    energies = [eval_energy(energy, g, H, None, P)]
    for _ in range(L):
        gam = gamma
        for _ in range(41 if backtrack else 1):
            H2 = _restricted_step(energy, g, H, E, gam, new_mask)
            E2 = eval_energy(energy, g, H2, None, P)
            if not backtrack or E2 <= energies[-1]:
                break
            gam /= 2
        else:
            H2, E2 = H, energies[-1]
        H = H2
        energies.append(E2)
    truth = set(map(tuple, known_triplets)) | set(map(tuple, support)) | set(map(tuple, queries))
    ranks = []
    for (u, r, v) in queries:
        s = all_tail_scores(H, E, u, r, score)
        others = np.array([t for t in range(n) if t != v and (u, r, t) not in truth], dtype=np.int64)
        better = np.count_nonzero(s[others] >= s[v])
        rank = 1 + int(better)
        ranks.append(((int(u), int(r), int(v)), rank, rank <= k))
    hits = float(np.mean([h for _, _, h in ranks])) if ranks else float("nan")
    return InductiveResult(H, new_nodes, isolated, energies, ranks, hits)


def all_tail_scores(H, E, u, r, score="distmult") -> np.ndarray:
    if score == "distmult":
        return (H[u] * E[r]) @ H.T
    return -np.linalg.norm(H[u] + E[r] - H, axis=1)


def rankings_csv(ranks) -> str:
    lines = ["query,gold_rank,hits_at_k"]
    for (u, r, v), rank, hit in ranks:
        lines.append(f"{u}:{r}:{v},{rank},{int(hit)}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# query-conditioned bilinear propagation

@dataclass(frozen=True)
class ConditionalGraph:
    graph: HeteroGraph
    source: int
    q: np.ndarray

    def features(self) -> np.ndarray:
        q = np.asarray(self.q, dtype=np.float64)
        X = np.zeros((self.graph.n, q.shape[0]))
        X[self.source] = q
        return X


def nbf_params(rng, num_rel: int, d: int, phi_scale=0.3, psi_scale=0.3) -> dict:
    A = rng.normal(size=(d, d))
    B = rng.normal(size=(d, d))
    return {"Phi": phi_scale * (A + A.T) / 2, "Psi": psi_scale * (B + B.T) / 2,
            "W_rel": rng.normal(scale=0.5, size=(2 * num_rel * d, d)),
            "b_rel": rng.normal(scale=0.5, size=(2 * num_rel, d)),
            "q": rng.normal(size=d)}


def _check_symmetric(params):
    for key in ("Phi", "Psi"):
        M = np.asarray(params[key])
        if not np.array_equal(M, M.T):
            raise EnergyError(f"{key} must be symmetric")


def nbf_unroll(cg: ConditionalGraph, params: dict, L: int, prox: ProxOperator = Identity(),
               H0: np.ndarray | None = None) -> np.ndarray:
    """``h' = prox(Phi (a + x) + Psi h)`` with ``a_v = sum of (h_u + e_r)`` over in-edges."""
    _check_symmetric(params)
    g = cg.graph
    m = g.m
    d = params["Phi"].shape[0]
    e = (params["W_rel"] @ params["q"]).reshape(2 * m, d) + params["b_rel"]
    X = cg.features()
    H = X.copy() if H0 is None else np.array(H0, dtype=np.float64)
    for _ in range(L):
        msgs = H[g.src] + e[g.rel]
        a = np.zeros_like(H)
        np.add.at(a, g.dst, msgs)
        H = prox.apply((a + X) @ params["Phi"] + H @ params["Psi"])
    return H


def nbf_as_energy(num_rel: int, params: dict) -> NbfBilinear:
    """The energy whose unit-step gradient descent reproduces :func:`nbf_unroll`."""
    d = params["Phi"].shape[0]
    P = dict(params)
    P["Phi"] = -params["Phi"]
    P["Psi"] = np.eye(d) - params["Psi"]
    return NbfBilinear(num_rel, P)

