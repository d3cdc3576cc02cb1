"""Lower-level energies over node embeddings.

An energy is ``sum over original edges of f(h_u, h_v; r)`` plus
``sum over nodes of kappa(h_v; x_v)``.  The nonsmooth part ``eta`` is not
evaluated here; each energy only names it (``nonsmooth``) and the prox
module enforces it.

Pair and node potentials are written with :mod:`unrollgnn.autodiff` ops,
so the same code evaluates on plain arrays and on tape variables.  Every
pair method is batched: ``a`` and ``b`` are ``(E, d)`` row stacks and
``rel`` an ``(E,)`` array of original relation ids.

Messages follow the inverse-relation convention.  A stored edge
``(u, r, v)`` with ``r < m`` carries ``df/d(second arg)`` of ``f(h_u, h_v; r)``;
one with ``r >= m`` carries ``df/d(first arg)`` of ``f(h_v, h_u; r - m)``.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .graph import HeteroGraph

ParamSet = dict

ENERGY_NAMES = ("quadratic", "heterophily", "huber", "logcosh", "kge", "lp", "grmlp", "nbf")


class EnergyError(ValueError):
    pass


def _rowsum(x):
    """Row sums as an ``(E, 1)`` column."""
    s = ad.sum(x, axis=1)
    return ad.reshape(s, (ad.value(s).shape[0], 1))


def _huber_value(u):
    a = np.abs(u)
    return np.where(a < 1.0, 0.5 * u * u, a - 0.5)


def _logcosh_value(u):
    a = np.abs(u)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


class InputModel:
    """The node-wise input model ``pi(x; W)``.

    With no weights in the parameter set, ``pi`` is the identity.  ``pi_W``
    and ``pi_b`` give one affine map; adding ``pi_W2``/``pi_b2`` gives
    ``tanh(x W + b) W2 + b2``.
    """

    @staticmethod
    def apply(X, P: Mapping):
        if "pi_W" not in P:
            return X
        Z = ad.matmul(X, P["pi_W"])
        if "pi_b" in P:
            Z = Z + P["pi_b"]
        if "pi_W2" in P:
            Z = ad.matmul(ad.tanh(Z), P["pi_W2"])
            if "pi_b2" in P:
                Z = Z + P["pi_b2"]
        return Z

    @staticmethod
    def init(rng, d_in, d_out, hidden=None, scale=0.5) -> ParamSet:
        P = {"pi_W": rng.normal(scale=scale, size=(d_in, hidden or d_out)),
             "pi_b": rng.normal(scale=scale, size=(1, hidden or d_out))}
        if hidden:
            P["pi_W2"] = rng.normal(scale=scale, size=(hidden, d_out))
            P["pi_b2"] = rng.normal(scale=scale, size=(1, d_out))
        return P


def input_model(X, P):
    return InputModel.apply(X, P)


class EnergyFamily:
    """Base class.  Subclasses override the four potential methods."""

    name = "base"
    #: which prox realizes eta ("none", "nonneg", "clamp", "range", "unitnorm")
    nonsmooth = "none"

    def __init__(self, params: ParamSet | None = None, lam: float = 1.0):
        self.params = dict(params or {})
        if lam <= 0:
            raise EnergyError(f"lambda must be positive, got {lam}")
        self.lam = float(lam)

    # -- parameters ----------------------------------------------------
    def P(self, P=None) -> Mapping:
        return self.params if P is None else P

    def lam_of(self, P):
        """``lambda``, as ``softplus(lam_raw)`` when it is trainable."""
        if "lam_raw" in P:
            return ad.softplus(P["lam_raw"])
        return self.lam

    def with_params(self, P: ParamSet) -> "EnergyFamily":
        import copy
        e = copy.copy(self)
        e.params = dict(P)
        return e

    # -- potentials ----------------------------------------------------
    def pair_value(self, a, b, rel, P):
        raise NotImplementedError

    def pair_partials(self, a, b, rel, P):
        """``(df/da, df/db)`` for each row."""
        raise NotImplementedError

    def node_value(self, H, X, P) -> np.ndarray:
        return np.zeros(ad.value(H).shape[0])

    def node_grad(self, H, X, P):
        return ad.mul(H, 0.0)

    def check(self, g: HeteroGraph, H, X) -> None:
        H = ad.value(H)
        if H.ndim != 2 or H.shape[0] != g.n:
            raise EnergyError(f"H must be {g.n} x d, got shape {H.shape}")
        if X is not None and np.shape(ad.value(X))[0] != g.n:
            raise EnergyError(f"X must have {g.n} rows, got {np.shape(ad.value(X))[0]}")

    def __repr__(self):
        return f"{type(self).__name__}(lam={self.lam})"


# ----------------------------------------------------------------------
# homophilous smoothing with a fidelity term

class QuadraticSmooth(EnergyFamily):
    """``f = (lam/2)||a - b||^2``, ``kappa = 1/2 ||h - pi(x)||^2``."""

    name = "quadratic"

    def pair_value(self, a, b, rel, P):
        z = ad.value(a) - ad.value(b)
        return 0.5 * ad.value(self.lam_of(P)) * np.sum(z * z, axis=1)

    def pair_partials(self, a, b, rel, P):
        db = ad.mul(self.lam_of(P), ad.sub(b, a))
        return ad.neg(db), db

    def residual(self, H, X, P):
        return ad.sub(H, input_model(X, P))

    def node_value(self, H, X, P):
        u = ad.value(self.residual(H, X, P))
        return 0.5 * np.sum(u * u, axis=1)

    def node_grad(self, H, X, P):
        return self.residual(H, X, P)


class HuberFidelity(QuadraticSmooth):
    """Quadratic smoothing with ``kappa = delta(h - pi(x))`` (unit knee)."""

    name = "huber"

    def node_value(self, H, X, P):
        return np.sum(_huber_value(ad.value(self.residual(H, X, P))), axis=1)

    def node_grad(self, H, X, P):
        return ad.huber_grad(self.residual(H, X, P))


class LogCoshFidelity(QuadraticSmooth):
    """Quadratic smoothing with ``kappa = sum log cosh(h - pi(x))``."""

    name = "logcosh"

    def node_value(self, H, X, P):
        return np.sum(_logcosh_value(ad.value(self.residual(H, X, P))), axis=1)

    def node_grad(self, H, X, P):
        return ad.tanh(self.residual(H, X, P))


class HeterophilyLinear(QuadraticSmooth):
    """``f = (lam/2)||a C - b||^2`` with a quadratic or Huber fidelity.

    ``eta`` is the nonnegativity indicator.
    """

    name = "heterophily"
    nonsmooth = "nonneg"

    def __init__(self, params=None, lam=1.0, fidelity: str = "quadratic"):
        super().__init__(params, lam)
        if fidelity not in ("quadratic", "huber"):
            raise EnergyError(f"fidelity must be quadratic or huber, got {fidelity!r}")
        self.fidelity = fidelity

    def pair_value(self, a, b, rel, P):
        z = ad.value(a) @ ad.value(P["C"]) - ad.value(b)
        return 0.5 * ad.value(self.lam_of(P)) * np.sum(z * z, axis=1)

    def pair_partials(self, a, b, rel, P):
        C = P["C"]
        db = ad.mul(self.lam_of(P), ad.sub(b, ad.matmul(a, C)))
        da = ad.matmul(ad.neg(db), ad.transpose(C))
        return da, db

    def node_value(self, H, X, P):
        if self.fidelity == "huber":
            return HuberFidelity.node_value(self, H, X, P)
        return QuadraticSmooth.node_value(self, H, X, P)

    def node_grad(self, H, X, P):
        if self.fidelity == "huber":
            return HuberFidelity.node_grad(self, H, X, P)
        return QuadraticSmooth.node_grad(self, H, X, P)


class LpEnergy(QuadraticSmooth):
    """Label propagation: features are the masked labels, ``pi`` is the identity.

    ``eta`` clamps observed rows to their labels.
    """

    name = "lp"
    nonsmooth = "clamp"

    def __init__(self, lam=1.0):
        super().__init__({}, lam)


class GrMlpEnergy(LpEnergy):
    """Graph-regularized linear model viewed in embedding space.

    Same smooth terms as :class:`LpEnergy`; ``eta`` restricts H to the
    range of the (orthonormalized) feature matrix.
    """

    name = "grmlp"
    nonsmooth = "range"


# ----------------------------------------------------------------------
# knowledge-graph embeddings on a negative graph

class KgeBce(EnergyFamily):
    """Binary cross-entropy over a negative graph.

    The graph has ``2 * num_rel`` original relations: ids below ``num_rel``
    are positive triplets, ids ``num_rel + r`` are negatives of relation
    ``r``.  Both polarities read embedding row ``r`` of ``P["E"]``.
    Positive edges cost ``softplus(-s)``, negative edges ``softplus(s)``.
    """

    name = "kge"

    def __init__(self, num_rel: int, score: str = "distmult", params=None):
        super().__init__(params, 1.0)
        if score not in ("distmult", "transe"):
            raise EnergyError(f"unknown score {score!r}")
        self.num_rel = int(num_rel)
        self.score_name = score

    def _sign(self, rel):
        """+1 for positive relations, -1 for negative ones, as a column."""
        rel = np.asarray(rel)
        if rel.size and (rel.min() < 0 or rel.max() >= 2 * self.num_rel):
            raise EnergyError(f"relation id outside 0..{2 * self.num_rel - 1}")
        return np.where(rel < self.num_rel, 1.0, -1.0)[:, None]

    def emb(self, rel, P):
        return ad.gather(P["E"], np.asarray(rel) % self.num_rel)

    def score(self, a, b, rel, P):
        """Scores as an ``(E, 1)`` column."""
        e = self.emb(rel, P)
        if self.score_name == "distmult":
            return _rowsum(ad.mul(ad.mul(a, e), b))
        z = ad.sub(ad.add(a, e), b)
        return ad.neg(_rowsum(ad.mul(z, ad.normalize_rows(z))))

    def score_partials(self, a, b, rel, P):
        e = self.emb(rel, P)
        if self.score_name == "distmult":
            return ad.mul(e, b), ad.mul(a, e)
        n = ad.normalize_rows(ad.sub(ad.add(a, e), b))
        return ad.neg(n), n

    def pair_loss(self, a, b, rel, P):
        """Differentiable per-edge loss column."""
        sgn = self._sign(rel)
        return ad.softplus(ad.mul(-sgn, self.score(a, b, rel, P)))

    def pair_value(self, a, b, rel, P):
        return ad.value(self.pair_loss(a, b, rel, P))[:, 0]

    def pair_partials(self, a, b, rel, P):
        sgn = self._sign(rel)
        s = self.score(a, b, rel, P)
        # d softplus(-sgn s)/ds = -sgn * sigmoid(-sgn s) = sigmoid(s) - y
        coef = ad.mul(-sgn, ad.sigmoid(ad.mul(-sgn, s)))
        da, db = self.score_partials(a, b, rel, P)
        return ad.mul(coef, da), ad.mul(coef, db)

    def __repr__(self):
        return f"KgeBce(num_rel={self.num_rel}, score={self.score_name!r})"


def transe_score(h_u, e_r, h_v) -> float:
    return -float(np.linalg.norm(np.asarray(h_u) + np.asarray(e_r) - np.asarray(h_v)))


def distmult_score(h_u, e_r, h_v) -> float:
    return float(np.sum(np.asarray(h_u) * np.asarray(e_r) * np.asarray(h_v)))


# ----------------------------------------------------------------------
# conditional bilinear energy

class NbfBilinear(EnergyFamily):
    """Bilinear energy on a query-conditioned graph.

    ``f(a, b; r) = b'Phi a + b'Phi e_r + a'Phi e_{r+m}`` and
    ``kappa(h; x) = 1/2 ||Psi^{1/2} h + Psi^{-1/2} Phi x||^2``, with relation
    vectors ``e_r = W_r q + b_r``.  ``W_rel`` stacks the ``2m`` maps
    ``W_r`` (each ``d x d``) as a ``(2m*d, d)`` matrix.
    """

    name = "nbf"

    def __init__(self, num_rel: int, params: ParamSet, nonsmooth: str = "none"):
        super().__init__(params, 1.0)
        self.num_rel = int(num_rel)
        self.nonsmooth = nonsmooth
        for key in ("Phi", "Psi"):
            M = np.asarray(ad.value(self.params[key]))
            if not np.array_equal(M, M.T):
                raise EnergyError(f"{key} must be symmetric")
        d = np.asarray(ad.value(self.params["Phi"])).shape[0]
        if np.shape(ad.value(self.params["W_rel"])) != (2 * self.num_rel * d, d):
            raise EnergyError("W_rel must have shape (2m*d, d)")

    def relation_vectors(self, P):
        d = ad.value(P["Phi"]).shape[0]
        Wq = ad.matmul(P["W_rel"], P["q"])
        return ad.add(ad.reshape(Wq, (2 * self.num_rel, d)), P["b_rel"])

    def _e(self, rel, P):
        e = self.relation_vectors(P)
        rel = np.asarray(rel)
        return ad.gather(e, rel), ad.gather(e, rel + self.num_rel)

    def pair_value(self, a, b, rel, P):
        Phi = ad.value(P["Phi"])
        a, b = ad.value(a), ad.value(b)
        e_f, e_b = (ad.value(x) for x in self._e(rel, P))
        return (np.sum(b * (a @ Phi), axis=1) + np.sum(b * (e_f @ Phi), axis=1)
                + np.sum(a * (e_b @ Phi), axis=1))

    def pair_partials(self, a, b, rel, P):
        Phi = P["Phi"]
        e_f, e_b = self._e(rel, P)
        db = ad.matmul(ad.add(a, e_f), Phi)
        da = ad.matmul(ad.add(b, e_b), Phi)
        return da, db

    def node_value(self, H, X, P):
        H, X = ad.value(H), ad.value(X)
        Phi, Psi = ad.value(P["Phi"]), ad.value(P["Psi"])
        PX = X @ Phi
        const = 0.5 * np.sum(PX * (PX @ np.linalg.pinv(Psi)), axis=1)
        return 0.5 * np.sum(H * (H @ Psi), axis=1) + np.sum(H * PX, axis=1) + const

    def node_grad(self, H, X, P):
        return ad.add(ad.matmul(H, P["Psi"]), ad.matmul(X, P["Phi"]))

    def __repr__(self):
        return f"NbfBilinear(num_rel={self.num_rel})"


# ----------------------------------------------------------------------
# graph-level operations

def _endpoints(e: EnergyFamily, g: HeteroGraph):
    """For every stored edge: (first-arg node, second-arg node, original rel, is-forward)."""
    fwd = g.rel < g.m
    first = np.where(fwd, g.src, g.dst)
    second = np.where(fwd, g.dst, g.src)
    orig = np.where(fwd, g.rel, g.rel - g.m)
    return first, second, orig, fwd


def edge_messages(e: EnergyFamily, g: HeteroGraph, H, P=None):
    """Message phase: one row per stored edge, in stored order."""
    P = e.P(P)
    if not g.inverse_augmented:
        raise EnergyError("message passing needs an inverse-augmented graph")
    first, second, orig, fwd = _endpoints(e, g)
    d_first, d_second = e.pair_partials(ad.gather(H, first), ad.gather(H, second), orig, P)
    w = fwd.astype(np.float64)[:, None]
    return ad.add(ad.mul(w, d_second), ad.mul(1.0 - w, d_first))


def aggregate(g: HeteroGraph, messages):
    """Aggregation phase: sum of in-edge messages, in stored order."""
    return ad.scatter_sum(messages, g.dst, g.n)


def smooth_gradient(e: EnergyFamily, g: HeteroGraph, H, X, P=None):
    """``a + kappa'`` computed by message passing."""
    P = e.P(P)
    return ad.add(aggregate(g, edge_messages(e, g, H, P)), e.node_grad(H, X, P))


def eval_energy(e: EnergyFamily, g: HeteroGraph, H, X, P=None) -> float:
    """Smooth energy: pair terms over original edges plus node terms."""
    P = e.P(P)
    e.check(g, H, X)
    H = ad.value(H)
    keep = g.rel < g.m
    pair = e.pair_value(H[g.src[keep]], H[g.dst[keep]], g.rel[keep], P)
    node = e.node_value(H, X, P)
    return float(np.sum(pair) + np.sum(node))


def grad_pair_dst(e: EnergyFamily, h_u, h_v, r: int, m: int, P=None) -> np.ndarray:
    """The message sent along a single stored edge ``(u, r, v)``."""
    P = e.P(P)
    if not 0 <= r < 2 * m:
        raise EnergyError(f"relation {r} outside 0..{2 * m - 1}")
    h_u = np.asarray(h_u, dtype=np.float64)[None, :]
    h_v = np.asarray(h_v, dtype=np.float64)[None, :]
    if r < m:
        return np.asarray(ad.value(e.pair_partials(h_u, h_v, np.array([r]), P)[1]))[0]
    return np.asarray(ad.value(e.pair_partials(h_v, h_u, np.array([r - m]), P)[0]))[0]


def grad_node(e: EnergyFamily, h, x, P=None) -> np.ndarray:
    P = e.P(P)
    h = np.asarray(h, dtype=np.float64)[None, :]
    x = np.asarray(x, dtype=np.float64)[None, :]
    return np.asarray(ad.value(e.node_grad(h, x, P)))[0]


def full_gradient_dense(e: EnergyFamily, g: HeteroGraph, H, X, P=None) -> np.ndarray:
    """Reference gradient by direct differentiation of the energy.

    Walks the original triplets and adds both partials of each ``f`` to its
    two endpoints.  Does not use stored inverse edges or the message phase.
    """
    P = e.P(P)
    H = np.asarray(ad.value(H), dtype=np.float64)
    keep = g.rel < g.m
    u, r, v = g.src[keep], g.rel[keep], g.dst[keep]
    G = np.array(ad.value(e.node_grad(H, X, P)), dtype=np.float64, copy=True)
    if u.size:
        da, db = e.pair_partials(H[u], H[v], r, P)
        np.add.at(G, u, ad.value(da))
        np.add.at(G, v, ad.value(db))
    return G


# ----------------------------------------------------------------------
# constructors

def make_energy(name: str, **kw) -> EnergyFamily:
    """Build a built-in energy from its config name."""
    table = {
        "quadratic": QuadraticSmooth,
        "heterophily": HeterophilyLinear,
        "huber": HuberFidelity,
        "logcosh": LogCoshFidelity,
        "lp": LpEnergy,
        "grmlp": GrMlpEnergy,
        "kge": KgeBce,
        "nbf": NbfBilinear,
    }
    if name not in table:
        raise EnergyError(f"unknown energy {name!r}; expected one of {ENERGY_NAMES}")
    return table[name](**kw)
