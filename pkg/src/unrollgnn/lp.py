"""Label propagation and graph-regularized linear models.

Both are proximal descent on the same smooth energy
``(lam/2) sum_edges ||h_u - h_v||^2 + 1/2 sum_v ||h_v - ybar_v||^2``;
label propagation clamps observed rows, the graph-regularized model
projects onto the range of the features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .descent import DescentAlgorithm, HiddenState, step
from .energy import GrMlpEnergy, LpEnergy
from .graph import HeteroGraph, adjacency, laplacian
from .prox import ClampLabels, Identity, RangeProject

RANK_TOL = 1e-10


class LpError(ValueError):
    pass


@dataclass(frozen=True)
class LpConfig:
    lam: float = 1.0
    gamma: float = 0.1
    L: int = 50
    mode: str = "prox"        # "prox" or "standard"
    clamp: bool = True

    def __post_init__(self):
        if self.mode not in ("prox", "standard"):
            raise LpError(f"mode must be prox or standard, got {self.mode!r}")
        if self.L < 0 or self.gamma <= 0 or self.lam <= 0:
            raise LpError("need L >= 0, gamma > 0, lam > 0")


@dataclass
class LpResult:
    H: np.ndarray
    pred: np.ndarray           # -1 where undefined
    trajectory: list = field(default_factory=list)


def predict(H: np.ndarray) -> np.ndarray:
    """Row argmax (ties to the lowest class); all-zero rows give -1."""
    pred = np.argmax(H, axis=1)
    return np.where(np.any(H != 0.0, axis=1), pred, -1).astype(np.int64)


def label_propagate(g: HeteroGraph, Ybar: np.ndarray, mask: np.ndarray,
                    cfg: LpConfig = LpConfig()) -> LpResult:
    """Propagate masked one-hot labels ``Ybar`` for ``cfg.L`` steps from ``H = Ybar``."""
    Ybar = np.asarray(Ybar, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise LpError("no observed labels")
    H = Ybar.copy()
    traj = [H.copy()]
    clamp = ClampLabels(Ybar, mask) if cfg.clamp else Identity()
    if cfg.mode == "standard":
        if g.m != 1:
            raise LpError("standard mode needs a homogeneous graph")
        A = adjacency(g)
        # divide rather than scale by 1/deg so that D^-1 A 1 = 1 exactly
        deg = np.maximum(np.asarray(A.sum(axis=1)).ravel(), 1.0)[:, None]
        for _ in range(cfg.L):
            H = clamp.apply((A @ H) / deg)
            traj.append(H.copy())
    else:
        algo = DescentAlgorithm("prox" if cfg.clamp else "gd", cfg.gamma, clamp)
        energy = LpEnergy(cfg.lam)
        S = HiddenState()
        for _ in range(cfg.L):
            H, S = step(algo, energy, g, H, S, Ybar)
            traj.append(H.copy())
    return LpResult(H, predict(H), traj)


# ----------------------------------------------------------------------
# orthonormal feature bases

@dataclass
class OrthoBasis:
    """``X[:, cols] = Q @ R`` with ``Q`` orthonormal; ``rank`` columns kept."""

    Q: np.ndarray
    R: np.ndarray
    cols: np.ndarray
    rank: int


def _fix_signs(Q, R):
    for j in range(Q.shape[1]):
        nz = np.flatnonzero(np.abs(Q[:, j]) > 0)
        if nz.size and Q[nz[0], j] < 0:
            Q[:, j] *= -1.0
            R[j, :] *= -1.0
    return Q, R


def orthonormalize(X: np.ndarray, tol: float = RANK_TOL) -> OrthoBasis:
    """Orthonormal basis of ``range(X)`` with a deterministic sign convention.

    Full-rank input keeps its column order.  Rank-deficient input drops the
    dependent columns found by a pivoted QR.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.size == 0 or not np.any(X):
        raise LpError("cannot orthonormalize an empty or zero matrix")
    _, Rp, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rp))
    rank = int(np.sum(diag > tol * diag[0]))
    if rank == X.shape[1]:
        cols = np.arange(X.shape[1])
    else:
        cols = np.sort(piv[:rank])
    Q, R = np.linalg.qr(X[:, cols])
    Q, R = _fix_signs(Q, R)
    return OrthoBasis(Q, R, cols, rank)


# ----------------------------------------------------------------------
# graph-regularized linear model

@dataclass
class GrMlpResult:
    basis: OrthoBasis
    W: list                    # weight trajectory
    H_weight: list             # Q @ W along the weight path
    H_prox: list               # projected message-passing path

    @property
    def rank(self) -> int:
        return self.basis.rank


def gr_mlp_train(g: HeteroGraph, X: np.ndarray, Ybar: np.ndarray, lam: float = 1.0,
                 gamma: float = 0.1, L: int = 100, W0: np.ndarray | None = None) -> GrMlpResult:
    """Run the weight-space gradient path and the embedding-space prox path together.

    The model is ``H = Q W`` with ``Q`` an orthonormal basis of ``range(X)``.
    The weight path steps ``W <- W - gamma Q'(QW + lam L QW - Ybar)``; the
    prox path steps ``H <- P_Q[H - gamma (H + lam L H - Ybar)]`` by message
    passing.  They agree whenever ``H0 = Q W0``.
    """
    Ybar = np.asarray(Ybar, dtype=np.float64)
    basis = orthonormalize(X)
    Q = basis.Q
    W = np.zeros((basis.rank, Ybar.shape[1])) if W0 is None else np.asarray(W0, dtype=np.float64)
    Lap = laplacian(g)
    algo = DescentAlgorithm("prox", gamma, RangeProject(Q))
    energy = GrMlpEnergy(lam)
    H = Q @ W
    Ws, Hw, Hp = [W.copy()], [H.copy()], [H.copy()]
    S = HiddenState()
    for _ in range(L):
        QW = Q @ W
        W = W - gamma * (Q.T @ (QW + lam * (Lap @ QW) - Ybar))
        H, S = step(algo, energy, g, H, S, Ybar)
        Ws.append(W.copy())
        Hw.append(Q @ W)
        Hp.append(H.copy())
    return GrMlpResult(basis, Ws, Hw, Hp)
