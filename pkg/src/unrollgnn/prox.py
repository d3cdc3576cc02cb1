"""Node-wise proximal operators for the nonsmooth part of an energy.

Each operator is the closed-form ``argmin_z eta(z) + ||z - h||^2 / (2 gamma)``
for one indicator ``eta``.  All five are projections, so ``gamma`` is
accepted but unused.  ``backward`` gives the (sub)gradient rule used when
differentiating through an unrolled step.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .graph import Permutation

FEASIBILITY_TOL = 1e-9


class ProxError(ValueError):
    pass


class ProxOperator:
    """Base class; the identity map (``eta = 0``)."""

    name = "none"
    #: True when the operator acts on each row independently.
    rowwise = True

    def apply(self, H: np.ndarray, gamma: float = 1.0) -> np.ndarray:
        return np.array(H, dtype=np.float64, copy=True)

    def backward(self, H_in: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        _check_shapes(H_in, upstream)
        return np.array(upstream, dtype=np.float64, copy=True)

    def indicator(self, H: np.ndarray) -> float:
        """``eta(H)``: 0 on the feasible set, ``inf`` outside it."""
        return 0.0

    def permuted(self, p: Permutation) -> "ProxOperator":
        """The same operator after relabeling nodes by ``p``."""
        return self

    def __call__(self, H, gamma: float = 1.0):
        """Apply to an array or a tape variable."""
        if isinstance(H, ad.Var):
            return ad.custom_prox(H, lambda v: self.apply(v, gamma), self.backward)
        return self.apply(H, gamma)

    def __repr__(self):
        return f"{type(self).__name__}()"


Identity = ProxOperator


class NonNeg(ProxOperator):
    """Projection onto the nonnegative orthant."""

    name = "nonneg"

    def apply(self, H, gamma=1.0):
        return np.maximum(np.asarray(H, dtype=np.float64), 0.0)

    def backward(self, H_in, upstream):
        _check_shapes(H_in, upstream)
        # derivative taken as 0 at exactly 0
        return np.where(np.asarray(H_in) > 0.0, upstream, 0.0)

    def indicator(self, H):
        return 0.0 if np.all(np.asarray(H) >= 0.0) else np.inf


class ClampLabels(ProxOperator):
    """Replace rows of observed nodes by their labels."""

    name = "clamp"

    def __init__(self, Ybar: np.ndarray, mask: np.ndarray):
        self.Ybar = np.asarray(Ybar, dtype=np.float64)
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.shape != (self.Ybar.shape[0],):
            raise ProxError("mask length must match the number of label rows")

    def apply(self, H, gamma=1.0):
        H = np.asarray(H, dtype=np.float64)
        if H.shape != self.Ybar.shape:
            raise ProxError(f"shape {H.shape} does not match labels {self.Ybar.shape}")
        return np.where(self.mask[:, None], self.Ybar, H)

    def backward(self, H_in, upstream):
        _check_shapes(H_in, upstream)
        return np.where(self.mask[:, None], 0.0, upstream)

    def indicator(self, H):
        H = np.asarray(H)
        ok = np.array_equal(H[self.mask], self.Ybar[self.mask])
        return 0.0 if ok else np.inf

    def permuted(self, p):
        return ClampLabels(p.rows(self.Ybar), p.rows(self.mask))

    def __repr__(self):
        return f"ClampLabels(observed={int(self.mask.sum())})"


class RangeProject(ProxOperator):
    """Orthogonal projection of all of H onto ``range(Q)``.

    Acts on whole columns, so it is not row-wise.
    """

    name = "range"
    rowwise = False

    def __init__(self, Q: np.ndarray, tol: float = 1e-10):
        Q = np.asarray(Q, dtype=np.float64)
        gram = Q.T @ Q
        err = np.max(np.abs(gram - np.eye(Q.shape[1]))) if Q.size else 0.0
        if err > tol:
            raise ProxError(f"basis is not orthonormal (max |Q^T Q - I| = {err:.3e})")
        self.Q = Q

    def apply(self, H, gamma=1.0):
        H = np.asarray(H, dtype=np.float64)
        return self.Q @ (self.Q.T @ H)

    def backward(self, H_in, upstream):
        _check_shapes(H_in, upstream)
        return self.Q @ (self.Q.T @ np.asarray(upstream))

    def indicator(self, H):
        H = np.asarray(H)
        resid = H - self.apply(H)
        scale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
        return 0.0 if np.max(np.abs(resid), initial=0.0) <= FEASIBILITY_TOL * scale else np.inf

    def permuted(self, p):
        return RangeProject(p.rows(self.Q))

    def __repr__(self):
        return f"RangeProject(rank={self.Q.shape[1]})"


def _row_norms(H):
    nrm = np.sqrt(np.sum(H * H, axis=1, keepdims=True))
    bad = (nrm[:, 0] < 1e-150) | ~np.isfinite(nrm[:, 0])
    if np.any(bad):
        # rescale rows whose squares under- or overflow
        s = np.max(np.abs(H[bad]), axis=1, keepdims=True)
        s[s == 0] = 1.0
        nrm[bad] = s * np.sqrt(np.sum((H[bad] / s) ** 2, axis=1, keepdims=True))
    return nrm


class UnitNorm(ProxOperator):
    """Projection of each row onto the unit sphere."""

    name = "unitnorm"

    def apply(self, H, gamma=1.0):
        H = np.asarray(H, dtype=np.float64)
        nrm = _row_norms(H)
        zero = np.flatnonzero(nrm[:, 0] == 0.0)
        if zero.size:
            raise ProxError(f"row {int(zero[0])} is zero; unit-norm projection undefined")
        return H / nrm

    def backward(self, H_in, upstream):
        _check_shapes(H_in, upstream)
        H_in = np.asarray(H_in, dtype=np.float64)
        nrm = _row_norms(H_in)
        unit = H_in / nrm
        g = np.asarray(upstream, dtype=np.float64)
        return (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / nrm

    def indicator(self, H):
        nrm = np.sqrt(np.sum(np.asarray(H) ** 2, axis=1))
        return 0.0 if np.all(np.abs(nrm - 1.0) <= FEASIBILITY_TOL) else np.inf


def _check_shapes(H_in, upstream):
    if np.shape(H_in) != np.shape(upstream):
        raise ProxError(f"shape mismatch {np.shape(H_in)} vs {np.shape(upstream)}")


PROX_NAMES = ("none", "nonneg", "clamp", "range", "unitnorm")


def make_prox(name: str, *, Ybar=None, mask=None, Q=None) -> ProxOperator:
    """Build the operator selected by the ``prox=`` config key."""
    if name == "none":
        return Identity()
    if name == "nonneg":
        return NonNeg()
    if name == "unitnorm":
        return UnitNorm()
    if name == "clamp":
        if Ybar is None or mask is None:
            raise ProxError("clamp needs labels and an observed mask")
        return ClampLabels(Ybar, mask)
    if name == "range":
        if Q is None:
            raise ProxError("range needs an orthonormal basis")
        return RangeProject(Q)
    raise ProxError(f"unknown prox {name!r}; expected one of {PROX_NAMES}")
