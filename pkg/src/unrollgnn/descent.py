"""Descent steps as message-passing layers.

:func:`step` runs three phases in order: per-edge messages, per-node sum
aggregation in stored order, and a node-wise update.  The update rules share
:func:`apply_update` with :func:`reference_step`, which feeds the same rule
a gradient computed without messages; comparing the two is the oracle check.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .energy import EnergyFamily, aggregate, edge_messages, eval_energy, full_gradient_dense
from .graph import HeteroGraph, Permutation
from .prox import Identity, ProxOperator

VARIANTS = ("gd", "prox", "degree", "momentum", "adagrad", "rmsprop", "adam")
MAX_HALVINGS = 40
# a step smaller than this (relative to max|H|) counts as standing still
STALL_TOL = 1e-10


class DescentError(RuntimeError):
    pass


@dataclass(frozen=True)
class DescentAlgorithm:
    variant: str = "gd"
    gamma: float = 0.1
    prox: ProxOperator = field(default_factory=Identity)
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    backtrack: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DescentError(f"unknown algorithm {self.variant!r}; expected one of {VARIANTS}")
        if not self.gamma > 0:
            raise DescentError(f"step size must be positive, got {self.gamma}")
        for name in ("beta", "beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise DescentError(f"{name} must lie in [0, 1), got {b}")
        if not self.eps > 0:
            raise DescentError(f"eps must be positive, got {self.eps}")
        if self.variant == "gd" and type(self.prox) is not Identity:
            raise DescentError("plain GD takes no prox; use variant 'prox'")
        if not valid_pairing(self.prox, self.variant):
            raise DescentError(f"{self.variant} cannot be combined with {self.prox!r}")

    @property
    def n_states(self) -> int:
        return {"momentum": 1, "adagrad": 1, "rmsprop": 1, "adam": 2}.get(self.variant, 0)

    def with_gamma(self, gamma: float) -> "DescentAlgorithm":
        return replace(self, gamma=gamma)


def valid_pairing(prox: ProxOperator, variant: str) -> bool:
    """Which variants can carry a given prox.

    Row-wise projections commute with per-coordinate scaling, so every
    preconditioned variant stays a descent method under them.  A whole-H
    projection only keeps that property for unscaled steps.
    """
    if type(prox) is Identity:
        return True
    if variant == "gd":
        return False
    if prox.rowwise:
        return True
    return variant in ("prox", "momentum")


@dataclass
class HiddenState:
    """Optimizer state; ``t`` counts completed steps (for Adam bias correction)."""

    mats: tuple = ()
    t: int = 0

    @classmethod
    def zeros(cls, algo: DescentAlgorithm, shape) -> "HiddenState":
        return cls(tuple(np.zeros(shape) for _ in range(algo.n_states)), 0)

    def permuted(self, p: Permutation) -> "HiddenState":
        return HiddenState(tuple(p.rows(ad.value(s)) for s in self.mats), self.t)


@dataclass
class Trajectory:
    energies: list = field(default_factory=list)
    states: list | None = None

    def append(self, energy: float, H=None):
        self.energies.append(float(energy))
        if self.states is not None and H is not None:
            self.states.append(np.array(H, copy=True))

    def __len__(self):
        return len(self.energies)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "energy"])
        for i, v in enumerate(self.energies):
            w.writerow([i, f"{v:.17g}"])
        return buf.getvalue()


def _finite(x, phase: str):
    v = ad.value(x)
    if not np.all(np.isfinite(v)):
        raise DescentError(f"non-finite values in {phase} phase")


def degree_factor(g: HeteroGraph) -> np.ndarray:
    return (1.0 / np.maximum(g.degree(), 1)).astype(np.float64)[:, None]


def _seen(s):
    """1 where the second moment is nonzero, else 0.

    A zero moment means every gradient so far was exactly zero (an isolated
    node sitting at its anchor).  The step there is zero, but its slope is
    about 1/eps, and reverse mode would amplify roundoff by that factor
    before the structurally zero input sensitivity cancels it.  Masking
    keeps the value bit-identical and drops that slope.
    """
    return (np.asarray(ad.value(s)) != 0).astype(np.float64)


def apply_update(algo: DescentAlgorithm, H, grad, S: HiddenState, deg_factor=None):
    """Update phase: new embeddings and hidden state from ``g = a + kappa'``.

    ``H`` and ``grad`` may be tape variables.
    """
    v = algo.variant
    gam = algo.gamma
    t = S.t + 1
    if v in ("gd", "prox"):
        pre, mats = ad.sub(H, ad.mul(gam, grad)), ()
    elif v == "degree":
        pre, mats = ad.sub(H, ad.mul(gam * deg_factor, grad)), ()
    elif v == "momentum":
        (s,) = S.mats
        s = ad.add(ad.mul(algo.beta, s), ad.mul(1.0 - algo.beta, grad))
        pre, mats = ad.sub(H, ad.mul(gam, s)), (s,)
    elif v == "adagrad":
        (s,) = S.mats
        s = ad.add(s, ad.mul(grad, grad))
        ratio = ad.mul(ad.div(grad, ad.sqrt(ad.add(s, algo.eps))), _seen(s))
        pre, mats = ad.sub(H, ad.mul(gam, ratio)), (s,)
    elif v == "rmsprop":
        (s,) = S.mats
        s = ad.add(ad.mul(algo.beta, s), ad.mul(1.0 - algo.beta, ad.mul(grad, grad)))
        ratio = ad.mul(ad.div(grad, ad.sqrt(ad.add(s, algo.eps))), _seen(s))
        pre, mats = ad.sub(H, ad.mul(gam, ratio)), (s,)
    else:  # adam
        o, s = S.mats
        o = ad.add(ad.mul(algo.beta1, o), ad.mul(1.0 - algo.beta1, grad))
        s = ad.add(ad.mul(algo.beta2, s), ad.mul(1.0 - algo.beta2, ad.mul(grad, grad)))
        o_hat = ad.mul(o, 1.0 / (1.0 - algo.beta1 ** t))
        s_hat = ad.mul(s, 1.0 / (1.0 - algo.beta2 ** t))
        ratio = ad.mul(ad.div(o_hat, ad.add(ad.sqrt(s_hat), algo.eps)), _seen(s))
        pre = ad.sub(H, ad.mul(gam, ratio))
        mats = (o, s)
    return pre, HiddenState(mats, t)


def _check_state(algo, S, H):
    if len(S.mats) != algo.n_states:
        raise DescentError(f"{algo.variant} needs {algo.n_states} state matrices, got {len(S.mats)}")
    for s in S.mats:
        if ad.value(s).shape != ad.value(H).shape:
            raise DescentError("hidden state shape does not match H")


def step_pre_prox(algo, energy, g, H, S, X, P=None):
    """The three phases, stopping before the prox; returns (pre, S')."""
    _check_state(algo, S, H)
    msgs = edge_messages(energy, g, H, P)
    _finite(msgs, "message")
    agg = aggregate(g, msgs)
    _finite(agg, "aggregate")
    grad = ad.add(agg, energy.node_grad(H, X, energy.P(P)))
    deg = degree_factor(g) if algo.variant == "degree" else None
    pre, S2 = apply_update(algo, H, grad, S, deg)
    _finite(pre, "update")
    return pre, S2


def step(algo: DescentAlgorithm, energy: EnergyFamily, g: HeteroGraph, H, S: HiddenState,
         X, P=None):
    """One layer: ``(H, S) -> (H', S')`` via message, aggregate, update."""
    pre, S2 = step_pre_prox(algo, energy, g, H, S, X, P)
    out = algo.prox(pre, algo.gamma)
    _finite(out, "update")
    return out, S2


def reference_step(algo, energy, g, H, S, X, P=None):
    """The same update rule fed by the dense gradient."""
    _check_state(algo, S, H)
    grad = full_gradient_dense(energy, g, H, X, P)
    deg = degree_factor(g) if algo.variant == "degree" else None
    pre, S2 = apply_update(algo, np.asarray(ad.value(H)), grad, S, deg)
    return algo.prox(pre, algo.gamma), S2


def total_energy(energy, g, H, X, prox: ProxOperator, P=None) -> float:
    """Smooth energy plus the prox's indicator."""
    eta = prox.indicator(H)
    if not np.isfinite(eta):
        return np.inf
    return eval_energy(energy, g, H, X, P) + eta


def backtracked_step(algo, energy, g, H, S, X, P=None, E0=None):
    """One step with step-size halving until the total energy does not rise.

    Tries the current hidden state first; if 40 halvings do not help (a
    stale momentum can point uphill), retries from a zeroed state.  A
    step that is negligible at every trial size is treated as a fixed
    point and returns ``H`` unchanged.  Returns ``(H', S', E', gamma')``.
    """
    if E0 is None:
        E0 = total_energy(energy, g, H, X, algo.prox, P)
    for state in (S, HiddenState.zeros(algo, H.shape)):
        a = algo
        for _ in range(MAX_HALVINGS + 1):
            H2, S2 = step(a, energy, g, H, state, X, P)
            E2 = total_energy(energy, g, H2, X, algo.prox, P)
            if E2 <= E0:
                return H2, S2, E2, a.gamma
            a = a.with_gamma(a.gamma / 2)
        if algo.n_states == 0:
            break
    scale = max(1.0, float(np.max(np.abs(H), initial=0.0)))
    if np.max(np.abs(H2 - H), initial=0.0) <= STALL_TOL * scale and np.isfinite(E0):
        return np.array(H, copy=True), HiddenState.zeros(algo, H.shape), E0, 0.0
    raise DescentError(f"backtracking exhausted after {MAX_HALVINGS} halvings (energy {E0:.6g})")


def unroll(algo: DescentAlgorithm, energy: EnergyFamily, g: HeteroGraph, H0, X, L: int,
           P=None, S0: HiddenState | None = None, keep_states: bool = False):
    """Apply ``L`` steps; returns ``(H_L, trajectory)`` with ``L + 1`` energies."""
    if L < 0:
        raise DescentError(f"L must be >= 0, got {L}")
    H = np.array(H0, dtype=np.float64, copy=True)
    S = S0 if S0 is not None else HiddenState.zeros(algo, H.shape)
    traj = Trajectory(states=[] if keep_states else None)
    E = total_energy(energy, g, H, X, algo.prox, P)
    traj.append(E, H)
    for _ in range(L):
        if algo.backtrack:
            H, S, E, _ = backtracked_step(algo, energy, g, H, S, X, P, E0=E)
        else:
            H, S = step(algo, energy, g, H, S, X, P)
            E = total_energy(energy, g, H, X, algo.prox, P)
        traj.append(E, H)
    return H, traj
