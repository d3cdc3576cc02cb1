"""Checks that a descent step on an energy is a message-passing layer.

For an (energy, algorithm) pairing, :func:`check_pairing` draws seeded
random instances and runs five checks:

oracle        step equals the same rule on the dense gradient
locality      changing a non-neighbor leaves a node's output bit-identical
permutation   relabeling nodes commutes with the step
monotone      with backtracking, the energy never rises over 200 steps
finite-diff   the message-passing gradient matches central differences
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .descent import (VARIANTS, DescentAlgorithm, DescentError, HiddenState, apply_update,
                      degree_factor, reference_step, step, step_pre_prox, unroll, valid_pairing)
from .energy import (ENERGY_NAMES, EnergyFamily, GrMlpEnergy, HeterophilyLinear,
                     HuberFidelity, InputModel, KgeBce, LogCoshFidelity, LpEnergy, NbfBilinear,
                     QuadraticSmooth, aggregate, edge_messages, eval_energy, full_gradient_dense,
                     smooth_gradient)
from .graph import HeteroGraph, Permutation, build_graph, permute
from .kge import build_negative_graph, nbf_params
from .lp import orthonormalize
from .prox import ClampLabels, Identity, NonNeg, ProxOperator, RangeProject
from .synthetic import random_graph, random_hetero_triplets

CHECKS = ("oracle", "locality", "permutation", "monotone", "finite-diff")
TOLERANCES = {"oracle": 1e-12, "locality": 0.0, "permutation": 1e-12,
              "monotone": 0.0, "finite-diff": 1e-6}
FD_STEP = 1e-6
MONOTONE_STEPS = 200


@dataclass
class Instance:
    energy: EnergyFamily
    g: HeteroGraph
    H: np.ndarray
    X: np.ndarray | None
    prox: ProxOperator
    gamma: float

    def permuted(self, p: Permutation) -> "Instance":
        g2, H2 = permute(self.g, self.H, p)
        X2 = None if self.X is None else p.rows(self.X)
        return Instance(self.energy, g2, H2, X2, self.prox.permuted(p), self.gamma)


def _dims(rng, n_max, d_max):
    return int(rng.integers(2, n_max + 1)), int(rng.integers(1, d_max + 1)), \
        float(rng.uniform(0.05, 0.3))


def random_instance(name: str, rng: np.random.Generator, n_max: int = 30,
                    d_max: int = 6) -> Instance:
    """A random energy, graph, state and matching prox (n <= 30, d <= 6, density <= 0.3)."""
    n, d, dens = _dims(rng, n_max, d_max)
    H = rng.normal(size=(n, d))
    lam = float(rng.uniform(0.1, 1.0))
    if name in ("quadratic", "huber", "logcosh", "heterophily"):
        g = random_graph(n, dens, rng)
        d_x = int(rng.integers(1, 5))
        X = rng.normal(size=(n, d_x))
        P = InputModel.init(rng, d_x, d, hidden=int(rng.integers(2, 5)) if rng.random() < 0.5 else None)
        if rng.random() < 0.5:
            P["lam_raw"] = np.log(np.expm1(rng.uniform(0.1, 1.0, size=(1,))))
        if name == "heterophily":
            P["C"] = rng.normal(scale=0.5, size=(d, d))
            fid = "huber" if rng.random() < 0.5 else "quadratic"
            return Instance(HeterophilyLinear(P, lam, fid), g, H, X, NonNeg(), 0.1)
        cls = {"quadratic": QuadraticSmooth, "huber": HuberFidelity, "logcosh": LogCoshFidelity}[name]
        return Instance(cls(P, lam), g, H, X, Identity(), 0.1)
    if name in ("lp", "grmlp"):
        g = random_graph(n, dens, rng)
        labels = rng.integers(d, size=n)
        mask = rng.random(n) < 0.4
        mask[int(rng.integers(n))] = True
        Ybar = np.zeros((n, d))
        Ybar[np.flatnonzero(mask), labels[mask]] = 1.0
        if name == "lp":
            return Instance(LpEnergy(lam), g, H, Ybar, ClampLabels(Ybar, mask), 0.1)
        k = int(rng.integers(1, n + 1))
        Q = orthonormalize(rng.normal(size=(n, k))).Q
        return Instance(GrMlpEnergy(lam), g, H, Ybar, RangeProject(Q), 0.1)
    if name == "kge":
        m = int(rng.integers(1, 4))
        n = max(n, 3)
        H = rng.normal(size=(n, d))
        trip = []
        while not trip:
            trip = random_hetero_triplets(n, m, dens / 2, rng)
        kg = build_graph(trip, n, m)
        neg = build_negative_graph(kg, 1, seed=int(rng.integers(2**31)))
        score = "transe" if rng.random() < 0.5 else "distmult"
        E = rng.normal(scale=0.5, size=(m, d))
        return Instance(KgeBce(m, score, {"E": E}), neg.graph, 0.5 * H, None, Identity(), 0.1)
    if name == "nbf":
        m = int(rng.integers(1, 4))
        g = build_graph(random_hetero_triplets(n, m, dens / 2, rng), n, m)
        P = nbf_params(rng, m, d)
        # keep the energy bounded below: Psi dominates the edge coupling
        deg = max(1, int(g.degree().max(initial=0)))
        P["Phi"] = P["Phi"] / (2.0 * deg * max(1.0, np.abs(np.linalg.eigvalsh(P["Phi"])).max()))
        P["Psi"] = np.eye(d) + 0.2 * P["Psi"] / max(1.0, np.abs(np.linalg.eigvalsh(P["Psi"])).max())
        X = np.zeros((n, d))
        X[int(rng.integers(n))] = P["q"]
        return Instance(NbfBilinear(m, P), g, H, X, Identity(), 0.1)
    raise ValueError(f"unknown energy {name!r}")


def random_state(algo: DescentAlgorithm, shape, rng) -> HiddenState:
    if algo.variant == "adam":
        return HiddenState((rng.normal(size=shape), rng.uniform(0.0, 2.0, size=shape)),
                           int(rng.integers(0, 5)))
    if algo.n_states:
        mats = (rng.normal(size=shape),) if algo.variant == "momentum" else \
            (rng.uniform(0.0, 2.0, size=shape),)
        return HiddenState(mats, int(rng.integers(0, 5)))
    return HiddenState()


def make_algo(inst: Instance, variant: str, backtrack=False) -> DescentAlgorithm:
    prox = inst.prox
    return DescentAlgorithm(variant, inst.gamma, prox, backtrack=backtrack)


# ----------------------------------------------------------------------
# faults for testing the harness itself

def faulty_gradient(energy, g, H, X, P=None):
    """Message-passing gradient with every message sign-flipped."""
    msgs = ad.neg(edge_messages(energy, g, H, P))
    return ad.value(aggregate(g, msgs)) + ad.value(energy.node_grad(H, X, energy.P(P)))


def faulty_step(algo, energy, g, H, S, X, P=None):
    grad = faulty_gradient(energy, g, H, X, P)
    deg = degree_factor(g) if algo.variant == "degree" else None
    pre, S2 = apply_update(algo, H, grad, S, deg)
    return algo.prox(pre, algo.gamma), S2


# ----------------------------------------------------------------------
# individual checks; each returns the max observed error

def oracle_error(inst, algo, S, fault=False) -> float:
    if fault:
        grad = faulty_gradient(inst.energy, inst.g, inst.H, inst.X)
        H2, S2 = faulty_step(algo, inst.energy, inst.g, inst.H, S, inst.X)
    else:
        grad = ad.value(smooth_gradient(inst.energy, inst.g, inst.H, inst.X))
        H2, S2 = step(algo, inst.energy, inst.g, inst.H, S, inst.X)
    dense = full_gradient_dense(inst.energy, inst.g, inst.H, inst.X)
    R2, T2 = reference_step(algo, inst.energy, inst.g, inst.H, S, inst.X)
    errs = [np.max(np.abs(grad - dense), initial=0.0), np.max(np.abs(H2 - R2), initial=0.0)]
    # accumulators of squared gradients scale like g^2, so compare them relatively
    errs += [np.max(np.abs(a - b), initial=0.0) / max(1.0, np.max(np.abs(b), initial=0.0))
             for a, b in zip(S2.mats, T2.mats)]
    return float(max(errs))


def locality_error(inst, algo, S, rng) -> float:
    """Max change at ``v`` when perturbing some ``w`` outside ``N(v) + {v}``; 0 if bit-identical."""
    g = inst.g
    n = g.n
    run = step if algo.prox.rowwise else step_pre_prox
    base_H, base_S = run(algo, inst.energy, g, inst.H, S, inst.X)
    worst = 0.0
    for v in rng.permutation(n)[:min(n, 5)]:
        far = np.setdiff1d(np.arange(n), list(g.neighbors(int(v)) | {int(v)}))
        if far.size == 0:
            continue
        w = int(rng.choice(far))
        H = inst.H.copy()
        H[w] += rng.normal(size=H.shape[1])
        mats = tuple(s.copy() for s in S.mats)
        for s in mats:
            s[w] = np.abs(s[w] + rng.normal(size=s.shape[1]))
        out_H, out_S = run(algo, inst.energy, g, H, HiddenState(mats, S.t), inst.X)
        pairs = [(out_H[v], base_H[v])] + [(a[v], b[v]) for a, b in zip(out_S.mats, base_S.mats)]
        for a, b in pairs:
            if not np.array_equal(a, b):
                worst = max(worst, float(np.max(np.abs(a - b))), np.finfo(float).tiny)
    return worst


def permutation_error(inst, algo, S, rng) -> float:
    p = Permutation.random(inst.g.n, rng)
    H2, S2 = step(algo, inst.energy, inst.g, inst.H, S, inst.X)
    pinst = inst.permuted(p)
    pS = S.permuted(p)
    pH2, pS2 = step(replace(algo, prox=pinst.prox), pinst.energy, pinst.g, pinst.H, pS, pinst.X)
    errs = [np.max(np.abs(p.rows(H2) - pH2), initial=0.0)]
    errs += [np.max(np.abs(p.rows(a) - b), initial=0.0) for a, b in zip(S2.mats, pS2.mats)]
    return float(max(errs))


def monotone_error(inst, algo, steps=MONOTONE_STEPS) -> float:
    """Largest energy increase between consecutive steps (0 when monotone)."""
    _, traj = unroll(replace(algo, backtrack=True), inst.energy, inst.g, inst.H, inst.X, steps)
    E = np.array(traj.energies)
    with np.errstate(invalid="ignore"):
        inc = np.diff(E)
    inc = np.where(np.isnan(inc), 0.0, inc)     # inf -> inf transitions
    return float(max(0.0, np.max(inc, initial=0.0)))


def fd_error(inst, step_size=FD_STEP) -> float:
    """``max|an - fd| / max(1, max|an|)`` for the message-passing gradient."""
    an = np.asarray(ad.value(smooth_gradient(inst.energy, inst.g, inst.H, inst.X)))
    fd = np.zeros_like(inst.H)
    H = inst.H.copy()
    for idx in np.ndindex(*H.shape):
        old = H[idx]
        H[idx] = old + step_size
        fp = eval_energy(inst.energy, inst.g, H, inst.X)
        H[idx] = old - step_size
        fm = eval_energy(inst.energy, inst.g, H, inst.X)
        H[idx] = old
        fd[idx] = (fp - fm) / (2 * step_size)
    return float(np.max(np.abs(an - fd), initial=0.0) / max(1.0, np.max(np.abs(an), initial=0.0)))


# ----------------------------------------------------------------------
# reports

@dataclass
class CheckResult:
    check: str
    max_error: float
    tolerance: float
    failing_trial: int | None = None

    @property
    def passed(self) -> bool:
        return self.failing_trial is None


@dataclass
class ConformanceReport:
    pairing: str
    seed: int
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "pass" if r.passed else f"FAIL(trial={r.failing_trial},seed={self.seed})"
            out.append(f"{self.pairing},{r.check},{r.max_error:.17g},{r.tolerance:.17g},{status}")
        return out


def pairing_id(energy_name: str, variant: str) -> str:
    return f"{energy_name}+{variant}"


def _trial_rng(seed: int, pairing: str, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(pairing.encode()), trial])


def built_in_pairings() -> list[tuple[str, str]]:
    """Every (energy, variant) pair whose prox admits the variant."""
    probe = np.random.default_rng(0)
    out = []
    for name in ENERGY_NAMES:
        inst = random_instance(name, probe, n_max=4, d_max=2)
        for v in VARIANTS:
            if valid_pairing(inst.prox, v) and not (v == "gd" and type(inst.prox) is not Identity):
                out.append((name, v))
    return out


def check_pairing(energy_name: str, variant: str, trials: int = 3, seed: int = 0,
                  checks=CHECKS, fault: str | None = None,
                  monotone_steps: int = MONOTONE_STEPS) -> ConformanceReport:
    """Run the selected checks on ``trials`` random instances.

    ``fault="sign_flip"`` replaces the messages by their negation in the
    oracle check, which must then fail.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    pid = pairing_id(energy_name, variant)
    report = ConformanceReport(pid, seed)
    worst = {c: 0.0 for c in checks}
    failing = {c: None for c in checks}
    for t in range(trials):
        rng = _trial_rng(seed, pid, t)
        inst = random_instance(energy_name, rng)
        algo = make_algo(inst, variant)
        S = random_state(algo, inst.H.shape, rng)
        for c in checks:
            try:
                if c == "oracle":
                    err = oracle_error(inst, algo, S, fault == "sign_flip")
                elif c == "locality":
                    err = locality_error(inst, algo, S, rng)
                elif c == "permutation":
                    err = permutation_error(inst, algo, S, rng)
                elif c == "monotone":
                    err = monotone_error(inst, algo, monotone_steps)
                elif c == "finite-diff":
                    err = fd_error(inst)
                else:
                    raise ValueError(f"unknown check {c!r}")
            except DescentError:
                err = np.inf
            worst[c] = max(worst[c], err)
            if not err <= TOLERANCES[c] and failing[c] is None:
                failing[c] = t
    for c in checks:
        report.results.append(CheckResult(c, worst[c], TOLERANCES[c], failing[c]))
    return report


def verify_all(seed: int = 0, trials: int = 3, workers: int = 1, checks=CHECKS) -> list:
    """Reports for every built-in pairing, in a fixed order."""
    pairs = built_in_pairings()

    def one(pv):
        return check_pairing(pv[0], pv[1], trials, seed, checks)

    if workers <= 1:
        return [one(pv) for pv in pairs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, pairs))


def report_text(reports) -> str:
    lines = ["pairing,check,max_error,tolerance,status"]
    for r in reports:
        lines.extend(r.lines())
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# why an outer nonlinearity breaks locality

@dataclass
class RhoDemo:
    rho: str
    change: float               # change of grad at node 0 after moving the far edge
    matches_energy: bool        # identity rho: value equals the plain energy sum


def _rho_energy(rho, H, edges):
    s = sum(0.5 * float(np.sum((H[u] - H[v]) ** 2)) for u, v in edges)
    return {"square": s * s, "linear": 3.0 * s, "identity": s}[rho]


def _rho_grad(rho, H, edges):
    s = sum(0.5 * float(np.sum((H[u] - H[v]) ** 2)) for u, v in edges)
    outer = {"square": 2.0 * s, "linear": 3.0, "identity": 1.0}[rho]
    G = np.zeros_like(H)
    for u, v in edges:
        G[u] += outer * (H[u] - H[v])
        G[v] += outer * (H[v] - H[u])
    return G


def check_nonlinear_rho_counterexample(seed: int = 0) -> list[RhoDemo]:
    """Two disjoint edges (0-1, 2-3).  Moving node 2 must not affect node 0's
    gradient for a message-passing layer; with ``rho(s) = s^2`` it does."""
    rng = np.random.default_rng(seed)
    edges = [(0, 1), (2, 3)]
    H = rng.normal(size=(4, 2))
    H2 = H.copy()
    H2[2] += 1.0
    g = build_graph([(0, 0, 1), (2, 0, 3)], 4, 1)
    plain = eval_energy(QuadraticSmooth(), g, H, H)   # pi = identity, X = H: node terms vanish
    out = []
    for rho in ("square", "linear", "identity"):
        change = float(np.max(np.abs(_rho_grad(rho, H2, edges)[0] - _rho_grad(rho, H, edges)[0])))
        out.append(RhoDemo(rho, change, abs(_rho_energy(rho, H, edges) - plain) <= 1e-12))
    return out
