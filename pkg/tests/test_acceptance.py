"""Acceptance criteria 1 to 13.

Each test records one ``criterion N: PASS|FAIL ...`` line, printed in the
terminal summary, before asserting.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import central_fd, rel_err
from unrollgnn.bilevel import (TrainConfig, accuracy, detect_outliers, forward, init_model,
                               loss_and_grad, train)
from unrollgnn.conformance import (Instance, _trial_rng, built_in_pairings, check_pairing,
                                   fd_error, make_algo, oracle_error, random_instance)
from unrollgnn.descent import DescentAlgorithm, HiddenState, step, unroll
from unrollgnn.energy import (ENERGY_NAMES, HeterophilyLinear, HuberFidelity, KgeBce,
                              LogCoshFidelity, QuadraticSmooth, full_gradient_dense)
from unrollgnn.graph import laplacian
from unrollgnn.kge import KgeConfig, build_negative_graph, inductive_infer, kge_loss_and_grad, train_kge
from unrollgnn.lp import LpConfig, gr_mlp_train, label_propagate, predict
from unrollgnn.prox import Identity, NonNeg, UnitNorm
from unrollgnn.synthetic import block_kg, planted_corruption, random_graph

PAIRS = built_in_pairings()


def run_checks(check, trials):
    fails, worst = [], 0.0
    for e, v in PAIRS:
        res = check_pairing(e, v, trials=trials, seed=2024, checks=(check,)).results[0]
        worst = max(worst, res.max_error)
        if not res.passed:
            fails.append(f"{e}+{v}")
    return fails, worst


def test_criterion_01_oracle_all_pairings(criterion):
    t0 = time.perf_counter()
    fails, worst = run_checks("oracle", 50)
    dt = time.perf_counter() - t0
    ok = not fails and worst <= 1e-12 and dt < 10.0
    assert criterion(1, ok, f"oracle {len(PAIRS)} pairings x 50 graphs, max error {worst:.3e} "
                            f"(tol 1e-12), {dt:.2f}s (limit 10s), failing {fails}")


def bilevel_problem(seed, n=10, d_x=3, c=3):
    rng = np.random.default_rng(seed)
    g = random_graph(n, 0.3, rng)
    X = rng.normal(size=(n, d_x))
    y = rng.integers(c, size=n)
    mask = rng.random(n) < 0.6
    mask[0] = True
    Ybar = np.zeros((n, c))
    Ybar[np.flatnonzero(mask), y[mask]] = 1.0
    return g, X, Ybar, mask


def bilevel_fd(model, g, X, Ybar, mask):
    _, grads, _ = loss_and_grad(model, g, X, Ybar, mask)
    worst = 0.0
    for k, p in model.params().items():
        def f(z, k=k):
            return forward(model.set_params({**model.params(), k: z}), g, X, Ybar, mask).loss
        worst = max(worst, rel_err(grads[k], central_fd(f, p, 1e-5)))
    return worst


def test_criterion_02_finite_differences(criterion):
    t0 = time.perf_counter()
    pot = 0.0
    for name in ENERGY_NAMES:
        for t in range(5):
            inst = random_instance(name, _trial_rng(7, f"fd-{name}", t), n_max=10, d_max=4)
            pot = max(pot, fd_error(inst))
    cases = [
        (QuadraticSmooth(), "gd", Identity(), 5),
        (HuberFidelity(lam=0.5), "momentum", Identity(), 4),
        (LogCoshFidelity(), "adam", Identity(), 3),
        (QuadraticSmooth(lam=0.8), "rmsprop", Identity(), 5),
        (QuadraticSmooth(), "adagrad", Identity(), 2),
        (QuadraticSmooth(), "degree", Identity(), 3),
        (HeterophilyLinear({"C": 0.3 * np.eye(4)}, 0.7), "prox", NonNeg(), 3),
    ]
    bil = 0.0
    for seed, (e, v, prox, L) in enumerate(cases):
        g, X, Ybar, mask = bilevel_problem(seed)
        model = init_model(e, DescentAlgorithm(v, 0.1, prox), 3, 4, 3, L, seed=seed,
                           hidden=3 if seed % 2 else None, lam_trainable=seed % 3 == 0)
        bil = max(bil, bilevel_fd(model, g, X, Ybar, mask))
    dt = time.perf_counter() - t0
    ok = pot <= 1e-6 and bil <= 1e-4 and dt < 30.0
    assert criterion(2, ok, f"potential fd {pot:.3e} (tol 1e-6), bilevel fd {bil:.3e} "
                            f"(tol 1e-4), {dt:.2f}s (limit 30s)")


def test_criterion_03_monotone(criterion):
    fails, worst = run_checks("monotone", 2)
    assert criterion(3, not fails, f"backtracked energy over 200 steps, {len(PAIRS)} pairings, "
                                   f"max increase {worst:.3e}, failing {fails}")


def test_criterion_04_locality(criterion):
    fails, worst = run_checks("locality", 3)
    assert criterion(4, not fails, f"non-neighbor perturbation, {len(PAIRS)} pairings, "
                                   f"max change {worst:.3e}, failing {fails}")


def test_criterion_05_permutation(criterion):
    fails, worst = run_checks("permutation", 3)
    assert criterion(5, not fails and worst <= 1e-12,
                     f"relabeling, {len(PAIRS)} pairings, max error {worst:.3e} (tol 1e-12), "
                     f"failing {fails}")


def test_criterion_06_quadratic_fixed_point(criterion):
    rng = np.random.default_rng(6)
    worst, steps_used = 0.0, 0
    for _ in range(10):
        n = int(rng.integers(5, 51))
        g = random_graph(n, float(rng.uniform(0.05, 0.3)), rng)
        lam = float(rng.uniform(0.05, 1.0))
        X = rng.normal(size=(n, 3))
        M = np.eye(n) + lam * laplacian(g).toarray()
        target = np.linalg.solve(M, X)
        gam = 1.0 / np.linalg.eigvalsh(M).max()
        algo = DescentAlgorithm("gd", gam)
        e = QuadraticSmooth(lam=lam)
        H, S, k = X.copy(), HiddenState(), 0
        while k < 5000 and np.max(np.abs(H - target)) > 1e-8:
            H, S = step(algo, e, g, H, S, X)
            k += 1
        worst = max(worst, float(np.max(np.abs(H - target))))
        steps_used = max(steps_used, k)
    assert criterion(6, worst <= 1e-8, f"gd to (I+lam L)^-1 pi(X) on 10 graphs (n<=50, lam<=1), "
                                       f"error {worst:.3e} (tol 1e-8), max steps {steps_used}")


def test_criterion_07_lp_equals_overparam_grmlp(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(5, 25))
        g = random_graph(n, 0.3, rng)
        c = int(rng.integers(2, 4))
        keep = rng.random(n) < 0.5
        keep[0] = True
        Y = np.eye(c)[rng.integers(c, size=n)] * keep[:, None]
        mask = keep
        lam, gam = float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.05, 0.2))
        lp = label_propagate(g, Y, mask, LpConfig(lam=lam, gamma=gam, L=100, clamp=False))
        gr = gr_mlp_train(g, np.eye(n), Y, lam=lam, gamma=gam, L=100, W0=Y)
        assert len(lp.trajectory) == len(gr.H_prox) == 101
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(lp.trajectory, gr.H_prox)))
    assert criterion(7, worst <= 1e-9, f"20 graphs x 100 steps, max per-step gap {worst:.3e} "
                                       f"(tol 1e-9)")


def test_criterion_08_momentum_not_worse(criterion):
    rng = np.random.default_rng(8)
    gam, losses = 0.01, 0
    for _ in range(20):
        n = int(rng.integers(10, 51))
        g = random_graph(n, 0.2, rng)
        e = QuadraticSmooth(lam=float(rng.uniform(0.1, 1.0)))
        X = rng.normal(size=(n, 3))
        H0 = rng.normal(size=(n, 3))
        _, tg = unroll(DescentAlgorithm("gd", gam), e, g, H0, X, 200)
        _, tm = unroll(DescentAlgorithm("momentum", gam, beta=0.9), e, g, H0, X, 200)
        losses += tm.energies[-1] > tg.energies[-1]
    assert criterion(8, losses == 0, f"momentum(0.9) vs gd at step 200, gamma {gam}, "
                                     f"20 quadratics, momentum worse on {losses}")


def test_criterion_09_unit_norm(criterion):
    rng = np.random.default_rng(9)
    prox_dev, pen_dev = 0.0, 0.0
    for _ in range(5):
        n = int(rng.integers(5, 20))
        g = random_graph(n, 0.3, rng)
        X = 2.0 * rng.normal(size=(n, 3))
        e = QuadraticSmooth(lam=0.5)
        algo = DescentAlgorithm("prox", 0.1, UnitNorm())
        H, S = UnitNorm().apply(X), HiddenState()
        Hp = H.copy()
        for _ in range(50):
            H, S = step(algo, e, g, H, S, X)
            prox_dev = max(prox_dev, float(np.max(np.abs(np.linalg.norm(H, axis=1) - 1.0))))
            # the quadratic penalty (|h|^2 - 1)^2 with weight 1
            sq = np.sum(Hp * Hp, axis=1, keepdims=True)
            Hp = Hp - 0.1 * (full_gradient_dense(e, g, Hp, X) + 4.0 * (sq - 1.0) * Hp)
        pen_dev = max(pen_dev, float(np.max(np.abs(np.linalg.norm(Hp, axis=1) - 1.0))))
    ok = prox_dev <= 1e-12 and pen_dev > 1e-3
    assert criterion(9, ok, f"unit-norm prox row deviation {prox_dev:.3e} (tol 1e-12), "
                            f"penalty deviation {pen_dev:.3e} (must exceed 1e-3)")


def textbook_steps(variant, H, grad_fn, prox, gamma, steps, beta=0.9, beta1=0.9, beta2=0.999,
                   eps=1e-8):
    """AdaGrad, RMSProp and Adam written out directly on a full gradient."""
    m = np.zeros_like(H)
    v = np.zeros_like(H)
    out = []
    for t in range(1, steps + 1):
        gr = grad_fn(H)
        if variant == "adagrad":
            v = v + gr * gr
            H = H - gamma * gr / np.sqrt(v + eps)
        elif variant == "rmsprop":
            v = beta * v + (1 - beta) * gr * gr
            H = H - gamma * gr / np.sqrt(v + eps)
        else:
            m = beta1 * m + (1 - beta1) * gr
            v = beta2 * v + (1 - beta2) * gr * gr
            H = H - gamma * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        H = prox.apply(H, gamma)
        out.append(H)
    return out


def test_criterion_10_adaptive_match_textbook(criterion):
    worst, runs = 0.0, 0
    for e, v in PAIRS:
        if v not in ("adagrad", "rmsprop", "adam"):
            continue
        for t in range(3):
            inst = random_instance(e, _trial_rng(10, f"{e}+{v}", t))
            algo = make_algo(inst, v)
            ref = textbook_steps(v, inst.H, lambda H: full_gradient_dense(inst.energy, inst.g, H, inst.X),
                                 inst.prox, inst.gamma, 20)
            H, S = inst.H, HiddenState.zeros(algo, inst.H.shape)
            for k in range(20):
                H, S = step(algo, inst.energy, inst.g, H, S, inst.X)
                worst = max(worst, float(np.max(np.abs(H - ref[k]))))
            runs += 1
    assert criterion(10, worst <= 1e-12, f"adagrad/rmsprop/adam vs textbook on the dense gradient, "
                                         f"{runs} runs x 20 steps, max error {worst:.3e} (tol 1e-12)")


def test_criterion_11_outliers(criterion):
    ratios = []
    for seed in range(3):
        fx = planted_corruption(seed=seed)
        H, _ = unroll(DescentAlgorithm("gd", 0.1), HuberFidelity(), fx.graph, fx.X, fx.X, 100)
        ratios.append(detect_outliers(H, fx.X, {}, 0.2, fx.corrupted).detect_ratio)
    assert criterion(11, min(ratios) >= 80.0, f"huber detect ratio {ratios} (min 80)")


def test_criterion_12_kge(criterion):
    kg = block_kg(seed=0)
    neg = build_negative_graph(kg.train_graph(), 1, seed=0)
    res = train_kge(neg, "distmult", KgeConfig(epochs=50))
    hist = res.history
    decreasing = len(hist) == 50 and all(b < a for a, b in zip(hist, hist[1:]))
    H = kge_loss_and_grad(res.model, neg)[2]
    inf = inductive_infer(H, res.model.E, kg.num_rel, kg.new_nodes, kg.support, kg.queries,
                          L=3, gamma=0.5, k=10, known_triplets=kg.train)
    rng = np.random.default_rng(12)
    inst = Instance(KgeBce(neg.num_rel, "distmult", {"E": res.model.E}), neg.graph,
                    rng.normal(size=H.shape), None, Identity(), 0.5)
    orc = oracle_error(inst, DescentAlgorithm("gd", 0.5), HiddenState())
    ok = decreasing and inf.hits > 10 / kg.n and orc <= 1e-12
    assert criterion(12, ok, f"kge loss strictly decreasing over 50 epochs: {decreasing}, "
                             f"hits@10 {inf.hits:.3f} (random {10 / kg.n:.3f}), "
                             f"negative-graph oracle {orc:.3e} (tol 1e-12)")


def _data_dir(var):
    p = os.environ.get(var)
    return Path(p) if p and Path(p).is_dir() else None


@pytest.mark.parametrize("name,var,lp_ref,gr_ref", [
    ("cora", "UNROLLGNN_CORA_DIR", 70.2, 60.4),
    ("citeseer", "UNROLLGNN_CITESEER_DIR", 50.2, 64.1),
])
def test_criterion_13_real_data(name, var, lp_ref, gr_ref, criterion):
    d = _data_dir(var)
    if d is None:
        pytest.skip(f"criterion 13 ({name}): set {var} to a dataset directory")
    from unrollgnn.cli import load_planetoid_like
    data = load_planetoid_like(d)
    test = (data.test if data.test.any() else ~data.train) & data.labels.mask
    Ybar = data.labels.restrict(data.train).masked_onehot()
    lp = label_propagate(data.graph, Ybar, data.train, LpConfig(L=50, mode="standard"))
    lp_acc = 100 * np.mean(lp.pred[test] == data.labels.labels[test])
    gr = gr_mlp_train(data.graph, data.X, Ybar, 1.0, 0.1, 100)
    gr_acc = 100 * np.mean(predict(gr.H_prox[-1])[test] == data.labels.labels[test])
    ok = abs(lp_acc - lp_ref) <= 1.5 and abs(gr_acc - gr_ref) <= 2.0
    detail = f"{name}: lp {lp_acc:.1f} (ref {lp_ref} +-1.5), grmlp {gr_acc:.1f} (ref {gr_ref} +-2)"
    if name == "cora":
        accs = {}
        for v in ("gd", "momentum"):
            model = init_model(QuadraticSmooth(), DescentAlgorithm(v, 0.2), data.X.shape[1], 64,
                               data.labels.num_classes, 8, hidden=64)
            out = train(model, data.graph, data.X, data.labels, data.train, data.val,
                        TrainConfig(epochs=200, lr=0.01, L=8))
            logits = forward(out.model, data.graph, data.X, Ybar, data.train).logits
            accs[v] = 100 * accuracy(logits, data.labels.labels, test)
        ok = ok and accs["momentum"] >= accs["gd"] - 2.0
        detail += f", momentum {accs['momentum']:.1f} vs gd {accs['gd']:.1f} (within 2)"
    assert criterion(13, ok, detail)
