import numpy as np
import pytest

from unrollgnn.conformance import (CHECKS, TOLERANCES, _trial_rng, built_in_pairings,
                                   check_nonlinear_rho_counterexample, check_pairing,
                                   make_algo, oracle_error, random_instance, random_state,
                                   report_text, verify_all)
from unrollgnn.descent import VARIANTS, step
from unrollgnn.energy import ENERGY_NAMES


def test_pairing_inventory():
    pairs = built_in_pairings()
    assert len(pairs) == 49
    assert {e for e, _ in pairs} == set(ENERGY_NAMES)
    # a whole-H projection only admits unscaled steps
    assert {v for e, v in pairs if e == "grmlp"} == {"prox", "momentum"}
    assert ("lp", "gd") not in pairs and ("quadratic", "gd") in pairs
    assert {v for _, v in pairs} == set(VARIANTS)


def test_quadratic_gd_passes_all_checks():
    rep = check_pairing("quadratic", "gd", trials=2, seed=0)
    assert rep.passed
    assert [r.check for r in rep.results] == list(CHECKS)
    assert all(r.max_error <= 1e-12 for r in rep.results if r.check != "finite-diff")


def test_lp_prox_passes_and_clamps():
    rep = check_pairing("lp", "prox", trials=2, seed=0)
    assert rep.passed
    rng = _trial_rng(0, "lp+prox", 0)
    inst = random_instance("lp", rng)
    algo = make_algo(inst, "prox")
    H2, _ = step(algo, inst.energy, inst.g, inst.H, random_state(algo, inst.H.shape, rng), inst.X)
    m = inst.prox.mask
    np.testing.assert_array_equal(H2[m], inst.prox.Ybar[m])


def test_sign_flip_fault_detected():
    rep = check_pairing("quadratic", "gd", trials=2, seed=0, checks=("oracle",), fault="sign_flip")
    assert not rep.passed
    assert rep.results[0].failing_trial == 0


def test_sign_flip_error_is_twice_aggregate():
    from unrollgnn import autodiff as ad
    from unrollgnn.energy import aggregate, edge_messages
    from unrollgnn.descent import HiddenState
    rng = np.random.default_rng(0)
    inst = random_instance("quadratic", rng)
    algo = make_algo(inst, "gd")
    a = ad.value(aggregate(inst.g, edge_messages(inst.energy, inst.g, inst.H)))
    err = oracle_error(inst, algo, HiddenState(), fault=True)
    assert err == pytest.approx(2 * np.max(np.abs(a)), rel=1e-9)


@pytest.mark.parametrize("energy,variant", [("nbf", "adam"), ("kge", "rmsprop"),
                                            ("grmlp", "momentum"), ("heterophily", "adagrad")])
def test_selected_pairings_pass(energy, variant):
    assert check_pairing(energy, variant, trials=2, seed=3).passed


def test_report_reproducible_and_formatted():
    a = report_text([check_pairing("huber", "adam", trials=1, seed=5)])
    b = report_text([check_pairing("huber", "adam", trials=1, seed=5)])
    assert a == b
    lines = a.splitlines()
    assert lines[0] == "pairing,check,max_error,tolerance,status"
    assert len(lines) == 1 + len(CHECKS)
    for ln in lines[1:]:
        pid, check, err, tol, status = ln.split(",")
        assert pid == "huber+adam" and check in CHECKS and status in ("pass", "fail")
        assert float(tol) == TOLERANCES[check]


def test_verify_all_parallel_matches_serial():
    serial = report_text(verify_all(seed=1, trials=1, workers=1, checks=("oracle", "permutation")))
    threaded = report_text(verify_all(seed=1, trials=1, workers=4, checks=("oracle", "permutation")))
    assert serial == threaded


def test_trials_validated():
    with pytest.raises(ValueError):
        check_pairing("quadratic", "gd", trials=0)


def test_outer_nonlinearity_breaks_locality():
    demo = {d.rho: d for d in check_nonlinear_rho_counterexample()}
    assert demo["square"].change > 1e-3
    assert demo["linear"].change == 0.0
    assert demo["identity"].change == 0.0
    assert demo["identity"].matches_energy
