from dataclasses import replace

import numpy as np
import pytest

from sparsefeed.compression import densify, top_k
from sparsefeed.diagnostics import (
    check_memory_bound,
    check_memory_orthogonality,
    check_memory_plateau,
    check_nag_equivalence,
    check_second_moment,
    check_shadow_identity,
    check_subset_uniformity,
    check_unbiasedness,
    memory_norm_curve,
    plateau_stats,
    precondition_ok,
    reference_quadratic,
    run_suite,
)
from sparsefeed.objectives import make_quadratic
from sparsefeed.optimizers import HyperParams, schedule_accel_params
from sparsefeed.simulator import run_method

SKEWED = np.array([5.0, -1.0, 0.5, 0.25, 3.0])


def test_unbiasedness_full_k_has_zero_deviation(rng):
    rep = check_unbiasedness(SKEWED, 5, 10_000, rng)
    assert rep.passed and rep.statistic == 0.0


def test_unbiasedness_passes_for_rand_comp(rng):
    rep = check_unbiasedness(SKEWED, 2, 100_000, rng)
    assert rep.passed, rep.line()


def test_top_k_bias_by_enumeration_and_check(rng):
    x = np.array([3.0, 1.0, 0.5])
    # deterministic compressor: its "mean" is the single output, which differs from x
    assert not np.allclose(densify(top_k(x, 1)), x)
    rep = check_unbiasedness(x, 1, 10_000, rng, compressor="topk")
    assert not rep.passed and rep.details


def test_subset_uniformity(rng):
    rep = check_subset_uniformity(5, 2, 100_000, rng)
    assert rep.passed, rep.line()
    assert rep.data["counts"].sum() == 100_000


def test_second_moment_examples(rng):
    rep = check_second_moment(np.array([1.0, 2.0, 3.0, 4.0]), 4)
    assert rep.passed and rep.statistic == 0.0
    rep = check_second_moment(np.array([1.0, 2.0, 3.0, 4.0]), 2)
    assert rep.passed and rep.n_trials == 6
    x = rng.standard_normal(100)
    rep = check_second_moment(x, 10, 20_000, rng)
    assert rep.passed and "mc" in rep.name


def test_orthogonality_round_zero_is_exact():
    prob = reference_quadratic(P=2)
    rep = check_memory_orthogonality("s_sgd_ef", prob, HyperParams(eta=0.1, k=5), rounds=(0,), trials=20)
    assert rep.passed and rep.statistic == 0.0


@pytest.mark.parametrize("method", ["s_sgd_ef", "s_snag_ef"])
def test_orthogonality_two_workers(method):
    prob = reference_quadratic(P=2)
    hp = HyperParams(eta=0.1, k=5, mu_hint=0.01)
    rep = check_memory_orthogonality(method, prob, hp, rounds=(5,), trials=2000, seed=1)
    assert rep.passed, rep.line()
    kinds = {kind for _, kind in rep.data["z"]}
    assert kinds == ({"m", "m_y", "m_z"} if method == "s_snag_ef" else {"m"})


def test_orthogonality_is_deterministic_in_seed():
    prob = reference_quadratic(P=2)
    hp = HyperParams(eta=0.1, k=5)
    a = check_memory_orthogonality("s_sgd_ef", prob, hp, rounds=(3,), trials=50, seed=4)
    b = check_memory_orthogonality("s_sgd_ef", prob, hp, rounds=(3,), trials=50, seed=4)
    assert a.statistic == b.statistic


def test_plateau_stats_on_known_curves():
    level, growth = plateau_stats(np.ones(100))
    assert level == 1.0 and growth == 0.0
    _, growth = plateau_stats(np.arange(1.0, 101.0))
    assert growth == pytest.approx(88 / 63 - 1, rel=1e-12)


def test_full_k_memory_plateau_is_zero():
    prob = reference_quadratic(P=4, n_per_worker=4)
    curve = memory_norm_curve("s_sgd_ef", prob, HyperParams(eta=0.05, k=50), rounds=20, trials=3)
    assert not curve.any()


def test_gamma_zero_memory_keeps_growing():
    pool = reference_quadratic(P=1, n_per_worker=64)
    hp = HyperParams(eta=0.01, k=5, gamma=0.0)
    rep = check_memory_plateau("s_sgd_ef", pool, hp, rounds=60, trials=60, x0=pool.optimum[0])
    assert not rep.passed and rep.statistic > 0.2


@pytest.mark.slow
def test_memory_bound_small():
    pool = reference_quadratic(P=16, n_per_worker=4)
    rep = check_memory_bound("s_sgd_ef", pool, HyperParams(eta=0.01, k=5), rounds=60, trials=150,
                             x0=pool.optimum[0])
    assert rep.passed, rep.line()


def test_accelerated_bound_precondition_reported():
    ok, beta, bound = precondition_ok(HyperParams(eta=0.1, k=5, mu_hint=0.01), 50)
    assert ok and beta <= bound
    hp = HyperParams(eta=0.1, k=5, gamma=0.001, mu_hint=0.01)
    ok, beta, bound = precondition_ok(hp, 50)
    assert not ok and beta > bound
    rep = check_memory_bound("s_snag_ef", reference_quadratic(), hp)
    assert not rep.passed and rep.n_trials == 0 and "precondition" in rep.details


def test_nag_equivalence_one_step_by_hand():
    prob = make_quadratic(2, 1.0, 0.1, 1, 1, 3)
    eta, mu = 0.5, 0.1
    lam, alpha, beta = schedule_accel_params(eta, mu)
    x0 = np.ones(2)
    g = prob.full_grad(x0)
    hp = HyperParams(eta=eta, k=2, lam=lam, alpha=alpha, beta=beta, full_batch=True, full_precision=True)
    tr = run_method("nag", prob, x0, hp, T=1, log_every=1)
    assert np.allclose(tr.iterates[1], x0 - ((1 - alpha) * eta + alpha * lam) * g, rtol=1e-14)
    assert check_nag_equivalence(prob, eta, mu, T=100).passed


def test_nag_equivalence_frozen_for_tiny_step():
    prob = make_quadratic(2, 1.0, 0.1, 1, 1, 3)
    rep = check_nag_equivalence(prob, 1e-300, 0.1, T=5)
    assert rep.passed and rep.statistic == 0.0


def test_shadow_identity_check_report():
    rep = check_shadow_identity("s_snag_ef", reference_quadratic(), HyperParams(eta=0.1, k=5, mu_hint=0.01), T=100)
    assert rep.passed and rep.statistic <= 1e-9


def test_fast_suite_behaves_as_expected():
    results = run_suite("fast", seed=0)
    for report, expected in results:
        assert report.passed == expected, report.line()
        if not report.passed:
            assert report.details
    assert any(not expected for _, expected in results)
    with pytest.raises(ValueError):
        run_suite("medium")
