from dataclasses import replace

import numpy as np
import pytest

from sparsefeed.diagnostics import reference_quadratic
from sparsefeed.objectives import QuadraticProblem, make_nonconvex
from sparsefeed.optimizers import HyperParams, SgdEfState
from sparsefeed.simulator import (
    ShadowIdentityError,
    Shadow,
    StageRecord,
    attach_shadow,
    build_problem,
    comm_cost_per_round,
    default_log_every,
    initial_point,
    run_experiment,
    run_method,
)
from sparsefeed.streams import RngProvider

from test_optimizers import FixedStreams, unit_gradient_problem

HP = HyperParams(eta=0.1, k=5, mu_hint=0.01)


def traces_equal(a, b):
    if len(a.records) != len(b.records):
        return False
    same = all(ra == rb for ra, rb in zip(a.records, b.records))
    return same and all(np.array_equal(a.iterates[t], b.iterates[t]) for t in a.iterates)


def test_zero_rounds_gives_initial_record_only(quad_cfg):
    tr = run_experiment(replace(quad_cfg, T=0))
    assert len(tr.records) == 1 and tr.records[0].t == 0
    assert tr.records[0].comm_raw_cum == 0


@pytest.mark.parametrize("method", ["s_sgd_ef", "s_snag_ef", "naive_sparse", "parallel_sgd", "topk_ef", "snag"])
def test_same_seed_same_trace(method):
    prob = reference_quadratic()
    a = run_method(method, prob, np.ones(50), HP, RngProvider(3), T=60, log_every=7)
    b = run_method(method, prob, np.ones(50), HP, RngProvider(3), T=60, log_every=7)
    assert traces_equal(a, b)
    c = run_method(method, prob, np.ones(50), HP, RngProvider(4), T=60, log_every=7)
    assert not traces_equal(a, c)


@pytest.mark.parametrize("method", ["s_sgd_ef", "s_snag_ef"])
def test_worker_order_does_not_matter(method):
    prob = reference_quadratic()
    order = [5, 2, 7, 0, 1, 6, 3, 4]
    a = run_method(method, prob, np.ones(50), HP, RngProvider(8), T=50, log_every=1, store_iterates="all")
    b = run_method(method, prob, np.ones(50), HP, RngProvider(8), T=50, log_every=1, store_iterates="all",
                   worker_order=order)
    assert traces_equal(a, b)


def test_logging_cadence_and_final_record():
    prob = reference_quadratic()
    tr = run_method("s_sgd_ef", prob, np.zeros(50), HP, T=23, log_every=5)
    assert [r.t for r in tr.records] == [0, 5, 10, 15, 20, 23]
    assert sorted(tr.iterates) == [0, 5, 10, 15, 20, 23]
    assert default_log_every(100) == 1 and default_log_every(5000) == 10
    cum = tr.column("comm_raw_cum")
    assert np.all(np.diff(cum) >= 0)


def test_store_iterates_modes():
    prob = reference_quadratic()
    tr = run_method("s_sgd_ef", prob, np.zeros(50), HP, T=10, log_every=5, store_iterates="all")
    assert sorted(tr.iterates) == list(range(11))
    tr = run_method("s_sgd_ef", prob, np.zeros(50), HP, T=10, log_every=5, store_iterates="none")
    assert sorted(tr.iterates) == [0]


def test_stop_when_ends_early():
    prob = reference_quadratic()
    tr = run_method("parallel_sgd", prob, np.ones(50), HP, T=500, log_every=1, stop_when=lambda r: r.t >= 17)
    assert tr.final.t == 17


def test_run_method_errors():
    prob = reference_quadratic()
    with pytest.raises(ValueError):
        run_method("sgd", prob, np.zeros(50), HP, T=1)
    with pytest.raises(ValueError):
        run_method("s_sgd_ef", prob, np.zeros(3), HP, T=1)
    with pytest.raises(ValueError):
        run_method("parallel_sgd", prob, np.zeros(50), HP, T=1, shadow=True)
    with pytest.raises(ValueError):
        run_method("s_snag_ef", prob, np.zeros(50), HyperParams(eta=0.1, k=5), T=1)


# --- communication meter -------------------------------------------------------------------------

def test_comm_cost_closed_forms():
    assert comm_cost_per_round("s_sgd_ef", 100, 100, 10) == (1000, 100)
    assert comm_cost_per_round("s_sgd_ef", 1, 100, 10) == (10, 10)
    assert comm_cost_per_round("s_snag_ef", 10, 100, 4) == comm_cost_per_round("s_sgd_ef", 10, 100, 4)
    assert comm_cost_per_round("parallel_sgd", 3, 100, 4) == (400, 100)


@pytest.mark.parametrize("method,k", [("s_sgd_ef", 5), ("s_snag_ef", 5), ("s_snag_ef", 10), ("naive_sparse", 1),
                                      ("topk_ef", 7), ("s_sgd_ef", 50)])
def test_meter_matches_closed_form(method, k):
    prob = reference_quadratic()
    T = 30
    tr = run_method(method, prob, np.zeros(50), replace(HP, k=k), T=T, log_every=1)
    raw, capped = comm_cost_per_round(method, k, 50, prob.P)
    assert tr.final.comm_raw_cum == T * prob.P * min(k, 50) == T * raw
    assert tr.final.comm_capped_cum == T * capped
    assert all(r.comm_raw == raw for r in tr.records[1:])


# --- shadow --------------------------------------------------------------------------------------

def test_shadow_starts_at_initial_iterate():
    state = SgdEfState.initial(np.arange(3.0), 2)
    sh = attach_shadow(state)
    assert np.array_equal(sh.x, state.x)
    assert sh.check(state) == 0.0


def test_shadow_after_hand_round():
    from sparsefeed.optimizers import s_sgd_ef_round

    prob = unit_gradient_problem()
    hp = HyperParams(eta=0.1, k=1, gamma=0.5)
    state = SgdEfState.initial(np.zeros(2), 1)
    sh = Shadow(state)
    state, info = s_sgd_ef_round(prob, state, hp, FixedStreams(subset_y=0.1))
    sh.update(info, hp)
    assert np.allclose(sh.x, [-0.1, -0.1], atol=1e-15)
    assert np.allclose(state.x - sh.x, [-0.1, 0.1], atol=1e-15)
    assert sh.check(state) < 1e-12


@pytest.mark.parametrize("method", ["s_sgd_ef", "s_snag_ef", "topk_ef"])
def test_shadow_identity_over_long_run(method):
    tr = run_method(method, reference_quadratic(), np.zeros(50), HP, RngProvider(7), T=300, shadow=True)
    assert tr.shadow_max_rel_err <= 1e-9


def test_shadow_equals_real_path_when_uncompressed():
    prob = reference_quadratic()
    tr = run_method("s_sgd_ef", prob, np.zeros(50), replace(HP, k=50), RngProvider(1), T=50, shadow=True)
    assert tr.shadow_max_rel_err == 0.0


def test_shadow_detects_corrupted_memory():
    prob = reference_quadratic()
    state = SgdEfState.initial(np.zeros(50), prob.P)
    sh = attach_shadow(state)
    state.mem[0, 0] = 1.0
    with pytest.raises(ShadowIdentityError):
        sh.check(state)


# --- regularized wrapper telemetry ---------------------------------------------------------------

def test_descent_telemetry_in_control_run():
    prob = make_nonconvex(10, 8, 2, 1)
    hp = HyperParams(eta=1e-2, k=10, sigma=prob.L, S=8, T=60, full_batch=True, full_precision=True)
    tr = run_method("reg_s_snag_ef", prob, np.full(10, 0.4), hp, T=60)
    assert len(tr.stages) == 8
    assert all(s.descent_ok for s in tr.stages)
    assert tr.stages[-1].grad_norm_sq < tr.stages[0].grad_norm_sq


def test_stage_record_slack():
    assert StageRecord(1, 0.0, 1.0, 0.0, 1.0, 1.0).descent_ok
    assert not StageRecord(1, 0.0, 1.1, 0.0, 1.1, 1.0).descent_ok
    assert StageRecord(1, 0.0, 1.1, 0.0, 1.1, 1.0, slack=0.2).descent_ok


# --- configured experiments ----------------------------------------------------------------------

def test_run_experiment_is_deterministic(quad_cfg):
    assert traces_equal(run_experiment(quad_cfg), run_experiment(quad_cfg))
    assert not traces_equal(run_experiment(quad_cfg), run_experiment(quad_cfg, seed=6))


def test_initial_point(quad_cfg):
    assert np.array_equal(initial_point(replace(quad_cfg, x0_scale=0.0), 4, 1), np.zeros(4))
    a = initial_point(quad_cfg, 4, 1)
    assert np.array_equal(a, initial_point(quad_cfg, 4, 1))
    assert not np.array_equal(a, initial_point(quad_cfg, 4, 2))


def test_build_problem_kinds(quad_cfg):
    prob, hook = build_problem(quad_cfg)
    assert isinstance(prob, QuadraticProblem) and hook is None
    assert prob.d == 12 and prob.P == 4
    blobs = replace(quad_cfg, problem=replace(quad_cfg.problem, kind="logreg", n_samples=200, n_features=5,
                                              n_classes=3))
    prob, hook = build_problem(blobs)
    assert prob.d == 15 and sum(prob.sizes) == 160
    metrics = hook(np.zeros(prob.d))
    assert set(metrics) == {"data_loss", "train_acc", "test_loss", "test_acc"}
    assert metrics["test_loss"] == pytest.approx(np.log(3))


@pytest.mark.parametrize("variant", [dict(z_correction="y_memory"), dict(y_anchor="y"), dict(with_replacement=True)])
def test_shadow_identity_holds_for_variants(variant):
    hp = replace(HP, **variant)
    tr = run_method("s_snag_ef", reference_quadratic(), np.zeros(50), hp, RngProvider(2), T=200, shadow=True)
    assert tr.shadow_max_rel_err <= 1e-9
