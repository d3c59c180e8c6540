"""Statistical and exact checks of the compressor and error-feedback invariants.

Each check returns a :class:`CheckReport`. Randomized checks use z-scores of
sample means against their exact expectations; exact checks compare against a
relative tolerance.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .compression import densify, rand_comp, top_k
from .objectives import make_quadratic
from .optimizers import HyperParams, nag_momentum_form, schedule_accel_params
from .simulator import (
    ShadowIdentityError,
    average_memory,
    initial_state,
    prepare_hp,
    round_fn,
    run_method,
)
from .streams import RngProvider, stream_key


@dataclass
class CheckReport:
    name: str
    passed: bool
    statistic: float
    threshold: float
    n_trials: int
    details: str = ""
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: statistic={self.statistic:.4g} threshold={self.threshold:.4g} ({self.details})"


def reference_quadratic(d=50, P=8, n_per_worker=16, L=1.0, mu=0.01, seed=7, **kw):
    """The default quadratic used by the validation suite."""
    return make_quadratic(d, L, mu, n_per_worker, P, seed, **kw)


def _zscores(total, total_sq, n, target):
    """|mean - target| / standard error, coordinatewise.

    Coordinates with zero sample spread get z = 0 when the mean equals the
    target up to rounding and z = inf otherwise (a deterministic bias).
    """
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    se = np.sqrt(var / n)
    dev = np.abs(mean - target)
    scale = 1e-12 * np.maximum(np.abs(target), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > scale, dev / np.where(se > 0, se, 1.0), np.where(dev <= scale, 0.0, np.inf))
    return z, mean


def _compressor(kind, k, replace_draws=False):
    if callable(kind):
        return kind
    if kind == "rand":
        return lambda v, rng: rand_comp(v, k, rng, replace=replace_draws)
    if kind == "topk":
        return lambda v, rng: top_k(v, k)
    raise ValueError(f"unknown compressor {kind!r}")


def check_unbiasedness(x, k, trials=100_000, rng=None, compressor="rand", z_max=4.0, replace_draws=False):
    """Sample mean of the densified message against ``x``, every coordinate at ``z_max`` sigma."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    comp = _compressor(compressor, k, replace_draws)
    total = np.zeros_like(x)
    total_sq = np.zeros_like(x)
    for _ in range(trials):
        v = densify(comp(x, rng))
        total += v
        total_sq += v * v
    z, mean = _zscores(total, total_sq, trials, x)
    worst = int(np.argmax(z))
    name = f"unbiasedness[{compressor if isinstance(compressor, str) else 'custom'}, d={len(x)}, k={k}]"
    return CheckReport(
        name, bool(z[worst] <= z_max), float(z[worst]), z_max, trials,
        f"worst coordinate {worst}: mean {mean[worst]:.6g} vs {x[worst]:.6g}",
        {"z": z, "mean": mean},
    )


def check_subset_uniformity(d, k, trials=100_000, rng=None, z_max=4.0):
    """Frequency of every size-k subset against 1 / C(d, k)."""
    rng = np.random.default_rng(0) if rng is None else rng
    subsets = list(itertools.combinations(range(d), k))
    if len(subsets) > 10_000:
        raise ValueError("too many subsets to tabulate; use a smaller d or k")
    slot = {s: i for i, s in enumerate(subsets)}
    counts = np.zeros(len(subsets))
    probe = np.arange(1.0, d + 1.0)
    for _ in range(trials):
        counts[slot[tuple(rand_comp(probe, k, rng).indices.tolist())]] += 1
    p = 1.0 / len(subsets)
    expected = trials * p
    z = np.abs(counts - expected) / math.sqrt(trials * p * (1 - p)) if len(subsets) > 1 else np.zeros(1)
    worst = int(np.argmax(z))
    return CheckReport(
        f"subset-uniformity[d={d}, k={k}]", bool(z[worst] <= z_max), float(z[worst]), z_max, trials,
        f"{len(subsets)} subsets, worst {subsets[worst]} seen {int(counts[worst])} times vs {expected:.1f}",
        {"counts": counts},
    )


def second_moment_exact(x, k) -> float:
    """E||densify(rand_comp(x, k)) - x||^2 by enumerating every subset."""
    x = np.asarray(x, dtype=np.float64)
    d = len(x)
    total = 0.0
    n = 0
    for subset in itertools.combinations(range(d), k):
        err = densify(rand_comp(x, k, subset=subset)) - x
        total += float(err @ err)
        n += 1
    return total / n


def check_second_moment(x, k, trials=100_000, rng=None, exhaustive_max_d=6, rtol=1e-12, z_max=3.0):
    """Compression error second moment against ``(d/k - 1) ||x||^2``.

    Exhaustive (exact, ``rtol``) for ``d <= exhaustive_max_d``, Monte Carlo at ``z_max`` sigma otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    d = len(x)
    target = (d / k - 1.0) * float(x @ x)
    if d <= exhaustive_max_d:
        got = second_moment_exact(x, k)
        err = abs(got - target) / max(abs(target), 1e-300) if target else abs(got)
        return CheckReport(
            f"second-moment-exact[d={d}, k={k}]", bool(err <= rtol), err, rtol, math.comb(d, k),
            f"enumerated {got!r} vs {target!r}",
        )
    rng = np.random.default_rng(0) if rng is None else rng
    samples = np.empty(trials)
    for i in range(trials):
        err = densify(rand_comp(x, k, rng)) - x
        samples[i] = err @ err
    z, mean = _zscores(np.array([samples.sum()]), np.array([samples @ samples]), trials, np.array([target]))
    return CheckReport(
        f"second-moment-mc[d={d}, k={k}]", bool(z[0] <= z_max), float(z[0]), z_max, trials,
        f"sample mean {mean[0]:.6g} vs {target:.6g}",
    )


def _trial_states(method, problem, hp, rounds, trials, seed, x0, collect):
    """Run ``trials`` independent copies for max(rounds) rounds; ``collect(state)`` at each listed round."""
    hp = prepare_hp(method, hp, problem.d)
    step = round_fn(method)
    x0 = np.zeros(problem.d) if x0 is None else np.asarray(x0, dtype=np.float64)
    wanted = sorted(set(rounds))
    out = {t: [] for t in wanted}
    for trial in range(trials):
        rngs = RngProvider(stream_key(seed, trial))
        state = initial_state(method, x0, problem.P)
        if 0 in out:
            out[0].append(collect(state))
        for _ in range(wanted[-1]):
            state, _info = step(problem, state, hp, rngs)
            if state.t in out:
                out[state.t].append(collect(state))
    return {t: np.array(v) for t, v in out.items()}


def check_memory_orthogonality(method, problem, hp: HyperParams, rounds=(1, 5, 20), trials=2000, seed=0,
                               x0=None, workers=(0, 1), z_max=4.0):
    """Zero-mean test of the inner product between two workers' memories.

    For the accelerated method the y and z memories are tested too.
    """
    p1, p2 = workers
    accelerated = method in ("s_snag_ef", "snag")
    kinds = ("m", "m_y", "m_z") if accelerated else ("m",)

    def collect(state):
        mems = [state.mem] + ([state.mem_y, state.mem_z] if accelerated else [])
        return [float(m[p1] @ m[p2]) for m in mems]

    samples = _trial_states(method, problem, hp, rounds, trials, seed, x0, collect)
    worst, where, zs = 0.0, "", {}
    for t, vals in samples.items():
        z, mean = _zscores(vals.sum(axis=0), (vals * vals).sum(axis=0), trials, np.zeros(vals.shape[1]))
        for kind, zi, mi in zip(kinds, z, mean):
            zs[(t, kind)] = float(zi)
            if zi >= worst:
                worst, where = float(zi), f"t={t} {kind}: mean {mi:.3e}"
    return CheckReport(
        f"memory-orthogonality[{method}, P={problem.P}, workers {p1},{p2}]", bool(worst <= z_max), worst, z_max,
        trials, f"worst at {where}", {"z": zs},
    )


def memory_norm_curve(method, problem, hp: HyperParams, rounds: int, trials: int, seed=0, x0=None):
    """Trial average of ||averaged memory||^2 for rounds 1..rounds."""
    samples = _trial_states(method, problem, hp, range(1, rounds + 1), trials, seed, x0,
                            lambda s: float(np.sum(average_memory(s.mem) ** 2)))
    return np.array([samples[t].mean() for t in range(1, rounds + 1)])


def plateau_stats(curve):
    """(plateau level, relative growth) of a memory-norm curve.

    The level is the mean over the last quarter of rounds; growth compares it to
    the third quarter. A linearly growing curve gives growth near 0.4.
    """
    n = len(curve)
    q = max(n // 4, 1)
    last = float(np.mean(curve[n - q:]))
    third = float(np.mean(curve[n - 2 * q:n - q]))
    return last, (last / third - 1.0) if third > 0 else math.inf


def check_memory_plateau(method, problem, hp: HyperParams, rounds=100, trials=200, seed=0, x0=None,
                         growth_tol=0.1):
    """The averaged memory norm stops growing: last-quarter mean within ``growth_tol`` of the third quarter."""
    curve = memory_norm_curve(method, problem, hp, rounds, trials, seed, x0)
    level, growth = plateau_stats(curve)
    return CheckReport(
        f"memory-plateau[{method}, P={problem.P}, gamma={hp.gamma}]", bool(growth <= growth_tol), growth,
        growth_tol, trials, f"plateau {level:.4g}", {"curve": curve},
    )


def precondition_ok(hp: HyperParams, d: int):
    """beta <= gamma^3 / alpha^2, needed for the accelerated memory bound."""
    r = hp.resolve(d, accelerated=True)
    bound = r.gamma ** 3 / r.alpha ** 2
    return r.beta <= bound, r.beta, bound


def check_memory_bound(method, problem, hp: HyperParams, rounds=100, trials=500, seed=0, x0=None,
                       P_values=(1, 16), growth_tol=0.1):
    """Memory plateaus for each worker count and its level scales like 1/P.

    ``problem`` must support ``repartition(P)`` so every worker count sees the
    same sample pool. The plateau ratio must fall within a factor 2 of the
    ratio of worker counts, i.e. [1/32, 1/8] for P = 1 versus 16.
    """
    if method in ("s_snag_ef",):
        ok, beta, bound = precondition_ok(hp, problem.d)
        if not ok:
            return CheckReport(f"memory-bound[{method}]", False, beta, bound, 0,
                               f"precondition beta={beta:.3g} > gamma^3/alpha^2={bound:.3g}; not run")
    lo_P, hi_P = P_values
    levels, details, curves = {}, [], {}
    plateaued = True
    for P in P_values:
        rep = check_memory_plateau(method, problem.repartition(P), hp, rounds, trials, seed, x0, growth_tol)
        levels[P] = float(np.mean(rep.data["curve"][-max(rounds // 4, 1):]))
        curves[P] = rep.data["curve"]
        plateaued &= rep.passed
        details.append(f"P={P}: plateau {levels[P]:.4g}, growth {rep.statistic:.3g}")
    ratio = levels[hi_P] / levels[lo_P]
    band = (lo_P / hi_P / 2.0, 2.0 * lo_P / hi_P)
    in_band = band[0] <= ratio <= band[1]
    details.append(f"ratio {ratio:.4g} in [{band[0]:.4g}, {band[1]:.4g}]: {in_band}")
    return CheckReport(
        f"memory-bound[{method}, P={lo_P} vs {hi_P}]", bool(plateaued and in_band), ratio, band[1], trials,
        "; ".join(details), {"curves": curves, "band": band, "levels": levels},
    )


def check_nag_equivalence(problem, eta, mu, T=100, x0=None, rtol=1e-8):
    """Three-sequence Nesterov recursion against its single-sequence momentum form."""
    lam, alpha, beta = schedule_accel_params(eta, mu)
    hp = HyperParams(eta=eta, k=problem.d, lam=lam, alpha=alpha, beta=beta, mu_hint=mu, full_batch=True,
                     full_precision=True)
    x0 = np.ones(problem.d) if x0 is None else np.asarray(x0, dtype=np.float64)
    trace = run_method("nag", problem, x0, hp, T=T, log_every=1, store_iterates="all")
    ref = nag_momentum_form(problem.full_grad, x0, eta, lam, alpha, beta, T)
    errs = []
    for t, xt in enumerate(trace.iterate_list()):
        errs.append(float(np.linalg.norm(xt - ref[t])) / max(float(np.linalg.norm(ref[t])), 1e-300))
    worst = max(errs)
    return CheckReport("nag-momentum-equivalence", bool(worst <= rtol), worst, rtol, 1, f"{T} steps")


def check_shadow_identity(method, problem, hp: HyperParams, T=1000, seed=7, x0=None, tol=1e-9):
    """Memory equals real minus shadow iterate every round, to relative ``tol``."""
    x0 = np.zeros(problem.d) if x0 is None else x0
    try:
        trace = run_method(method, problem, x0, hp, RngProvider(seed), T=T, shadow=True, shadow_tol=tol,
                           store_iterates="none")
    except ShadowIdentityError as exc:
        return CheckReport(f"shadow-identity[{method}]", False, math.inf, tol, 1, str(exc))
    err = trace.shadow_max_rel_err
    return CheckReport(f"shadow-identity[{method}]", bool(err <= tol), err, tol, 1, f"{T} rounds")


def check_reduction(kind, problem, hp: HyperParams, T=500, seed=0, x0=None):
    """Bitwise equality of a method against the uncompressed method it must reduce to.

    ``kind``: 's_sgd_ef' or 'topk_ef' with k = d against parallel SGD, or
    's_snag_ef' in full-precision full-batch mode against Nesterov.
    """
    x0 = np.zeros(problem.d) if x0 is None else x0
    d = problem.d
    if kind in ("s_sgd_ef", "topk_ef"):
        hp = replace(hp, k=d)
        ref_method = "parallel_sgd"
    elif kind == "s_snag_ef":
        hp = replace(hp, full_batch=True, full_precision=True)
        ref_method = "nag"
    else:
        raise ValueError(f"no reduction defined for {kind!r}")
    a = run_method(kind, problem, x0, hp, RngProvider(seed), T=T, store_iterates="all")
    b = run_method(ref_method, problem, x0, hp, RngProvider(seed), T=T, store_iterates="all")
    mismatched = [t for t in a.iterates if not np.array_equal(a.iterates[t], b.iterates[t])]
    first = mismatched[0] if mismatched else None
    return CheckReport(
        f"reduction[{kind} -> {ref_method}]", not mismatched, float(len(mismatched)), 0.0, 1,
        f"{T} rounds, first mismatch at {first}",
    )


def run_suite(suite="fast", seed=0):
    """Validation suite for the CLI. Returns ``[(report, expected_to_pass), ...]``.

    Negative controls are expected to fail; the suite passes when every report
    matches its expectation.
    """
    if suite not in ("fast", "full"):
        raise ValueError("suite must be 'fast' or 'full'")
    full = suite == "full"
    n_mc = 100_000 if full else 20_000
    rng = np.random.default_rng(seed)
    skewed = np.array([5.0, -1.0, 0.5, 0.25, 3.0])
    quad = reference_quadratic()
    hp = HyperParams(eta=0.1, k=5, mu_hint=0.01)
    out = [
        (check_unbiasedness(skewed, 2, n_mc, rng), True),
        (check_unbiasedness(skewed, 2, 1000, rng, compressor="topk"), False),
        (check_subset_uniformity(5, 2, n_mc, rng), True),
        (check_second_moment(skewed, 2), True),
        (check_second_moment(rng.standard_normal(1000), 10, n_mc, rng), True),
        (check_shadow_identity("s_sgd_ef", quad, hp, T=1000 if full else 200, seed=7), True),
        (check_shadow_identity("s_snag_ef", quad, hp, T=1000 if full else 200, seed=7), True),
        (check_reduction("s_sgd_ef", quad, hp, T=500 if full else 100), True),
        (check_reduction("topk_ef", quad, hp, T=500 if full else 100), True),
        (check_reduction("s_snag_ef", quad, hp, T=500 if full else 100), True),
        (check_nag_equivalence(quad, 0.5, 0.01), True),
        (check_memory_orthogonality("s_sgd_ef", quad, hp, trials=2000 if full else 300, seed=seed), True),
        (check_memory_orthogonality("s_snag_ef", quad, hp, trials=2000 if full else 300, seed=seed), True),
    ]
    if full:
        pool = reference_quadratic(d=50, P=16, n_per_worker=4)
        mhp = HyperParams(eta=0.01, k=5)
        x_star = pool.optimum[0]
        out.append((check_memory_bound("s_sgd_ef", pool, mhp, trials=500, seed=seed, x0=x_star), True))
        out.append((check_memory_plateau("s_sgd_ef", pool.repartition(1), replace(mhp, gamma=0.0), trials=200,
                                         seed=seed, x0=x_star), False))
    return out
