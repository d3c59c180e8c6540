"""Synchronous pseudo-distributed run loop with cost metering, logging and shadow checks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .compression import wire_entries
from .objectives import Problem, average_rows, make_quadratic, regularize
from .optimizers import (
    HyperParams,
    SgdEfState,
    SnagEfState,
    nag_round,
    one_iter_nag,
    parallel_sgd_round,
    s_sgd_ef_round,
    s_snag_ef_round,
    schedule_accel_params,
)
from .streams import RngProvider, channel_id, stream_key

log = logging.getLogger(__name__)

METHODS = ("parallel_sgd", "naive_sparse", "topk_ef", "s_sgd_ef", "snag", "s_snag_ef", "reg_s_snag_ef", "nag")
ACCELERATED = ("snag", "s_snag_ef", "reg_s_snag_ef", "nag")
SHADOW_METHODS = ("s_sgd_ef", "topk_ef", "s_snag_ef", "snag", "reg_s_snag_ef")


class ShadowIdentityError(RuntimeError):
    """Memory no longer equals real-minus-shadow iterate; always an implementation bug."""


@dataclass
class RoundRecord:
    t: int
    loss: float
    grad_norm_sq: float
    mem_norm_sq: float
    comm_raw: int
    comm_capped: int
    comm_raw_cum: int
    comm_capped_cum: int
    extras: dict = field(default_factory=dict)


@dataclass
class StageRecord:
    s: int
    loss: float
    grad_norm_sq: float
    inner_grad_norm_sq: float
    descent_lhs: float
    descent_rhs: float
    # rounding allowance for the value difference inside descent_rhs
    slack: float = 0.0

    @property
    def descent_ok(self) -> bool:
        return self.descent_lhs <= self.descent_rhs + 1e-9 * abs(self.descent_rhs) + self.slack


@dataclass
class Trace:
    method: str
    records: list = field(default_factory=list)
    iterates: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    config_fingerprint: str = ""
    seed: int = 0
    output: np.ndarray | None = None
    shadow_max_rel_err: float | None = None

    def iterate_list(self):
        return [self.iterates[t] for t in sorted(self.iterates)]

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]


def comm_cost_per_round(method: str, k: int, d: int, P: int):
    """Closed-form (raw, capped) scalar slots per round; capped = min(raw, d)."""
    if method in ("parallel_sgd", "snag", "nag"):
        per_worker = d
    else:
        per_worker = min(k, d)
    raw = P * per_worker
    return raw, min(raw, d)


class Shadow:
    """Iterates driven by uncompressed averaged gradients evaluated at the real iterates.

    For every error-feedback method the averaged memory equals real minus
    shadow exactly (and likewise for the y and z sequences of the
    accelerated method), up to floating-point rounding.
    """

    def __init__(self, state, tol=1e-9):
        self.accelerated = isinstance(state, SnagEfState)
        self.x = state.x.copy()
        if self.accelerated:
            self.y, self.z = state.y.copy(), state.z.copy()
        self.tol = tol
        self.max_rel_err = 0.0

    def update(self, info, hp: HyperParams):
        g = info.grad_avg
        if self.accelerated:
            self.x, self.y, self.z = one_iter_nag(
                self.x, self.y, self.z, hp.eta * g, hp.lam * g, hp.alpha, hp.beta, hp.y_anchor
            )
        else:
            self.x = self.x - hp.eta * g

    def check(self, state):
        pairs = [("x", state.x, self.x, state.mem)]
        if self.accelerated:
            pairs += [("y", state.y, self.y, state.mem_y), ("z", state.z, self.z, state.mem_z)]
        for name, real, shadow, mem in pairs:
            m = average_memory(mem)
            gap = real - shadow
            ref = max(float(np.linalg.norm(m)), float(np.linalg.norm(gap)))
            err = float(np.linalg.norm(gap - m)) / max(ref, 1e-300) if ref > 0 else 0.0
            self.max_rel_err = max(self.max_rel_err, err)
            if err > self.tol:
                raise ShadowIdentityError(
                    f"round {state.t}: |({name} - {name}~) - m_{name}| / |m_{name}| = {err:.3e} > {self.tol:.0e} "
                    f"(|m|={np.linalg.norm(m):.3e}, |gap|={np.linalg.norm(gap):.3e})"
                )
        return self.max_rel_err


def attach_shadow(state, tol=1e-9) -> Shadow:
    return Shadow(state, tol)


def average_memory(mem) -> np.ndarray:
    return average_rows(mem)


def default_log_every(T: int) -> int:
    return max(1, T // 500)


def initial_state(method, x0, P):
    if method in ACCELERATED:
        return SnagEfState.initial(x0, P)
    return SgdEfState.initial(x0, P)


def round_fn(method):
    return {
        "parallel_sgd": parallel_sgd_round,
        "naive_sparse": s_sgd_ef_round,
        "topk_ef": s_sgd_ef_round,
        "s_sgd_ef": s_sgd_ef_round,
        "snag": s_snag_ef_round,
        "s_snag_ef": s_snag_ef_round,
        "nag": nag_round,
    }[method]


def prepare_hp(method: str, hp: HyperParams, d: int) -> HyperParams:
    """Method-specific overrides on top of the user's hyperparameters."""
    if method == "naive_sparse":
        hp = replace(hp, gamma=0.0, compressor="rand")
    elif method == "topk_ef":
        hp = replace(hp, compressor="topk")
    elif method == "parallel_sgd":
        hp = replace(hp, compressor="none")
    elif method == "snag":
        hp = replace(hp, full_precision=True)
    if method == "reg_s_snag_ef":
        return hp.resolve(d, accelerated=False)
    return hp.resolve(d, accelerated=method in ACCELERATED)


class _Meter:
    def __init__(self, d):
        self.d = d
        self.raw_cum = 0
        self.capped_cum = 0

    def add(self, info):
        raw = sum(wire_entries(m) for msgs in info.messages for m in msgs)
        capped = min(raw, self.d)
        self.raw_cum += raw
        self.capped_cum += capped
        return raw, capped


def _record(problem, state, t, meter, last, metrics_hook):
    x = state.x
    g = problem.full_grad(x)
    m = average_memory(state.mem)
    extras = metrics_hook(x) if metrics_hook is not None else {}
    return RoundRecord(
        t=t,
        loss=problem.value(x),
        grad_norm_sq=float(g @ g),
        mem_norm_sq=float(m @ m),
        comm_raw=last[0],
        comm_capped=last[1],
        comm_raw_cum=meter.raw_cum,
        comm_capped_cum=meter.capped_cum,
        extras=extras,
    )


def _run_rounds(method, problem, log_problem, state, hp, rngs, T, log_every, trace, meter,
                shadow=None, store_iterates="logged", worker_order=None, metrics_hook=None,
                discard_memory=False, stop_when=None):
    """Advance ``state`` by up to T rounds. Round numbers continue from ``state.t``.

    ``stop_when(record)`` is checked on each logged record; returning True ends the run early.
    """
    step = round_fn(method)
    t_end = state.t + T
    for _ in range(T):
        state, info = step(problem, state, hp, rngs, worker_order=worker_order)
        if discard_memory:
            state.mem[:] = 0.0
            state.mem_avg[:] = 0.0
        last = meter.add(info)
        if shadow is not None:
            shadow.update(info, hp)
            shadow.check(state)
        logged = state.t % log_every == 0 or state.t == t_end
        if logged:
            trace.records.append(_record(log_problem, state, state.t, meter, last, metrics_hook))
        if store_iterates == "all" or (logged and store_iterates == "logged"):
            trace.iterates[state.t] = state.x.copy()
        if logged and stop_when is not None and stop_when(trace.records[-1]):
            break
    return state


def run_method(method, problem: Problem, x_in, hp: HyperParams, rngs=None, *, T=None, log_every=None,
               shadow=False, shadow_tol=1e-9, store_iterates="logged", worker_order=None,
               metrics_hook=None, seed=None, fingerprint="", output_rule="last", stop_when=None) -> Trace:
    """Execute one method for T rounds (S x T for the regularized wrapper) and return its Trace."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if rngs is None:
        rngs = RngProvider(0 if seed is None else seed)
    if shadow and method not in SHADOW_METHODS:
        raise ValueError(f"shadow tracking needs an error-feedback method, not {method!r}")
    T = hp.T if T is None else T
    d, P = problem.d, problem.P
    x0 = np.array(x_in, dtype=np.float64, copy=True)
    if x0.shape != (d,):
        raise ValueError(f"x_in must have shape ({d},)")
    hp = prepare_hp(method, hp, d)
    trace = Trace(method=method, config_fingerprint=fingerprint, seed=getattr(rngs, "seed", 0))
    meter = _Meter(d)

    if method == "reg_s_snag_ef":
        return _run_regularized(problem, x0, hp, rngs, T, log_every, trace, meter, shadow, shadow_tol,
                                store_iterates, worker_order, metrics_hook)

    total = T
    log_every = default_log_every(total) if log_every is None else log_every
    state = initial_state(method, x0, P)
    trace.records.append(_record(problem, state, 0, meter, (0, 0), metrics_hook))
    trace.iterates[0] = state.x.copy()
    sh = attach_shadow(state, shadow_tol) if shadow else None
    state = _run_rounds(method, problem, problem, state, hp, rngs, T, log_every, trace, meter, sh,
                        store_iterates, worker_order, metrics_hook,
                        discard_memory=(method == "naive_sparse"), stop_when=stop_when)
    if sh is not None:
        trace.shadow_max_rel_err = sh.max_rel_err
    if output_rule == "last" or T == 0:
        trace.output = state.x.copy()
    else:
        from .optimizers import select_output

        mu = hp.mu_hint if hp.mu_hint is not None else problem.mu
        trace.output = select_output(trace, output_rule, rngs.stream(0, 0, "output"), eta=hp.eta, mu=mu)
    return trace


def _run_regularized(problem, x0, hp, rngs, T, log_every, trace, meter, shadow, shadow_tol,
                     store_iterates, worker_order, metrics_hook):
    S, sigma = hp.S, hp.sigma
    if not sigma > 0:
        raise ValueError("reg_s_snag_ef needs sigma > 0")
    log_every = default_log_every(S * T) if log_every is None else log_every
    P = problem.P
    probe = SgdEfState.initial(x0, P)
    trace.records.append(_record(problem, probe, 0, meter, (0, 0), metrics_hook))
    trace.iterates[0] = x0.copy()
    x_prev = x0
    f_prev = problem.value(x_prev)
    stage_iterates = []
    max_err = 0.0
    for s in range(1, S + 1):
        sub = regularize(problem, sigma, x_prev)
        shp = hp
        if None in (hp.lam, hp.alpha, hp.beta):
            lam, alpha, beta = schedule_accel_params(hp.eta, sub.mu)
            shp = replace(hp, mu_hint=sub.mu, lam=lam, alpha=alpha, beta=beta)
        # memories restart from zero each stage; only the iterate is warm-started
        state = replace(SnagEfState.initial(x_prev, P), t=(s - 1) * T)
        sh = attach_shadow(state, shadow_tol) if shadow else None
        state = _run_rounds("s_snag_ef", sub, problem, state, shp, rngs, T, log_every, trace, meter, sh,
                            store_iterates, worker_order, metrics_hook)
        if sh is not None:
            max_err = max(max_err, sh.max_rel_err)
        x_s = state.x.copy()
        g = problem.full_grad(x_s)
        gs = sub.full_grad(x_s)
        f_s = problem.value(x_s)
        lhs = float(g @ g)
        inner = float(gs @ gs)
        # inner accuracy eps_s is defined by |grad F_s(x_s)|^2 = eps_s / 8
        rhs = 4.0 * inner + 4.0 * sigma * (f_prev - f_s)
        slack = 4.0 * sigma * 64 * np.finfo(float).eps * (abs(f_prev) + abs(f_s))
        trace.stages.append(StageRecord(s, f_s, lhs, inner, lhs, rhs, slack))
        stage_iterates.append(x_s)
        x_prev, f_prev = x_s, f_s
    if shadow:
        trace.shadow_max_rel_err = max_err
    u = rngs.stream(0, 0, "output").random()
    trace.output = stage_iterates[min(int(u * S), S - 1)]
    return trace


def build_problem(cfg):
    """Instantiate the configured problem. Returns (problem, metrics_hook or None)."""
    from .datasets import encode_labels, load_csv, load_libsvm, make_blobs, normalize, train_test_split
    from .objectives import make_logreg, make_nonconvex

    pc = cfg.problem
    if pc.kind == "quadratic":
        problem = make_quadratic(pc.d, pc.L, pc.mu, pc.n, cfg.P, pc.data_seed, b_scale=pc.b_scale,
                                 worker_shift=pc.worker_shift)
        return problem, None
    if pc.kind == "nonconvex":
        return make_nonconvex(pc.d, pc.n, cfg.P, pc.data_seed, reg_weight=pc.reg_weight), None

    def load(path):
        if path.endswith((".csv", ".txt")) and not path.endswith(".svm.txt"):
            return load_csv(path, pc.label_column)
        return load_libsvm(path)

    if pc.path is None:
        X, y = make_blobs(pc.n_samples, pc.n_features, pc.n_classes, seed=pc.data_seed)
    else:
        X, y = load(pc.path)
    if pc.test_path is None:
        X_tr, y_tr, X_te, y_te = train_test_split(X, y, 0.2, seed=pc.data_seed)
    else:
        X_tr, y_tr = X, y
        X_te, y_te = load(pc.test_path)
    codes, classes = encode_labels(y_tr)
    lookup = {c: i for i, c in enumerate(classes.tolist())}
    unseen = [v for v in np.unique(y_te).tolist() if v not in lookup]
    if unseen:
        raise ValueError(f"test labels {unseen} never occur in training data")
    te_codes = np.array([lookup[v] for v in y_te.tolist()], dtype=np.int64)
    if pc.normalize:
        X_tr, stats = normalize(X_tr)
        X_te, _ = normalize(X_te, stats=stats)
    problem = make_logreg(X_tr, codes, pc.l2, cfg.P, n_classes=len(classes), seed=pc.data_seed)

    def hook(x):
        return {
            "data_loss": problem.data_loss(x),
            "train_acc": problem.accuracy(x),
            "test_loss": problem.eval_loss(x, X_te, te_codes),
            "test_acc": problem.accuracy(x, X_te, te_codes),
        }

    return problem, hook


def initial_point(cfg, d: int, seed: int) -> np.ndarray:
    """Zeros, or ``x0_scale`` times a standard normal vector drawn from the seed's init stream."""
    if cfg.x0_scale == 0:
        return np.zeros(d)
    rng = np.random.default_rng(stream_key(seed, channel_id("init")))
    return cfg.x0_scale * rng.standard_normal(d)


def hyperparams_for(cfg, d: int) -> HyperParams:
    return HyperParams(
        eta=cfg.eta, k=cfg.resolve_k(d), gamma=cfg.resolve_gamma(d), mu_hint=cfg.mu_hint, sigma=cfg.sigma,
        T=cfg.T, S=cfg.S, full_batch=cfg.full_batch, with_replacement=cfg.with_replacement,
        z_correction=cfg.z_correction, y_anchor=cfg.y_anchor,
    )


def run_experiment(cfg, seed=None, problem=None) -> Trace:
    """Execute one configured run. ``seed`` overrides ``cfg.seed`` (used for repeats)."""
    from .config import fingerprint, validate

    validate(cfg)
    seed = cfg.seed if seed is None else seed
    hook = None
    if problem is None:
        problem, hook = build_problem(cfg)
    hp = hyperparams_for(cfg, problem.d)
    x0 = initial_point(cfg, problem.d, seed)
    return run_method(cfg.method, problem, x0, hp, RngProvider(seed), T=cfg.T, log_every=cfg.log_every,
                      metrics_hook=hook, seed=seed, fingerprint=fingerprint(cfg), output_rule=cfg.output_rule)
