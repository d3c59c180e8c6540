"""Round transitions for the sparsified methods and their baselines.

Every ``*_round`` function is a pure map ``state -> (new_state, RoundInfo)``.
Worker computations inside a round only touch their own memory rows and
their own (round, worker, channel)-keyed random streams; results are reduced
in worker-index order, so the evaluation order of workers does not matter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .compression import densify, identity_message, rand_comp, top_k
from .objectives import Problem, average_rows, sample_index

Y_ANCHORS = ("x", "y")
Z_CORRECTIONS = ("mixed_memory", "y_memory")
COMPRESSORS = ("rand", "topk", "none")


def one_iter_nag(x, y, z, dy, dz, alpha, beta, y_anchor="x"):
    """One three-sequence Nesterov transition.

    Conservative step ``y' = x - dy``, aggressive step
    ``z' = (1 - beta) z + beta x - dz`` (both from the incoming x), then the
    mixture ``x' = (1 - alpha) y' + alpha z'``.

    ``y_anchor="y"`` uses ``y' = y - dy`` instead, the literal pseudo-code
    reading. That variant is kept for comparison; it does not accelerate.
    """
    if y_anchor == "x":
        y_new = x - dy
    elif y_anchor == "y":
        y_new = y - dy
    else:
        raise ValueError(f"unknown y_anchor {y_anchor!r}")
    z_new = (1.0 - beta) * z + beta * x - dz
    x_new = (1.0 - alpha) * y_new + alpha * z_new
    return x_new, y_new, z_new


def schedule_accel_params(eta: float, mu: float):
    """Constant (lambda, alpha, beta) for the accelerated method given step eta and strong convexity mu."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    if mu <= 0:
        raise ValueError("mu must be > 0 for the accelerated schedule")
    lam = 0.5 * math.sqrt(eta / mu)
    lm = lam * mu
    alpha = lm / (2.0 + lm)
    beta = lm / (1.0 + lm)
    # alpha*lam/(1-beta) <= eta/4 holds identically under this schedule
    assert alpha * lam / (1.0 - beta) <= eta / 4.0 * (1.0 + 1e-12)
    return lam, alpha, beta


@dataclass(frozen=True)
class HyperParams:
    eta: float
    k: int
    gamma: float | None = None
    lam: float | None = None
    alpha: float | None = None
    beta: float | None = None
    mu_hint: float | None = None
    sigma: float = 0.0
    T: int = 100
    S: int = 1
    full_batch: bool = False
    full_precision: bool = False
    compressor: str = "rand"
    with_replacement: bool = False
    z_correction: str = "mixed_memory"
    y_anchor: str = "x"

    def validate(self, d: int):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not 1 <= self.k <= d:
            raise ValueError(f"k must be in [1, {d}], got {self.k}")
        for name in ("gamma", "alpha", "beta"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.compressor not in COMPRESSORS:
            raise ValueError(f"unknown compressor {self.compressor!r}")
        if self.z_correction not in Z_CORRECTIONS:
            raise ValueError(f"unknown z_correction {self.z_correction!r}")
        if self.y_anchor not in Y_ANCHORS:
            raise ValueError(f"unknown y_anchor {self.y_anchor!r}")
        return self

    def resolve(self, d: int, accelerated: bool = False) -> "HyperParams":
        """Fill defaults: gamma = 0.5 k/d; (lam, alpha, beta) from the schedule when accelerated."""
        hp = self
        if hp.gamma is None:
            hp = replace(hp, gamma=0.5 * hp.k / d)
        if accelerated and None in (hp.lam, hp.alpha, hp.beta):
            if hp.mu_hint is None or hp.mu_hint <= 0:
                raise ValueError("accelerated method needs mu_hint > 0 (or explicit lam, alpha, beta)")
            lam, alpha, beta = schedule_accel_params(hp.eta, hp.mu_hint)
            hp = replace(
                hp,
                lam=lam if hp.lam is None else hp.lam,
                alpha=alpha if hp.alpha is None else hp.alpha,
                beta=beta if hp.beta is None else hp.beta,
            )
        return hp.validate(d)

    def split_k(self, d: int):
        """Coordinates kept by the y- and z-messages: floor(k/2), ceil(k/2)."""
        if self.full_precision:
            return d, d
        if self.k < 2:
            raise ValueError("accelerated method needs k >= 2")
        return self.k // 2, self.k - self.k // 2


@dataclass
class SgdEfState:
    x: np.ndarray
    mem: np.ndarray  # (P, d)
    mem_avg: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, x0, P: int):
        x0 = np.array(x0, dtype=np.float64, copy=True)
        return cls(x0, np.zeros((P, x0.shape[0])), np.zeros_like(x0), 0)


@dataclass
class SnagEfState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    mem: np.ndarray
    mem_y: np.ndarray
    mem_z: np.ndarray
    mem_avg: np.ndarray
    mem_y_avg: np.ndarray
    mem_z_avg: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, x0, P: int):
        x0 = np.array(x0, dtype=np.float64, copy=True)
        d = x0.shape[0]
        zeros = lambda: np.zeros((P, d))  # noqa: E731
        return cls(
            x0, x0.copy(), x0.copy(),
            zeros(), zeros(), zeros(),
            np.zeros(d), np.zeros(d), np.zeros(d), 0,
        )


@dataclass
class RoundInfo:
    """What a round puts on the wire, plus the uncompressed gradient average used by shadows."""

    messages: list = field(default_factory=list)
    grad_avg: np.ndarray | None = None


def _local_grad(problem: Problem, p, x, t, hp, rngs):
    if hp.full_batch:
        return problem.worker_grad(p, x)
    i = sample_index(problem, p, rngs.stream(t, p, "sample"))
    return problem.sample_grad(p, i, x)


def _order(P, worker_order):
    return range(P) if worker_order is None else worker_order


def parallel_sgd_round(problem: Problem, state: SgdEfState, hp: HyperParams, rngs, worker_order=None):
    """Uncompressed synchronous SGD: every worker sends its dense stochastic gradient."""
    t = state.t + 1
    P = problem.P
    grads = [None] * P
    for p in _order(P, worker_order):
        grads[p] = _local_grad(problem, p, state.x, t, hp, rngs)
    g_avg = average_rows(grads)
    x_new = state.x - hp.eta * g_avg
    info = RoundInfo([[identity_message(g)] for g in grads], g_avg)
    return SgdEfState(x_new, state.mem, state.mem_avg, t), info


def s_sgd_ef_round(problem: Problem, state: SgdEfState, hp: HyperParams, rngs, worker_order=None):
    """One round of sparsified SGD with error feedback.

    Each worker corrects its stochastic gradient by ``(gamma/eta) m``,
    compresses it, and accumulates ``eta * (grad - compressed)`` into its
    memory. The iterate moves by the average of the compressed messages.
    """
    t = state.t + 1
    P, d = problem.P, problem.d
    eta, gamma = hp.eta, hp.gamma
    grads = [None] * P
    gbars = [None] * P
    msgs = [None] * P
    mem_new = np.empty_like(state.mem)
    for p in _order(P, worker_order):
        gf = _local_grad(problem, p, state.x, t, hp, rngs)
        g = gf + (gamma / eta) * state.mem[p]
        if hp.compressor == "rand" and not hp.full_precision:
            msg = rand_comp(g, hp.k, rngs.stream(t, p, "subset_y"), replace=hp.with_replacement)
        elif hp.compressor == "topk" and not hp.full_precision:
            msg = top_k(g, hp.k)
        else:
            msg = identity_message(g)
        gbar = densify(msg)
        mem_new[p] = state.mem[p] + eta * (gf - gbar)
        grads[p], gbars[p], msgs[p] = gf, gbar, [msg]
    g_avg = average_rows(grads)
    gbar_avg = average_rows(gbars)
    x_new = state.x - eta * gbar_avg
    mem_avg = state.mem_avg + eta * (g_avg - gbar_avg)
    return SgdEfState(x_new, mem_new, mem_avg, t), RoundInfo(msgs, g_avg)


def _z_memory_term(hp, beta, m, m_y, m_z):
    other = m if hp.z_correction == "mixed_memory" else m_y
    return (1.0 - beta) * m_z + beta * other


def s_snag_ef_round(problem: Problem, state: SnagEfState, hp: HyperParams, rngs, worker_order=None):
    """One round of sparsified stochastic Nesterov with error feedback.

    Two corrected copies of the local gradient are compressed independently
    (k/2 coordinates each); the same three-sequence transition updates the
    worker memories with the compression deltas and the solutions with the
    averaged messages.
    """
    t = state.t + 1
    P, d = problem.P, problem.d
    eta, lam, alpha, beta, gamma = hp.eta, hp.lam, hp.alpha, hp.beta, hp.gamma
    ky, kz = hp.split_k(d)
    grads = [None] * P
    gys = [None] * P
    gzs = [None] * P
    msgs = [None] * P
    mem = np.empty_like(state.mem)
    mem_y = np.empty_like(state.mem_y)
    mem_z = np.empty_like(state.mem_z)
    dys = [None] * P
    dzs = [None] * P
    for p in _order(P, worker_order):
        gf = _local_grad(problem, p, state.x, t, hp, rngs)
        g_y = gf + (gamma / eta) * state.mem[p]
        g_z = gf + (gamma / lam) * _z_memory_term(hp, beta, state.mem[p], state.mem_y[p], state.mem_z[p])
        if hp.full_precision:
            my = identity_message(g_y)
            mz = identity_message(g_z)
            msgs[p] = [my]  # both payloads are the same dense gradient; metered once
        else:
            my = rand_comp(g_y, ky, rngs.stream(t, p, "subset_y"), replace=hp.with_replacement)
            mz = rand_comp(g_z, kz, rngs.stream(t, p, "subset_z"), replace=hp.with_replacement)
            msgs[p] = [my, mz]
        gy, gz = densify(my), densify(mz)
        dy = eta * (gy - gf)
        dz = lam * (gz - gf)
        mem[p], mem_y[p], mem_z[p] = one_iter_nag(
            state.mem[p], state.mem_y[p], state.mem_z[p], dy, dz, alpha, beta, hp.y_anchor
        )
        grads[p], gys[p], gzs[p], dys[p], dzs[p] = gf, gy, gz, dy, dz
    g_avg = average_rows(grads)
    x, y, z = one_iter_nag(
        state.x, state.y, state.z, eta * average_rows(gys), lam * average_rows(gzs), alpha, beta, hp.y_anchor
    )
    ma, may, maz = one_iter_nag(
        state.mem_avg, state.mem_y_avg, state.mem_z_avg,
        average_rows(dys), average_rows(dzs), alpha, beta, hp.y_anchor,
    )
    new = SnagEfState(x, y, z, mem, mem_y, mem_z, ma, may, maz, t)
    return new, RoundInfo(msgs, g_avg)


def nag_round(problem: Problem, state: SnagEfState, hp: HyperParams, rngs=None, worker_order=None):
    """Deterministic Nesterov step on the exact full gradient."""
    g = problem.full_grad(state.x)
    x, y, z = one_iter_nag(state.x, state.y, state.z, hp.eta * g, hp.lam * g, hp.alpha, hp.beta, hp.y_anchor)
    new = SnagEfState(x, y, z, state.mem, state.mem_y, state.mem_z,
                      state.mem_avg, state.mem_y_avg, state.mem_z_avg, state.t + 1)
    return new, RoundInfo([[identity_message(g)]], g)


def nag_momentum_form(grad, x0, eta, lam, alpha, beta, T):
    """Single-sequence momentum form of the deterministic Nesterov iteration.

    Eliminating y and z gives, with ``m = (1 - alpha)(1 - beta)``,
    ``x_t = x_{t-1} - ((1 - alpha) eta + alpha lam) g_{t-1}
            + m (x_{t-1} - x_{t-2}) + m eta g_{t-2}``,
    started from ``x_{-1} = x_0`` and ``g_{-1} = 0``. Returns ``[x_0, ..., x_T]``.
    """
    x_prev = np.array(x0, dtype=np.float64, copy=True)
    x = x_prev.copy()
    g_prev = np.zeros_like(x)
    m = (1.0 - alpha) * (1.0 - beta)
    step = (1.0 - alpha) * eta + alpha * lam
    out = [x.copy()]
    for _ in range(T):
        g = grad(x)
        x_next = x - step * g + m * (x - x_prev) + m * eta * g_prev
        x_prev, x, g_prev = x, x_next, g
        out.append(x.copy())
    return out


def geometric_weights(T: int, eta_mu: float) -> np.ndarray:
    """Output weights proportional to (1 - eta*mu)^(-t), t = 1..T, computed in log space."""
    if not 0.0 <= eta_mu < 1.0:
        raise ValueError(f"need 0 <= eta*mu < 1, got {eta_mu}")
    t = np.arange(1, T + 1, dtype=np.float64)
    logw = -t * math.log1p(-eta_mu)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def select_output(trace, rule="last", rng=None, eta=None, mu=None):
    """Pick the reported iterate from a run.

    ``trace`` is a Trace or a list of iterates ordered by round. ``last`` takes
    the final stored iterate; ``uniform`` picks one uniformly; ``geometric``
    picks index t-1 with probability proportional to (1 - eta*mu)^(-t).
    """
    iterates = trace.iterate_list() if hasattr(trace, "iterate_list") else list(trace)
    if not iterates:
        raise ValueError("empty trace")
    T = len(iterates)
    if rule == "last":
        return iterates[-1]
    if rng is None:
        raise ValueError(f"rule {rule!r} needs an rng")
    if rule == "uniform":
        return iterates[min(int(rng.random() * T), T - 1)]
    if rule == "geometric":
        if eta is None or mu is None:
            raise ValueError("geometric rule needs eta and mu")
        if eta * mu >= 1:
            raise ValueError("geometric rule needs eta*mu < 1")
        w = geometric_weights(T, eta * mu)
        idx = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
        return iterates[min(idx, T - 1)]
    raise ValueError(f"unknown output rule {rule!r}")


BASELINES = ("parallel_sgd", "naive_sparse", "topk_ef", "snag")


def run_baseline(kind, problem, x_in, hp, rngs, **kw):
    """Run one of the comparison methods under the same round/seed discipline as the main ones."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    from .simulator import run_method

    return run_method(kind, problem, x_in, hp, rngs, **kw)


def reg_s_snag_ef(problem, x_in, hp, rngs, **kw):
    """Recursively regularized S-SNAG-EF for nonconvex objectives (S stages of T rounds)."""
    if not hp.sigma > 0:
        raise ValueError("reg_s_snag_ef needs sigma > 0")
    if hp.S < 1 or hp.T < 1:
        raise ValueError("need S >= 1 and T >= 1")
    from .simulator import run_method

    return run_method("reg_s_snag_ef", problem, x_in, hp, rngs, **kw)
