"""Finite-sum problems partitioned across P workers.

A problem is ``F(x) = (1/P) sum_p (1/N_p) sum_i f_{i,p}(x)``. Each built-in
problem exposes per-sample gradients (what a worker computes each round),
per-worker full-partition gradients (for full-batch runs) and the constants
``L`` and ``mu`` consumed by parameter schedules and diagnostics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def average_rows(rows) -> np.ndarray:
    """Average of P equal-length vectors, summed in index order.

    Both the aggregation step of every optimizer and ``Problem.full_grad`` go
    through here so that full-batch reductions agree bitwise.
    """
    rows = list(rows)
    acc = np.array(rows[0], dtype=np.float64, copy=True)
    for r in rows[1:]:
        acc += r
    return acc / len(rows)


@dataclass(frozen=True)
class VarianceEstimate:
    value: float
    n_samples: int
    exact: bool


class Problem:
    """Base class. Subclasses implement ``_sample_grad``, ``_worker_grad`` and ``value``."""

    d: int
    P: int
    sizes: tuple
    L: float
    mu: float = 0.0
    optimum = None  # (x_star, F_star) when known exactly
    L_is_exact: bool = False

    @property
    def n_per_worker(self):
        if len(set(self.sizes)) == 1:
            return self.sizes[0]
        return self.sizes

    def partition_size(self, p: int) -> int:
        return self.sizes[p]

    def sample_grad(self, p: int, i: int, x) -> np.ndarray:
        if not 0 <= p < self.P:
            raise IndexError(f"worker {p} out of range for P={self.P}")
        return self._sample_grad(p, i, np.asarray(x, dtype=np.float64))

    def worker_grad(self, p: int, x) -> np.ndarray:
        """Gradient of worker p's partition average, ``(1/N_p) sum_i grad f_{i,p}``."""
        return self._worker_grad(p, np.asarray(x, dtype=np.float64))

    def full_grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return average_rows(self._worker_grad(p, x) for p in range(self.P))

    def value(self, x) -> float:
        raise NotImplementedError

    def worker_grads_all(self, p: int, x) -> np.ndarray:
        """All per-sample gradients of worker p, shape ``(N_p, d)``."""
        return np.stack([self._sample_grad(p, i, x) for i in range(self.sizes[p])])

    def __repr__(self):
        return f"{type(self).__name__}(d={self.d}, P={self.P}, L={self.L:.4g}, mu={self.mu:.4g})"


class QuadraticProblem(Problem):
    """``f_{i,p}(x) = 1/2 (x - b_{i,p})^T diag(a) (x - b_{i,p})``."""

    L_is_exact = True

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)  # (P, N, d)
        self.P, n, self.d = self.b.shape
        self.sizes = (n,) * self.P
        self.L = float(self.a.max())
        self.mu = float(self.a.min())
        self._b_worker = self.b.mean(axis=1)
        x_star = self.b.reshape(-1, self.d).mean(axis=0)
        self.optimum = (x_star, self.value(x_star))

    def _sample_grad(self, p, i, x):
        return self.a * (x - self.b[p, i])

    def _worker_grad(self, p, x):
        return self.a * (x - self._b_worker[p])

    def worker_grads_all(self, p, x):
        return self.a * (x - self.b[p])

    def value(self, x) -> float:
        diff = np.asarray(x, dtype=np.float64) - self.b
        return float(0.5 * np.mean(np.sum(self.a * diff * diff, axis=-1)))

    def repartition(self, P: int) -> "QuadraticProblem":
        """Same sample pool (hence same F and variance) split over P workers."""
        pool = self.b.reshape(-1, self.d)
        if len(pool) % P:
            raise ValueError(f"{len(pool)} samples do not split evenly over {P} workers")
        return QuadraticProblem(self.a, pool.reshape(P, -1, self.d))


def make_quadratic(d, L, mu, n_per_worker, P, seed, b_scale=1.0, worker_shift=0.0) -> QuadraticProblem:
    """Synthetic strongly convex quadratic with diagonal Hessian.

    Hessian eigenvalues are log-uniform in ``[mu, L]`` with the smallest and
    largest forced to exactly ``mu`` and ``L``. Centers ``b_{i,p}`` are standard
    normal times ``b_scale``; ``b_scale=0`` gives a zero-variance instance.
    ``worker_shift`` adds a standard normal offset per worker, scaled by it,
    which makes local objectives disagree at the optimum.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if mu <= 0:
        raise ValueError("mu must be > 0")
    if mu > L:
        raise ValueError(f"mu={mu} exceeds L={L}")
    if P < 1 or n_per_worker < 1:
        raise ValueError("P and n_per_worker must be >= 1")
    if d == 1 and mu != L:
        raise ValueError("d=1 needs mu == L (a single eigenvalue)")
    rng = np.random.default_rng(seed)
    u = rng.random(d)
    a = np.exp(np.log(mu) + u * (np.log(L) - np.log(mu)))
    if d >= 2:
        lo, hi = int(np.argmin(u)), int(np.argmax(u))
        a[lo], a[hi] = mu, L
    else:
        a[0] = L
    b = b_scale * rng.standard_normal((P, n_per_worker, d))
    if worker_shift:
        b = b + worker_shift * rng.standard_normal((P, 1, d))
    return QuadraticProblem(a, b)


def _partition(n, P, seed):
    """Seeded shuffle then contiguous blocks; sizes differ by at most one."""
    order = np.random.default_rng(seed).permutation(n)
    return np.array_split(order, P)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(z):
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


class LogRegProblem(Problem):
    """Multinomial logistic loss with an L2 term; x is the row-major flattened C x d_feat weight matrix."""

    def __init__(self, features, labels, l2, P, n_classes=None, seed=0):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("empty dataset")
        if y.shape[0] != X.shape[0]:
            raise ValueError("features and labels have different row counts")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("labels must be integer class indices")
            y = y.astype(np.int64)
        C = int(n_classes) if n_classes is not None else int(y.max()) + 1
        C = max(C, 2)
        if y.min() < 0 or y.max() >= C:
            raise ValueError(f"label out of range [0, {C})")
        if l2 < 0:
            raise ValueError("l2 must be >= 0")
        n = X.shape[0]
        if n < P:
            raise ValueError(f"need at least P={P} rows, got {n}")
        self.C, self.d_feat = C, X.shape[1]
        self.d = C * self.d_feat
        self.P = P
        self.l2 = float(l2)
        self.parts = _partition(n, P, seed)
        self.Xp = [X[idx] for idx in self.parts]
        self.yp = [y[idx] for idx in self.parts]
        self.sizes = tuple(len(idx) for idx in self.parts)
        # Per-sample Hessian is (diag(s) - s s^T) kron a a^T; the softmax block has
        # spectral norm <= 1/2 (Gershgorin), hence the 1/2.
        self.L = float(np.max(np.sum(X * X, axis=1))) / 2.0 + self.l2
        self.mu = self.l2
        self.optimum = None

    def _W(self, x):
        return x.reshape(self.C, self.d_feat)

    def _sample_grad(self, p, i, x):
        a = self.Xp[p][i]
        s = _softmax(self._W(x) @ a)
        s[self.yp[p][i]] -= 1.0
        return np.outer(s, a).ravel() + self.l2 * x

    def _worker_grad(self, p, x):
        Xp, yp = self.Xp[p], self.yp[p]
        S = _softmax(Xp @ self._W(x).T)
        S[np.arange(len(yp)), yp] -= 1.0
        return (S.T @ Xp).ravel() / len(yp) + self.l2 * x

    def worker_grads_all(self, p, x):
        Xp, yp = self.Xp[p], self.yp[p]
        S = _softmax(Xp @ self._W(x).T)
        S[np.arange(len(yp)), yp] -= 1.0
        return (S[:, :, None] * Xp[:, None, :]).reshape(len(yp), -1) + self.l2 * x

    def data_loss(self, x) -> float:
        """Loss without the L2 term."""
        W = self._W(np.asarray(x, dtype=np.float64))
        per = []
        for Xp, yp in zip(self.Xp, self.yp):
            Z = Xp @ W.T
            per.append(np.mean(_logsumexp(Z) - Z[np.arange(len(yp)), yp]))
        return float(np.mean(per))

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return self.data_loss(x) + 0.5 * self.l2 * float(x @ x)

    def accuracy(self, x, features=None, labels=None) -> float:
        W = self._W(np.asarray(x, dtype=np.float64))
        if features is None:
            features = np.concatenate(self.Xp)
            labels = np.concatenate(self.yp)
        pred = np.argmax(np.asarray(features, dtype=np.float64) @ W.T, axis=1)
        return float(np.mean(pred == np.asarray(labels)))

    def eval_loss(self, x, features, labels) -> float:
        """Mean data loss on an arbitrary (held-out) set, no L2 term."""
        W = self._W(np.asarray(x, dtype=np.float64))
        Z = np.asarray(features, dtype=np.float64) @ W.T
        labels = np.asarray(labels)
        return float(np.mean(_logsumexp(Z) - Z[np.arange(len(labels)), labels]))


def make_logreg(features, labels, l2, P, n_classes=None, seed=0) -> LogRegProblem:
    return LogRegProblem(features, labels, l2, P, n_classes=n_classes, seed=seed)


def nonconvex_reg(x):
    """``r(x) = sum_j x_j^2 / (1 + x_j^2)``: bounded, smooth, nonconvex for |x_j| > 1/sqrt(3)."""
    x2 = x * x
    return float(np.sum(x2 / (1.0 + x2)))


def nonconvex_reg_grad(x):
    return 2.0 * x / (1.0 + x * x) ** 2


def nonconvex_reg_curvature(x):
    """Second derivative per coordinate; its sup over R is 2, attained at 0."""
    x2 = x * x
    return (2.0 - 6.0 * x2) / (1.0 + x2) ** 3


class NonconvexProblem(Problem):
    """Binary logistic loss (labels in {-1, +1}) plus ``reg_weight * r(x)``."""

    def __init__(self, features, labels, P, reg_weight=1.0, seed=0):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("empty dataset")
        if not np.all(np.abs(y) == 1):
            raise ValueError("labels must be -1 or +1")
        if X.shape[0] < P:
            raise ValueError(f"need at least P={P} rows")
        self.d = X.shape[1]
        self.P = P
        self.reg_weight = float(reg_weight)
        self.parts = _partition(X.shape[0], P, seed)
        self.Xp = [X[idx] for idx in self.parts]
        self.yp = [y[idx] for idx in self.parts]
        self.sizes = tuple(len(idx) for idx in self.parts)
        self.L = float(np.max(np.sum(X * X, axis=1))) / 4.0 + 2.0 * self.reg_weight
        self.mu = 0.0
        self.optimum = None

    @staticmethod
    def _sigmoid(z):
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def _sample_grad(self, p, i, x):
        a, yi = self.Xp[p][i], self.yp[p][i]
        coef = -yi * self._sigmoid(-yi * (a @ x))
        return coef * a + self.reg_weight * nonconvex_reg_grad(x)

    def _worker_grad(self, p, x):
        Xp, yp = self.Xp[p], self.yp[p]
        coef = -yp * self._sigmoid(-yp * (Xp @ x))
        return (coef @ Xp) / len(yp) + self.reg_weight * nonconvex_reg_grad(x)

    def worker_grads_all(self, p, x):
        Xp, yp = self.Xp[p], self.yp[p]
        coef = -yp * self._sigmoid(-yp * (Xp @ x))
        return coef[:, None] * Xp + self.reg_weight * nonconvex_reg_grad(x)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        per = [np.mean(np.logaddexp(0.0, -yp * (Xp @ x))) for Xp, yp in zip(self.Xp, self.yp)]
        return float(np.mean(per)) + self.reg_weight * nonconvex_reg(x)


def make_nonconvex(d, n_per_worker, P, seed, reg_weight=1.0, label_noise=0.1) -> NonconvexProblem:
    """Synthetic nonconvex problem: noisy linearly generated labels, rows of norm about 1."""
    if d < 1 or n_per_worker < 1 or P < 1:
        raise ValueError("d, n_per_worker and P must be >= 1")
    rng = np.random.default_rng(seed)
    n = n_per_worker * P
    X = rng.standard_normal((n, d)) / np.sqrt(d)
    w = 2.0 * rng.standard_normal(d)
    y = np.sign(X @ w + 1e-12)
    flip = rng.random(n) < label_noise
    y[flip] = -y[flip]
    y[y == 0] = 1.0
    return NonconvexProblem(X, y, P, reg_weight=reg_weight, seed=seed)


class RegularizedProblem(Problem):
    """``F + sigma * ||x - center||^2`` (no 1/2 factor), applied to every sample."""

    def __init__(self, base: Problem, sigma: float, center):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.base = base
        self.sigma = float(sigma)
        self.center = np.array(center, dtype=np.float64, copy=True)
        if self.center.shape != (base.d,):
            raise ValueError(f"center must have shape ({base.d},)")
        self.d, self.P, self.sizes = base.d, base.P, base.sizes
        self.L = base.L + 2.0 * self.sigma
        self.mu = max(base.mu, 2.0 * self.sigma - base.L)
        self.L_is_exact = False
        self.optimum = base.optimum if self.sigma == 0 else None

    def _extra(self, x):
        return 2.0 * self.sigma * (x - self.center)

    def _sample_grad(self, p, i, x):
        g = self.base._sample_grad(p, i, x)
        return g if self.sigma == 0 else g + self._extra(x)

    def _worker_grad(self, p, x):
        g = self.base._worker_grad(p, x)
        return g if self.sigma == 0 else g + self._extra(x)

    def worker_grads_all(self, p, x):
        G = self.base.worker_grads_all(p, x)
        return G if self.sigma == 0 else G + self._extra(x)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        v = self.base.value(x)
        if self.sigma == 0:
            return v
        diff = x - self.center
        return v + self.sigma * float(diff @ diff)


def regularize(problem: Problem, sigma: float, center) -> RegularizedProblem:
    """Recentered L2 wrapper; ``sigma = L`` turns an L-smooth F into a 3L-smooth, L-strongly convex one."""
    return RegularizedProblem(problem, sigma, center)


def sample_index(problem: Problem, p: int, rng) -> int:
    """Uniform sample id within worker p's partition."""
    if not 0 <= p < problem.P:
        raise IndexError(f"worker {p} out of range for P={problem.P}")
    n = problem.partition_size(p)
    if n == 1:
        rng.random()  # keep stream consumption uniform across partition sizes
        return 0
    return min(int(rng.random() * n), n - 1)


def estimate_variance(problem: Problem, x, n_samples=None, rng=None) -> VarianceEstimate:
    """Mean squared deviation of per-sample gradients from the full gradient at x.

    With ``n_samples=None`` every (p, i) pair is enumerated. Otherwise a
    Monte-Carlo estimate: worker uniform, then sample uniform within it, which
    matches the per-worker weighting of F.
    """
    x = np.asarray(x, dtype=np.float64)
    g = problem.full_grad(x)
    if n_samples is None:
        per_worker = []
        for p in range(problem.P):
            G = problem.worker_grads_all(p, x) - g
            per_worker.append(np.mean(np.sum(G * G, axis=1)))
        n_total = sum(problem.sizes)
        return VarianceEstimate(float(np.mean(per_worker)), n_total, True)
    if rng is None:
        raise ValueError("sampled mode needs an rng")
    acc = 0.0
    for _ in range(int(n_samples)):
        p = min(int(rng.random() * problem.P), problem.P - 1)
        i = sample_index(problem, p, rng)
        diff = problem.sample_grad(p, i, x) - g
        acc += float(diff @ diff)
    return VarianceEstimate(acc / n_samples, int(n_samples), False)
