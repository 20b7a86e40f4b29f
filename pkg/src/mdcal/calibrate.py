"""Post-processing calibrators.

Isotonic maps are fitted by pool-adjacent-violators on the sorted distinct
prediction values. The robust variant minimizes the worst per-environment
mean squared error over nondecreasing maps with values in [0, 1].

The robust program is solved on its Lagrangian dual where possible: for
fixed environment weights ``lam`` the inner minimization over monotone maps is
a weighted isotonic regression, solved exactly by PAVA. The dual value is a
certified lower bound; primal iterates give upper bounds. Projected
subgradient steps on the max (Polyak step toward the dual bound) polish the
primal when the gap is not yet closed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .metrics import logit

log = logging.getLogger(__name__)

PLATT_CLIP = 1e-6


@dataclass(frozen=True)
class MonotoneMap:
    knots: np.ndarray
    values: np.ndarray
    interp: str = "linear"
    converged: bool = True

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        if knots.size == 0 or knots.shape != values.shape:
            raise ValueError("knots and values must be non-empty and of equal length")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly ascending")
        if np.any(np.diff(values) < 0):
            raise ValueError("values must be nondecreasing")
        if self.interp not in ("linear", "step"):
            raise ValueError(f"unknown interpolation {self.interp!r}")

    def __call__(self, f):
        f = np.asarray(f, dtype=float)
        if self.interp == "linear":
            return np.interp(f, self.knots, self.values)
        idx = np.clip(np.searchsorted(self.knots, f, side="right") - 1, 0, self.knots.size - 1)
        return self.values[idx]

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "values": self.values.tolist(), "interp": self.interp}

    @classmethod
    def from_dict(cls, d: dict) -> "MonotoneMap":
        return cls(d["knots"], d["values"], d.get("interp", "linear"))


@dataclass(frozen=True)
class PlattMap:
    a: float
    b: float

    def __call__(self, f):
        z = logit(np.clip(np.asarray(f, dtype=float), PLATT_CLIP, 1.0 - PLATT_CLIP))
        return _sigmoid(self.a * z + self.b)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d: dict) -> "PlattMap":
        return cls(float(d["a"]), float(d["b"]))


def map_from_dict(d: dict) -> MonotoneMap | PlattMap:
    return MonotoneMap.from_dict(d) if "knots" in d else PlattMap.from_dict(d)


def apply(cal_map, f) -> np.ndarray:
    return np.asarray(cal_map(f), dtype=float)


def _sigmoid(z):
    return expit(z)


# --------------------------------------------------------------------------
# isotonic regression

def pava(targets, weights=None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit to ``targets`` (in order)."""
    t = np.asarray(targets, dtype=float)
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    n = t.size
    val = np.empty(n)
    wt = np.empty(n)
    size = np.empty(n, dtype=int)
    top = -1
    for i in range(n):
        top += 1
        val[top], wt[top], size[top] = t[i], w[i], 1
        while top > 0 and val[top - 1] > val[top]:
            tw = wt[top - 1] + wt[top]
            val[top - 1] = (wt[top - 1] * val[top - 1] + wt[top] * val[top]) / tw
            wt[top - 1] = tw
            size[top - 1] += size[top]
            top -= 1
    return np.repeat(val[:top + 1], size[:top + 1])


def _project_monotone_box(z) -> np.ndarray:
    return np.clip(pava(z), 0.0, 1.0)


def _group(f, y):
    f = np.asarray(f, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if f.size == 0 or f.shape != y.shape:
        raise ValueError("need a non-empty set of aligned predictions and labels")
    knots, inv, counts = np.unique(f, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=y)
    return knots, inv, counts, sums


def fit_isotonic(f, y) -> MonotoneMap:
    knots, _, counts, sums = _group(f, y)
    values = np.clip(pava(sums / counts, counts), 0.0, 1.0)
    return MonotoneMap(knots, values)


def mse(cal_map, f, y) -> float:
    return float(np.mean((apply(cal_map, f) - np.asarray(y, dtype=float)) ** 2))


def calibrate_naive(per_env: Sequence[tuple[np.ndarray, np.ndarray]]) -> MonotoneMap:
    if len(per_env) == 0:
        raise ValueError("need at least one environment")
    f = np.concatenate([np.asarray(p, dtype=float).ravel() for p, _ in per_env])
    y = np.concatenate([np.asarray(t, dtype=float).ravel() for _, t in per_env])
    return fit_isotonic(f, y)


def conditional_mean_map(f, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-value conditional label means (not necessarily monotone)."""
    knots, _, counts, sums = _group(f, y)
    return knots, sums / counts


# --------------------------------------------------------------------------
# Platt scaling

def fit_platt(f, y, max_iter: int = 200, tol: float = 1e-8) -> PlattMap:
    f = np.asarray(f, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if np.all(y == y[0]):
        raise ValueError("Platt scaling needs both classes present")
    z = logit(np.clip(f, PLATT_CLIP, 1.0 - PLATT_CLIP))
    design = np.column_stack([z, np.ones_like(z)])

    def loss(theta):
        s = design @ theta
        return float(np.mean(np.logaddexp(0.0, s) - y * s))

    theta = np.array([1.0, 0.0])
    cur = loss(theta)
    for _ in range(max_iter):
        p = _sigmoid(design @ theta)
        grad = design.T @ (p - y) / y.size
        if np.max(np.abs(grad)) < tol:
            break
        hess = (design * (p * (1 - p))[:, None]).T @ design / y.size + 1e-12 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            new = loss(cand)
            if new <= cur:
                break
            t *= 0.5
        theta, cur = cand, new
    return PlattMap(float(theta[0]), float(theta[1]))


# --------------------------------------------------------------------------
# robust (min-max) isotonic regression

@dataclass
class RobustFit:
    map: MonotoneMap
    objective: float
    lower_bound: float
    env_objectives: np.ndarray
    converged: bool
    iterations: int
    weights: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def gap(self) -> float:
        return self.objective - self.lower_bound


class _RobustProblem:
    """F_e(z) = sum_j A[e,j] z_j^2 - 2 B[e,j] z_j + C[e] on pooled knots."""

    def __init__(self, per_env):
        fs = [np.asarray(p, dtype=float).ravel() for p, _ in per_env]
        ys = [np.asarray(t, dtype=float).ravel() for _, t in per_env]
        if any(f.size == 0 or f.shape != y.shape for f, y in zip(fs, ys)):
            raise ValueError("every environment needs aligned, non-empty predictions")
        self.knots = np.unique(np.concatenate(fs))
        k, m = len(fs), self.knots.size
        self.A = np.zeros((k, m))
        self.B = np.zeros((k, m))
        self.C = np.zeros(k)
        for e, (f, y) in enumerate(zip(fs, ys)):
            j = np.searchsorted(self.knots, f)
            self.A[e] = np.bincount(j, minlength=m) / f.size
            self.B[e] = np.bincount(j, weights=y, minlength=m) / f.size
            self.C[e] = np.mean(y ** 2)

    def objectives(self, z) -> np.ndarray:
        return self.A @ (z * z) - 2.0 * self.B @ z + self.C

    def inner(self, lam) -> tuple[np.ndarray, float]:
        """argmin_z and min value of sum_e lam_e F_e over the monotone box."""
        w = lam @ self.A
        v = lam @ self.B
        w_safe = np.maximum(w, 1e-15)
        z = np.clip(pava(v / w_safe, w_safe), 0.0, 1.0)
        return z, float(lam @ self.objectives(z))


def calibrate_robust(per_env: Sequence[tuple[np.ndarray, np.ndarray]], max_iter: int = 10_000,
                     tol: float = 1e-9, stability_tol: float = 1e-6) -> RobustFit:
    """Monotone map minimizing the worst per-environment mean squared error."""
    if len(per_env) == 0:
        raise ValueError("need at least one environment")
    prob = _RobustProblem(per_env)
    k = prob.A.shape[0]

    # pooled isotonic solution is feasible; start there so the result never
    # does worse than naive calibration
    z_best = calibrate_naive(per_env)(prob.knots)
    f_best = float(prob.objectives(z_best).max())
    lower = -np.inf
    lam_best = np.full(k, 1.0 / k)

    def consider(z):
        nonlocal z_best, f_best
        val = float(prob.objectives(z).max())
        if val < f_best:
            z_best, f_best = z, val

    if k == 1:
        z, lower = prob.inner(np.ones(1))
        consider(z)
        lam_best = np.ones(1)
    elif k == 2:
        lam_best, lower = _dual_bisection(prob, consider)
    else:
        lam_best, lower = _dual_mirror_ascent(prob, consider, iters=500)

    it = 0
    z = z_best.copy()
    while it < max_iter and f_best - lower > tol:
        it += 1
        obj = prob.objectives(z)
        e = int(np.argmax(obj))
        g = 2.0 * (prob.A[e] * z - prob.B[e])
        gn = float(g @ g)
        if gn == 0.0:
            break
        target = lower if np.isfinite(lower) else f_best - 1e-3
        step = max(obj[e] - target, 0.0) / gn
        z = _project_monotone_box(z - step * g)
        consider(z)

    converged = (f_best - lower) <= stability_tol
    if not converged:
        log.warning("robust isotonic fit unconverged: gap %.3g after %d iterations", f_best - lower, it)
    # PAVA-then-clip output can carry 1-ulp violations of monotonicity
    values = np.maximum.accumulate(z_best)
    cal = MonotoneMap(prob.knots, values, converged=converged)
    return RobustFit(cal, f_best, float(lower), prob.objectives(values), converged, it, lam_best)


def _dual_bisection(prob: _RobustProblem, consider) -> tuple[np.ndarray, float]:
    """Maximize the concave dual g(s) over lam = (s, 1-s); g'(s) = F_0 - F_1."""

    def at(s):
        lam = np.array([s, 1.0 - s])
        z, g = prob.inner(lam)
        consider(z)
        obj = prob.objectives(z)
        return lam, g, obj[0] - obj[1]

    best_lam, best_g, d0 = at(0.0)
    lam1, g1, d1 = at(1.0)
    if g1 > best_g:
        best_lam, best_g = lam1, g1
    if d0 <= 0.0 or d1 >= 0.0:
        return best_lam, best_g
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        lam, g, d = at(mid)
        if g > best_g:
            best_lam, best_g = lam, g
        if d > 0.0:
            lo = mid
        else:
            hi = mid
    return best_lam, best_g


def _dual_mirror_ascent(prob: _RobustProblem, consider, iters: int) -> tuple[np.ndarray, float]:
    k = prob.A.shape[0]
    lam = np.full(k, 1.0 / k)
    best_lam, best_g = lam, -np.inf
    for t in range(iters):
        z, g = prob.inner(lam)
        consider(z)
        if g > best_g:
            best_lam, best_g = lam, g
        grad = prob.objectives(z)
        scale = max(float(np.ptp(grad)), 1e-12)
        lam = lam * np.exp((1.0 / np.sqrt(t + 1.0)) * (grad - grad.max()) / scale)
        lam /= lam.sum()
    return best_lam, best_g
