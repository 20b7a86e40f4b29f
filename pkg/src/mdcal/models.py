"""Trainable predictors, penalized objectives and their analytic gradients.

Every model exposes its parameters as one flat vector ``theta`` and a
``forward(X, theta)`` that returns logits plus a closure mapping an upstream
gradient on the logits back to ``theta``. Objectives are evaluated per
environment and summed:

    sum_e mean_loss_e + lam * penalty

with penalty one of the CLOvE (summed MMCE) or IRMv1 terms from ``metrics``.
The MMCE correctness indicators are held constant when differentiating.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .env_data import EnvironmentBundle, TwoBitEnvSpec, shared_feature, two_bit_posterior
from .metrics import KernelSpec, _sigmoid

log = logging.getLogger(__name__)

Batch = Sequence[tuple[np.ndarray, np.ndarray]]


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


# --------------------------------------------------------------------------
# model families

class LinearClassifier:
    """f(x) = sigmoid(w.x + b); theta = [w, b]."""

    family = "linear"

    def __init__(self, dim: int, theta=None):
        self.dim = int(dim)
        self.theta = np.zeros(self.dim + 1) if theta is None else np.asarray(theta, dtype=float).copy()
        if self.theta.shape != (self.dim + 1,):
            raise ValueError(f"expected {self.dim + 1} parameters, got {self.theta.shape}")

    @property
    def w(self) -> np.ndarray:
        return self.theta[:-1]

    @property
    def b(self) -> float:
        return float(self.theta[-1])

    def shapes(self) -> dict:
        return {"dim": self.dim}

    def forward(self, X, theta=None):
        theta = self.theta if theta is None else theta
        X = _features(X, self.dim)
        z = X @ theta[:-1] + theta[-1]

        def back(dz):
            return np.concatenate([X.T @ dz, [np.sum(dz)]])

        return z, back

    def logits(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def predict(self, X) -> np.ndarray:
        return _sigmoid(self.logits(X))

    def init(self, rng: np.random.Generator, scale: float) -> None:
        self.theta = np.zeros(self.dim + 1)


class MlpClassifier:
    """tanh hidden layers, sigmoid output. theta packs (W, b) per layer."""

    family = "mlp"

    def __init__(self, dim: int, hidden: Sequence[int] = (16, 16, 16), theta=None):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.widths = (self.dim, *self.hidden, 1)
        n = sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))
        self.theta = np.zeros(n) if theta is None else np.asarray(theta, dtype=float).copy()
        if self.theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.theta.shape}")

    def shapes(self) -> dict:
        return {"dim": self.dim, "hidden": list(self.hidden)}

    def _unpack(self, theta):
        out, pos = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            W = theta[pos:pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, theta[pos:pos + b]))
            pos += b
        return out

    def forward(self, X, theta=None):
        theta = self.theta if theta is None else theta
        layers = self._unpack(theta)
        acts = [_features(X, self.dim)]
        for W, b in layers[:-1]:
            acts.append(np.tanh(acts[-1] @ W + b))
        W, b = layers[-1]
        z = (acts[-1] @ W + b)[:, 0]

        def back(dz):
            grads = []
            delta = dz[:, None]
            for i in range(len(layers) - 1, -1, -1):
                W_i = layers[i][0]
                grads.append((acts[i].T @ delta, delta.sum(axis=0)))
                if i > 0:
                    delta = (delta @ W_i.T) * (1.0 - acts[i] ** 2)
            return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])

        return z, back

    def logits(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def predict(self, X) -> np.ndarray:
        return _sigmoid(self.logits(X))

    def init(self, rng: np.random.Generator, scale: float) -> None:
        parts = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            parts.append(rng.normal(0.0, scale / np.sqrt(a), size=a * b))
            parts.append(np.zeros(b))
        self.theta = np.concatenate(parts)


class TwoMomentRegressor:
    """Mean w.x with a constant variance estimate c > 0; theta = w."""

    family = "two_moment"

    def __init__(self, dim: int, theta=None, c: float = 1.0):
        self.dim = int(dim)
        self.theta = np.zeros(self.dim) if theta is None else np.asarray(theta, dtype=float).copy()
        if not c > 0:
            raise ValueError("variance estimate must be positive")
        self.c = float(c)

    def shapes(self) -> dict:
        return {"dim": self.dim, "c": self.c}

    def forward(self, X, theta=None):
        theta = self.theta if theta is None else theta
        X = _features(X, self.dim)

        def back(dz):
            return X.T @ dz

        return X @ theta, back

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        mean = self.forward(X)[0]
        return mean, np.full_like(mean, self.c)

    def init(self, rng: np.random.Generator, scale: float) -> None:
        self.theta = np.zeros(self.dim)


FAMILIES = {"linear": LinearClassifier, "mlp": MlpClassifier, "two_moment": TwoMomentRegressor}


def _features(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != dim:
        raise ValueError(f"feature width {X.shape[1]} does not match model width {dim}")
    return X


def forward(model, X) -> np.ndarray:
    return model.predict(X)


# --------------------------------------------------------------------------
# objectives

@dataclass(frozen=True)
class ObjectiveSpec:
    base_loss: str = "cross_entropy"
    penalty: str = "none"
    lam: float = 0.0
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        if self.base_loss not in ("cross_entropy", "squared"):
            raise ValueError(f"unknown base loss {self.base_loss!r}")
        if self.penalty not in ("none", "clove", "irmv1"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")

    def to_dict(self) -> dict:
        return {"base_loss": self.base_loss, "penalty": self.penalty, "lam": self.lam,
                "kernel": asdict(self.kernel)}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        kern = KernelSpec(**d.get("kernel", {}))
        return cls(d.get("base_loss", "cross_entropy"), d.get("penalty", "none"), float(d.get("lam", 0.0)), kern)


def _as_batch(data) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(data, EnvironmentBundle):
        return [(e.features, e.labels) for e in data]
    return [(np.asarray(X, dtype=float), np.asarray(y, dtype=float)) for X, y in data]


def mmce_grad_r(r, c, kernel: KernelSpec, with_ka: bool = False):
    """Empirical MMCE and its gradient in the confidences r (c fixed).

    With ``with_ka`` also returns 2 K a / m^2, the gradient in the
    correctness flags.
    """
    m = r.size
    a = c - r
    K = kernel(r, r)
    Ka = K @ a
    val = float(a @ Ka) / m ** 2
    if val < 0:
        val, grad, Ka = 0.0, np.zeros(m), np.zeros(m)
    else:
        # sum_j K_lj a_j (r_l - r_j)
        cross = r * Ka - K @ (a * r)
        grad = (-2.0 * Ka - 4.0 * kernel.gamma * a * cross) / m ** 2
    if with_ka:
        return val, grad, 2.0 * Ka / m ** 2
    return val, grad


def _env_terms(model, X, y, spec: ObjectiveSpec, theta, need_grad: bool):
    """(base_loss, penalty_contribution_raw, dz_base, penalty_aux) for one environment."""
    z, back = model.forward(X, theta)
    m = y.size
    if model.family == "two_moment":
        if spec.penalty != "none" or spec.base_loss != "squared":
            raise ValueError("the regressor supports only squared loss without penalty")
        resid = z - y
        return float(np.mean(resid ** 2)), 2.0 * resid / m, back, z
    f = _sigmoid(z)
    if spec.base_loss == "cross_entropy":
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (f - y) / m
    else:
        loss = float(np.mean((f - y) ** 2))
        dz = 2.0 * (f - y) * f * (1.0 - f) / m
    return loss, dz, back, z


def objective_terms(model, data, spec: ObjectiveSpec, theta=None) -> tuple[float, float, float]:
    """(objective, summed base loss, penalty) on a bundle or list of (X, y)."""
    total, _ = _objective_and_grad(model, _as_batch(data), spec, theta, need_grad=False)
    return total


def objective(model, data, spec: ObjectiveSpec, theta=None) -> float:
    return objective_terms(model, data, spec, theta)[0]


def gradient(model, data, spec: ObjectiveSpec, theta=None) -> np.ndarray:
    return _objective_and_grad(model, _as_batch(data), spec, theta, need_grad=True)[1]


def _objective_and_grad(model, batch, spec: ObjectiveSpec, theta, need_grad: bool,
                        flag_smoothing: float = 0.0, drop_diagonal: bool = False):
    """Objective terms and gradient.

    ``flag_smoothing > 0`` adds a descent-direction surrogate for the flag
    flips at f = 0.5: the derivative of a logistic soft flag of that width in
    f. ``drop_diagonal`` removes the i = j terms from the MMCE gradient, whose
    1/m bias rewards confident predictions on small batches. The returned
    objective is unchanged by either.
    """
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    if len(batch) == 0:
        raise ValueError("need at least one environment")
    grad = np.zeros_like(theta)
    base_total = 0.0
    pen_total = 0.0
    for X, y in batch:
        loss, dz, back, z = _env_terms(model, X, y, spec, theta, need_grad)
        base_total += loss
        if spec.penalty == "clove":
            f = _sigmoid(z)
            r, c = metrics.mmce_terms(f, y)
            val, g_r, g_c = mmce_grad_r(r, c, spec.kernel, with_ka=True)
            pen_total += val
            dr_df = np.where(f >= 0.5, 1.0, -1.0)
            if drop_diagonal:
                a = c - r
                g_r = g_r + 2.0 * a / y.size ** 2
                g_c = g_c - 2.0 * a / y.size ** 2
            g_f = g_r * dr_df
            if flag_smoothing > 0:
                s = _sigmoid((f - 0.5) / flag_smoothing)
                g_f = g_f + g_c * np.where(y == 1, 1.0, -1.0) * s * (1.0 - s) / flag_smoothing
            dz = dz + spec.lam * g_f * f * (1.0 - f)
        elif spec.penalty == "irmv1":
            f = _sigmoid(z)
            d_e = float(np.mean((f - y) * z))
            pen_total += d_e ** 2
            dz = dz + spec.lam * 2.0 * d_e * ((f * (1.0 - f)) * z + f - y) / y.size
        if need_grad:
            grad += back(dz)
    return (base_total + spec.lam * pen_total, base_total, pen_total), grad


def finite_difference_gradient(model, data, spec: ObjectiveSpec, theta=None, h: float = 1e-5) -> np.ndarray:
    theta = (model.theta if theta is None else np.asarray(theta, dtype=float)).copy()
    batch = _as_batch(data)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (objective(model, batch, spec, tp) - objective(model, batch, spec, tm)) / (2 * h)
    return g


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    steps: int = 500
    batch_size: int = 512
    seed: int = 0
    optimizer: str = "sgd"
    init_scale: float = 1.0
    flag_smoothing: float = 0.0  # width in f of the soft-flag surrogate; 0 keeps flags constant
    anneal_steps: int = 0  # penalty weight is min(lam, 1) before this step
    drop_diagonal: bool = False  # U-statistic MMCE gradient on minibatches

    def __post_init__(self):
        if self.flag_smoothing < 0 or self.anneal_steps < 0:
            raise ValueError("flag_smoothing and anneal_steps must be >= 0")
        if self.optimizer not in ("sgd", "adagrad", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (self.lr > 0 and self.steps >= 0 and self.batch_size >= 1):
            raise ValueError("need lr > 0, steps >= 0, batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    model: object
    objective: ObjectiveSpec
    config: TrainConfig | None = None
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)

    def predict(self, X):
        return self.model.predict(X)

    def to_dict(self) -> dict:
        return {
            "family": self.model.family,
            "shapes": self.model.shapes(),
            "params": [float(v) for v in self.model.theta],
            "objective": self.objective.to_dict(),
            "train": None if self.config is None else self.config.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        fam = d["family"]
        shapes = dict(d["shapes"])
        if fam not in FAMILIES:
            raise ValueError(f"unknown model family {fam!r}")
        model = FAMILIES[fam](theta=d["params"], **shapes)
        cfg = None if d.get("train") is None else TrainConfig(**d["train"])
        return cls(model, ObjectiveSpec.from_dict(d["objective"]), cfg)

    @classmethod
    def from_json(cls, text: str) -> "TrainedModel":
        return cls.from_dict(json.loads(text))

    def trace_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,objective,base_loss,penalty\n")
        for step, obj, base, pen in self.trace:
            buf.write(f"{step},{obj!r},{base!r},{pen!r}\n")
        return buf.getvalue()


def make_model(family: str, dim: int, **kw):
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}")
    return FAMILIES[family](dim, **kw)


def train(bundle: EnvironmentBundle, spec: ObjectiveSpec, config: TrainConfig = TrainConfig(),
          model=None, family: str = "linear") -> TrainedModel:
    """Minibatch first-order training with per-environment batches each step."""
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = make_model(family, bundle.feature_dim)
        model.init(rng, config.init_scale)
    envs = [(e.features, e.labels) for e in bundle]
    theta = model.theta.copy()
    state = np.zeros_like(theta)
    state2 = np.zeros_like(theta)
    trace = []
    warm = replace(spec, lam=min(spec.lam, 1.0))
    for step in range(config.steps):
        batch = []
        for X, y in envs:
            if config.batch_size >= y.size:
                batch.append((X, y))
            else:
                idx = rng.choice(y.size, size=config.batch_size, replace=False)
                batch.append((X[idx], y[idx]))
        step_spec = warm if step < config.anneal_steps else spec
        terms, g = _objective_and_grad(model, batch, step_spec, theta, True, config.flag_smoothing,
                                       config.drop_diagonal)
        if not (np.isfinite(terms[0]) and np.all(np.isfinite(g))):
            raise TrainingError("non-finite objective or gradient", step)
        trace.append((step, *terms))
        if config.optimizer == "sgd":
            theta = theta - config.lr * g
        elif config.optimizer == "adagrad":
            state += g * g
            theta = theta - config.lr * g / (np.sqrt(state) + 1e-8)
        else:
            b1, b2 = 0.9, 0.999
            state = b1 * state + (1 - b1) * g
            state2 = b2 * state2 + (1 - b2) * g * g
            mhat = state / (1 - b1 ** (step + 1))
            vhat = state2 / (1 - b2 ** (step + 1))
            theta = theta - config.lr * mhat / (np.sqrt(vhat) + 1e-8)
    model.theta = theta
    if model.family == "two_moment":
        resid = np.concatenate([y - model.forward(X)[0] for X, y in envs])
        model.c = max(float(np.mean(resid ** 2)), 1e-12)
    return TrainedModel(model, spec, config, trace)


def accuracy(f, y) -> float:
    """Threshold-0.5 accuracy; exactly 0.5 predicts class 1."""
    return float(np.mean((np.asarray(f) >= 0.5).astype(float) == np.asarray(y, dtype=float)))


# --------------------------------------------------------------------------
# two-bit population landscape

# feature patterns in a fixed order; rows of the 8-outcome table are
# (pattern, label) with label 1 first
PATTERNS = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)


def two_bit_joint(spec: TwoBitEnvSpec) -> np.ndarray:
    """P(X = pattern, Y = y) as a [4, 2] array, columns (y=1, y=0)."""
    out = np.zeros((4, 2))
    for i, (x1, x2) in enumerate(PATTERNS):
        for j, ys in enumerate((1.0, -1.0)):
            p1 = (1 - spec.alpha) if x1 == ys else spec.alpha
            p2 = (1 - spec.beta) if x2 == ys else spec.beta
            out[i, j] = 0.5 * p1 * p2
    return out


def odd_pattern_values(v1, v2, invariant: int) -> np.ndarray:
    """Outputs in [-1, 1] on the 4 patterns for the odd classifier (v1, v2).

    v1 is the output on (1, 1); v2 the output on the pattern obtained by
    negating the non-invariant coordinate. The diagonal v1 == v2 is the set of
    classifiers that depend on the invariant feature only.
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if invariant == 0:
        # (1,1)->v1, (1,-1)->v2, (-1,1)->-v2, (-1,-1)->-v1
        return np.stack([v1, v2, -v2, -v1], axis=-1)
    # (1,1)->v1, (-1,1)->v2, (1,-1)->-v2, (-1,-1)->-v1
    return np.stack([v1, -v2, v2, -v1], axis=-1)


def _clip_p(p):
    return np.clip(p, 1e-15, 1 - 1e-15)


def population_scores(probs, spec: TwoBitEnvSpec, kernel: KernelSpec = KernelSpec()) -> dict:
    """Exact population CE, MMCE and signed IRMv1 derivative.

    ``probs`` has shape [..., 4]: P(Y=1) on each pattern.
    """
    probs = np.asarray(probs, dtype=float)
    joint = two_bit_joint(spec)
    px = joint.sum(axis=1)
    pc = _clip_p(probs)
    ce = -(joint[:, 0] * np.log(pc) + joint[:, 1] * np.log1p(-pc)).sum(axis=-1)
    z = np.log(pc) - np.log1p(-pc)
    irm = ((probs * px - joint[:, 0]) * z).sum(axis=-1)

    # 8 outcomes: (pattern i, y=1) then (pattern i, y=0)
    f8 = np.concatenate([probs, probs], axis=-1)
    y8 = np.concatenate([np.ones(4), np.zeros(4)])
    w8 = np.concatenate([joint[:, 0], joint[:, 1]])
    r = np.maximum(f8, 1.0 - f8)
    c = ((f8 >= 0.5) == (y8 == 1)).astype(float)
    a = w8 * (c - r)
    K = np.exp(-kernel.gamma * (r[..., :, None] - r[..., None, :]) ** 2)
    mm = np.einsum("...i,...ij,...j->...", a, K, a)
    return {"ce": ce, "mmce": np.maximum(mm, 0.0), "irm_d": irm, "irmv1": irm ** 2}


def landscape_grid(n: int = 401) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n)


def two_bit_population_penalties(envs: Sequence[TwoBitEnvSpec], grid=None, invariant: int | None = None,
                                 kernel: KernelSpec = KernelSpec()) -> dict:
    """Population train loss and per-environment MMCE / IRMv1 over an odd-classifier grid.

    Grid axes are output values v in [-1, 1] mapped to probabilities (1 + v) / 2.
    Arrays are indexed [i, j] for (v1 = grid[i], v2 = grid[j]).
    """
    grid = landscape_grid() if grid is None else np.asarray(grid, dtype=float)
    if invariant is None:
        invariant = shared_feature(envs)
    V1, V2 = np.meshgrid(grid, grid, indexing="ij")
    probs = (1.0 + odd_pattern_values(V1, V2, invariant)) / 2.0
    out = {"grid": grid, "invariant": invariant, "train_loss": np.zeros_like(V1), "mmce": [], "irmv1": [], "irm_d": []}
    for spec in envs:
        s = population_scores(probs, spec, kernel)
        out["train_loss"] += s["ce"]
        out["mmce"].append(s["mmce"])
        out["irmv1"].append(s["irmv1"])
        out["irm_d"].append(s["irm_d"])
    return out


def landscape_csv(land: dict) -> str:
    """Grid CSV with columns p1,p2,train_loss,mmce_e1,mmce_e2,irmv1_e1,irmv1_e2 (two envs)."""
    if len(land["mmce"]) != 2:
        raise ValueError("landscape CSV layout is defined for exactly two environments")
    grid = land["grid"]
    p = (1.0 + grid) / 2.0
    buf = io.StringIO()
    buf.write("p1,p2,train_loss,mmce_e1,mmce_e2,irmv1_e1,irmv1_e2\n")
    tl, m1, m2 = land["train_loss"], land["mmce"][0], land["mmce"][1]
    i1, i2 = land["irmv1"][0], land["irmv1"][1]
    for i in range(grid.size):
        for j in range(grid.size):
            buf.write(f"{p[i]!r},{p[j]!r},{tl[i, j]!r},{m1[i, j]!r},{m2[i, j]!r},{i1[i, j]!r},{i2[i, j]!r}\n")
    return buf.getvalue()


def _probs_at(v, invariant: int) -> np.ndarray:
    return (1.0 + odd_pattern_values(v[0], v[1], invariant)) / 2.0


def find_common_irmv1_zeros(envs: Sequence[TwoBitEnvSpec], invariant: int, grid=None,
                            tol: float = 1e-10) -> list[np.ndarray]:
    """Common zeros of every environment's signed IRMv1 derivative, off the constant point.

    Seeds come from grid cells where the summed squared derivatives are local
    minima; each seed is refined by a nonlinear root solve.
    """
    from scipy.optimize import root

    grid = landscape_grid(201) if grid is None else grid
    land = two_bit_population_penalties(envs, grid, invariant)
    total = sum(land["irmv1"])
    # local minima in the 3x3 neighbourhood
    padded = np.pad(total, 1, constant_values=np.inf)
    nbr = np.min([padded[1 + di:1 + di + total.shape[0], 1 + dj:1 + dj + total.shape[1]]
                  for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)], axis=0)
    cand = np.argwhere(total <= nbr)

    def resid(v):
        v = np.clip(v, -1 + 1e-9, 1 - 1e-9)
        p = _probs_at(v, invariant)
        return np.array([population_scores(p, s)["irm_d"] for s in envs[:2]])

    roots: list[np.ndarray] = []
    for i, j in cand:
        sol = root(resid, np.array([grid[i], grid[j]]), method="hybr", tol=1e-14)
        v = np.clip(sol.x, -1 + 1e-9, 1 - 1e-9)
        p = _probs_at(v, invariant)
        if max(abs(population_scores(p, s)["irm_d"]) for s in envs) > tol:
            continue
        if np.max(np.abs(v)) < 1e-6:
            continue
        if all(np.max(np.abs(v - r)) > 1e-6 for r in roots):
            roots.append(v)
    return roots


def two_bit_landscape_analysis(train_envs: Sequence[TwoBitEnvSpec], test_env: TwoBitEnvSpec,
                               n_grid: int = 401, mmce_tol: float = 1e-6) -> dict:
    """Penalty-zero structure of the two-bit landscape and the loss comparisons at its optima."""
    invariant = shared_feature(train_envs)
    grid = landscape_grid(n_grid)
    land = two_bit_population_penalties(train_envs, grid, invariant)
    step = grid[1] - grid[0]
    common = np.all([m < mmce_tol for m in land["mmce"]], axis=0)
    pts = np.array([[grid[i], grid[j]] for i, j in np.argwhere(common)]).reshape(-1, 2)
    near_diag = np.abs(pts[:, 0] - pts[:, 1]) <= step * (1 + 1e-9)
    near_const = np.max(np.abs(pts), axis=1) <= step * (1 + 1e-9)

    # invariant optimum: calibrated on the invariant feature alone
    delta = train_envs[0].alpha if invariant == 0 else train_envs[0].beta
    v_inv = 1.0 - 2.0 * delta
    opt_clove = np.array([v_inv, v_inv])
    irm_roots = [r for r in find_common_irmv1_zeros(train_envs, invariant)
                 if abs(r[0] - r[1]) > 1e-6]

    def loss(v, envs):
        p = _probs_at(v, invariant)
        return float(sum(population_scores(p, s)["ce"] for s in envs))

    result = {
        "invariant_feature": invariant,
        "grid_step": float(step),
        "mmce_common_zeros": pts.tolist(),
        "mmce_zeros_explained": bool(np.all(near_diag | near_const)),
        "opt_clove": opt_clove.tolist(),
        "opt_clove_train_loss": loss(opt_clove, train_envs),
        "opt_clove_test_loss": loss(opt_clove, [test_env]),
        "opt_irmv1": None,
    }
    if irm_roots:
        best = min(irm_roots, key=lambda v: loss(v, train_envs))
        result["opt_irmv1"] = best.tolist()
        result["opt_irmv1_train_loss"] = loss(best, train_envs)
        result["opt_irmv1_test_loss"] = loss(best, [test_env])
    return result


def invariant_posterior_model(specs: Sequence[TwoBitEnvSpec]) -> Callable[[np.ndarray], np.ndarray]:
    """The invariant-feature Bayes posterior as a callable on two-bit features."""
    invariant = shared_feature(specs)
    delta = specs[0].alpha if invariant == 0 else specs[0].beta

    def predict(X):
        x = np.asarray(X, dtype=float)[:, invariant]
        return np.where(x > 0, 1.0 - delta, delta)

    return predict


def bayes_posterior_model(spec: TwoBitEnvSpec) -> Callable[[np.ndarray], np.ndarray]:
    def predict(X):
        X = np.asarray(X, dtype=float)
        return np.asarray(two_bit_posterior(spec, X[:, 0], X[:, 1]), dtype=float)

    return predict
