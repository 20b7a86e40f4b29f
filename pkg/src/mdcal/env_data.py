"""Environment-indexed datasets, file I/O and synthetic generators.

Three generative processes are provided:

* setting (a): binary label, invariant anti-causal features ``x_ns`` and
  environment-dependent spurious features ``x_sp``, both Gaussian given ``y``
  with means ``(y - 1/2) * mu``;
* setting (b): causal features under covariate shift, a linear-Gaussian
  regression label, and anti-causal spurious features ``x_sp = y * mu_i + noise``;
* two-bit environments: ``Y ~ Rad(0.5)``, ``X1 = Y * Rad(alpha)``,
  ``X2 = Y * Rad(beta)``.

Labels are always stored as {0, 1} (or reals for regression).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

# relative pivot tolerance for the Cholesky-based SPD check
PIVOT_TOL = 1e-10


class SpecError(ValueError):
    """Invalid generator parameters (non-SPD covariance, bad shapes, ...)."""


class BundleParseError(ValueError):
    """Malformed dataset file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Environment:
    env_id: str
    features: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class EnvironmentBundle:
    environments: tuple[Environment, ...]

    def __post_init__(self):
        envs = tuple(self.environments)
        object.__setattr__(self, "environments", envs)
        if not envs:
            raise ValueError("bundle needs at least one environment")
        ids = [e.env_id for e in envs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate env ids: {ids}")
        d = envs[0].features.shape[1]
        for e in envs:
            if e.features.ndim != 2 or e.features.shape[1] != d:
                raise ValueError(f"environment {e.env_id!r} has feature shape {e.features.shape}, expected (*, {d})")
            if e.n < 1 or e.features.shape[0] != e.n:
                raise ValueError(f"environment {e.env_id!r} needs >= 1 row and matching labels")

    @classmethod
    def from_arrays(cls, items: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> "EnvironmentBundle":
        return cls(tuple(
            Environment(str(i), np.asarray(x, dtype=float).reshape(len(y), -1), np.asarray(y, dtype=float))
            for i, x, y in items
        ))

    @property
    def feature_dim(self) -> int:
        return int(self.environments[0].features.shape[1])

    @property
    def env_ids(self) -> list[str]:
        return [e.env_id for e in self.environments]

    def __len__(self) -> int:
        return len(self.environments)

    def __iter__(self):
        return iter(self.environments)

    def __getitem__(self, env_id: str) -> Environment:
        for e in self.environments:
            if e.env_id == env_id:
                return e
        raise KeyError(env_id)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate([e.features for e in self.environments])
        y = np.concatenate([e.labels for e in self.environments])
        return x, y

    def subset(self, env_ids: Sequence[str]) -> "EnvironmentBundle":
        return EnvironmentBundle(tuple(self[i] for i in env_ids))

    def equals(self, other: "EnvironmentBundle") -> bool:
        if self.env_ids != other.env_ids:
            return False
        return all(
            np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
            for a, b in zip(self.environments, other.environments)
        )


# --------------------------------------------------------------------------
# serialization

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def bundle_to_csv(bundle: EnvironmentBundle) -> str:
    buf = io.StringIO()
    d = bundle.feature_dim
    buf.write(",".join(["env", "y"] + [f"x{j}" for j in range(d)]) + "\n")
    for e in bundle:
        for row, y in zip(e.features, e.labels):
            buf.write(",".join([e.env_id, _fmt(y)] + [_fmt(v) for v in row]) + "\n")
    return buf.getvalue()


def bundle_to_json(bundle: EnvironmentBundle) -> str:
    # json.dumps uses repr() which is the shortest exact round-trip form
    payload = {"environments": [
        {"id": e.env_id, "features": e.features.tolist(), "labels": e.labels.tolist()}
        for e in bundle
    ]}
    return json.dumps(payload)


def parse_csv(text: str) -> EnvironmentBundle:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not any(rows):
        raise BundleParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0] != "env" or header[1] != "y":
        raise BundleParseError("header must be env,y,x0,...", line=1)
    d = len(header) - 2
    if header[2:] != [f"x{j}" for j in range(d)]:
        raise BundleParseError("feature columns must be named x0..x{d-1}", line=1)
    groups: dict[str, tuple[list, list]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise BundleParseError(f"expected {d + 2} fields, got {len(row)}", line=lineno)
        env_id = row[0].strip()
        if not env_id:
            raise BundleParseError("empty env id", line=lineno)
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise BundleParseError(f"non-numeric field ({exc})", line=lineno) from None
        xs, ys = groups.setdefault(env_id, ([], []))
        ys.append(vals[0])
        xs.append(vals[1:])
    if not groups:
        raise BundleParseError("no data rows", line=2)
    return EnvironmentBundle.from_arrays([(k, np.array(xs, dtype=float), np.array(ys, dtype=float))
                                          for k, (xs, ys) in groups.items()])


def parse_json(text: str) -> EnvironmentBundle:
    if not text.strip():
        raise BundleParseError("empty file", line=1)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleParseError(exc.msg, line=exc.lineno) from None
    envs = payload.get("environments") if isinstance(payload, dict) else None
    if not isinstance(envs, list) or not envs:
        raise BundleParseError("expected a non-empty 'environments' list")
    items = []
    d = None
    for idx, env in enumerate(envs):
        env_id = env.get("id") if isinstance(env, dict) else None
        if not isinstance(env_id, str):
            raise BundleParseError(f"environment #{idx}: id must be a string, got {type(env_id).__name__}")
        try:
            x = np.array(env["features"], dtype=float)
            y = np.array(env["labels"], dtype=float)
        except (KeyError, ValueError, TypeError) as exc:
            raise BundleParseError(f"environment {env_id!r}: malformed arrays ({exc})") from None
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0] or y.shape[0] == 0:
            raise BundleParseError(f"environment {env_id!r}: inconsistent shapes {x.shape} / {y.shape}")
        if d is None:
            d = x.shape[1]
        elif x.shape[1] != d:
            raise BundleParseError(f"environment {env_id!r}: feature count {x.shape[1]} != {d}")
        items.append((env_id, x, y))
    try:
        return EnvironmentBundle.from_arrays(items)
    except ValueError as exc:
        raise BundleParseError(str(exc)) from None


def load_bundle(path: str | Path, format: str | None = None) -> EnvironmentBundle:
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    text = path.read_text(encoding="utf-8")
    if fmt == "csv":
        return parse_csv(text)
    if fmt == "json":
        return parse_json(text)
    raise ValueError(f"unknown format {fmt!r}")


def save_bundle(bundle: EnvironmentBundle, path: str | Path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    text = bundle_to_csv(bundle) if fmt == "csv" else bundle_to_json(bundle)
    path.write_text(text, encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# generator specs

def cholesky_spd(mat, name: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises SpecError naming ``name`` when the matrix is not symmetric or a
    pivot falls below ``PIVOT_TOL`` relative to the largest diagonal entry.
    """
    a = np.atleast_2d(np.asarray(mat, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise SpecError(f"{name} is not square: shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SpecError(f"{name} has non-finite entries")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise SpecError(f"{name} is not symmetric")
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SpecError(f"{name} is not positive definite") from None
    scale = max(float(np.max(np.abs(np.diag(a)))), np.finfo(float).tiny)
    if np.min(np.diag(chol)) ** 2 <= PIVOT_TOL * scale:
        raise SpecError(f"{name} is numerically singular (pivot below tolerance)")
    return chol


def _vec(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=float))


def _mat(m) -> np.ndarray:
    return np.atleast_2d(np.asarray(m, dtype=float))


@dataclass
class GaussianEnvSpecA:
    """Setting (a): shared invariant block, per-environment spurious block."""

    eta: float
    mu_ns: np.ndarray
    sigma_ns: np.ndarray
    mu_sp: list[np.ndarray]
    sigma_sp: list[np.ndarray]

    def __post_init__(self):
        self.mu_ns = _vec(self.mu_ns)
        self.sigma_ns = _mat(self.sigma_ns)
        self.mu_sp = [_vec(m) for m in self.mu_sp]
        self.sigma_sp = [_mat(s) for s in self.sigma_sp]

    @property
    def k(self) -> int:
        return len(self.mu_sp)

    @property
    def d_ns(self) -> int:
        return self.mu_ns.shape[0]

    @property
    def d_sp(self) -> int:
        return self.mu_sp[0].shape[0]

    def validate(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise SpecError(f"eta={self.eta} outside [0, 1]")
        if self.k < 1 or len(self.sigma_sp) != self.k:
            raise SpecError("need matching, non-empty mu_sp / sigma_sp lists")
        if self.sigma_ns.shape != (self.d_ns, self.d_ns):
            raise SpecError(f"sigma_ns shape {self.sigma_ns.shape} does not match mu_ns")
        cholesky_spd(self.sigma_ns, "sigma_ns")
        for i, (m, s) in enumerate(zip(self.mu_sp, self.sigma_sp)):
            if m.shape != (self.d_sp,) or s.shape != (self.d_sp, self.d_sp):
                raise SpecError(f"environment {i}: inconsistent spurious dimensions")
            cholesky_spd(s, f"sigma_sp[{i}]")

    def scaled(self, c: float) -> "GaussianEnvSpecA":
        return GaussianEnvSpecA(self.eta, self.mu_ns, self.sigma_ns,
                                [c * m for m in self.mu_sp], [c * s for s in self.sigma_sp])

    def to_dict(self) -> dict:
        return {"setting": "a", "eta": self.eta, "mu_ns": self.mu_ns.tolist(), "sigma_ns": self.sigma_ns.tolist(),
                "mu_sp": [m.tolist() for m in self.mu_sp], "sigma_sp": [s.tolist() for s in self.sigma_sp]}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianEnvSpecA":
        return cls(d["eta"], d["mu_ns"], d["sigma_ns"], d["mu_sp"], d["sigma_sp"])


@dataclass
class GaussianEnvSpecB:
    """Setting (b): causal block with covariate shift, anti-causal spurious block."""

    w_c_star: np.ndarray
    sigma_y2: float
    mu_c: list[np.ndarray]
    sigma_c: list[np.ndarray]
    mu_sp: list[np.ndarray]
    sigma_sp: list[np.ndarray]

    def __post_init__(self):
        self.w_c_star = _vec(self.w_c_star)
        self.sigma_y2 = float(self.sigma_y2)
        self.mu_c = [_vec(m) for m in self.mu_c]
        self.sigma_c = [_mat(s) for s in self.sigma_c]
        self.mu_sp = [_vec(m) for m in self.mu_sp]
        self.sigma_sp = [_mat(s) for s in self.sigma_sp]

    @property
    def k(self) -> int:
        return len(self.mu_c)

    @property
    def d_c(self) -> int:
        return self.w_c_star.shape[0]

    @property
    def d_sp(self) -> int:
        return self.mu_sp[0].shape[0]

    def env_means(self) -> np.ndarray:
        """E[Y | e_i] = w_c* . mu_c_i for every environment."""
        return np.array([self.w_c_star @ m for m in self.mu_c])

    def validate(self) -> None:
        if self.sigma_y2 < 0:
            raise SpecError(f"sigma_y2={self.sigma_y2} is negative")
        k = self.k
        if k < 1 or not (len(self.sigma_c) == len(self.mu_sp) == len(self.sigma_sp) == k):
            raise SpecError("per-environment lists must be non-empty and of equal length")
        for i in range(k):
            if self.mu_c[i].shape != (self.d_c,) or self.sigma_c[i].shape != (self.d_c, self.d_c):
                raise SpecError(f"environment {i}: inconsistent causal dimensions")
            if self.mu_sp[i].shape != (self.d_sp,) or self.sigma_sp[i].shape != (self.d_sp, self.d_sp):
                raise SpecError(f"environment {i}: inconsistent spurious dimensions")
            cholesky_spd(self.sigma_c[i], f"sigma_c[{i}]")
            cholesky_spd(self.sigma_sp[i], f"sigma_sp[{i}]")

    def check_nonzero_means(self, tol: float = 1e-12) -> None:
        bad = [i for i, m in enumerate(self.env_means()) if abs(m) <= tol]
        if bad:
            raise SpecError(f"w_c_star . mu_c_i vanishes for environments {bad}")

    def to_dict(self) -> dict:
        return {"setting": "b", "w_c_star": self.w_c_star.tolist(), "sigma_y2": self.sigma_y2,
                "mu_c": [m.tolist() for m in self.mu_c], "sigma_c": [s.tolist() for s in self.sigma_c],
                "mu_sp": [m.tolist() for m in self.mu_sp], "sigma_sp": [s.tolist() for s in self.sigma_sp]}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianEnvSpecB":
        return cls(d["w_c_star"], d["sigma_y2"], d["mu_c"], d["sigma_c"], d["mu_sp"], d["sigma_sp"])


@dataclass(frozen=True)
class TwoBitEnvSpec:
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name}={v} outside [0, 1]")

    @property
    def env_id(self) -> str:
        return f"a{self.alpha:g}_b{self.beta:g}"


def load_spec(path: str | Path) -> GaussianEnvSpecA | GaussianEnvSpecB:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    setting = d.get("setting")
    if setting == "a":
        return GaussianEnvSpecA.from_dict(d)
    if setting == "b":
        return GaussianEnvSpecB.from_dict(d)
    raise SpecError(f"unknown setting {setting!r} in {path}")


# --------------------------------------------------------------------------
# generators

def _mvn(rng: np.random.Generator, chol: np.ndarray, n: int) -> np.ndarray:
    return rng.standard_normal((n, chol.shape[0])) @ chol.T


def generate_setting_a(spec: GaussianEnvSpecA, n_per_env: int, seed: int) -> EnvironmentBundle:
    if n_per_env < 1:
        raise ValueError("n_per_env must be >= 1")
    spec.validate()
    rng = np.random.default_rng(seed)
    l_ns = cholesky_spd(spec.sigma_ns, "sigma_ns")
    envs = []
    for i in range(spec.k):
        l_sp = cholesky_spd(spec.sigma_sp[i], f"sigma_sp[{i}]")
        y = (rng.random(n_per_env) < spec.eta).astype(float)
        shift = (y - 0.5)[:, None]
        x_ns = shift * spec.mu_ns + _mvn(rng, l_ns, n_per_env)
        x_sp = shift * spec.mu_sp[i] + _mvn(rng, l_sp, n_per_env)
        envs.append(Environment(f"e{i}", np.hstack([x_ns, x_sp]), y))
    return EnvironmentBundle(tuple(envs))


def generate_setting_b(spec: GaussianEnvSpecB, n_per_env: int, seed: int) -> EnvironmentBundle:
    if n_per_env < 1:
        raise ValueError("n_per_env must be >= 1")
    spec.validate()
    rng = np.random.default_rng(seed)
    sd_y = np.sqrt(spec.sigma_y2)
    envs = []
    for i in range(spec.k):
        l_c = cholesky_spd(spec.sigma_c[i], f"sigma_c[{i}]")
        l_sp = cholesky_spd(spec.sigma_sp[i], f"sigma_sp[{i}]")
        x_c = spec.mu_c[i] + _mvn(rng, l_c, n_per_env)
        y = x_c @ spec.w_c_star + sd_y * rng.standard_normal(n_per_env)
        x_sp = y[:, None] * spec.mu_sp[i] + _mvn(rng, l_sp, n_per_env)
        envs.append(Environment(f"e{i}", np.hstack([x_c, x_sp]), y))
    return EnvironmentBundle(tuple(envs))


def _rad(rng: np.random.Generator, delta: float, n: int) -> np.ndarray:
    return np.where(rng.random(n) < delta, -1.0, 1.0)


def generate_two_bit(spec: TwoBitEnvSpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns features in {-1, +1}^2 and labels in {0, 1}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    y_sign = _rad(rng, 0.5, n)
    x1 = y_sign * _rad(rng, spec.alpha, n)
    x2 = y_sign * _rad(rng, spec.beta, n)
    return np.column_stack([x1, x2]), (y_sign + 1.0) / 2.0


def two_bit_bundle(specs: Sequence[TwoBitEnvSpec], n: int, seed: int) -> EnvironmentBundle:
    """One environment per spec; environment ``i`` uses the child seed ``i``."""
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    envs = []
    for spec, ss in zip(specs, seeds):
        x, y = generate_two_bit(spec, n, int(ss.generate_state(1)[0]))
        envs.append(Environment(spec.env_id, x, y))
    return EnvironmentBundle(tuple(envs))


def two_bit_posterior(spec: TwoBitEnvSpec, x1, x2):
    """Exact P(Y=+1 | X1=x1, X2=x2) under the two-bit generative model.

    Works elementwise on arrays. Zero-probability feature patterns (possible
    only when alpha or beta is 0 or 1) get 0.5.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    q1 = np.where(x1 > 0, 1.0 - spec.alpha, spec.alpha)
    q2 = np.where(x2 > 0, 1.0 - spec.beta, spec.beta)
    # complements taken directly; 1 - (1 - tiny) would round to 0
    p1 = np.where(x1 > 0, spec.alpha, 1.0 - spec.alpha)
    p2 = np.where(x2 > 0, spec.beta, 1.0 - spec.beta)
    num = q1 * q2
    den = num + p1 * p2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.5)
    return float(out) if out.ndim == 0 else out


def shared_feature(specs: Sequence[TwoBitEnvSpec]) -> int:
    """Index (0 for X1, 1 for X2) of the feature whose flip rate is shared.

    The shared feature is the invariant one; raises when neither or both
    coordinates are shared.
    """
    alphas = {s.alpha for s in specs}
    betas = {s.beta for s in specs}
    if len(alphas) == 1 and len(betas) > 1:
        return 0
    if len(betas) == 1 and len(alphas) > 1:
        return 1
    raise ValueError("cannot identify the invariant feature: exactly one of alpha/beta must be shared")


def two_bit_single_feature_posterior(delta: float, x):
    """P(Y=+1 | X=x) for a single feature X = Y * Rad(delta)."""
    x = np.asarray(x, dtype=float)
    out = np.where(x > 0, 1.0 - delta, delta)
    return float(out) if out.ndim == 0 else out
