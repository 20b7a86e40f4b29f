"""Calibration and invariance metrics.

All scores take probabilities of the positive class ``f`` in [0, 1] and
labels ``y`` in {0, 1}. Reliability bins are equal-width over [0, 1]; a
confidence of exactly 1.0 goes to the last bin.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

DEFAULT_GAMMA = 2.5
DEFAULT_BINS = 10


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def __call__(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return np.exp(-self.gamma * (a[:, None] - b[None, :]) ** 2)


@dataclass(frozen=True)
class ReliabilityBins:
    num_bins: int
    counts: np.ndarray
    conf: np.ndarray  # NaN where the bin is empty
    acc: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.num_bins + 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_lo,bin_hi,count,conf,acc\n")
        e = self.edges
        for b in range(self.num_bins):
            buf.write(f"{e[b]!r},{e[b + 1]!r},{int(self.counts[b])},{float(self.conf[b])!r},{float(self.acc[b])!r}\n")
        return buf.getvalue()


def _check(f, y) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(f, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if f.shape != y.shape:
        raise ValueError(f"predictions {f.shape} and labels {y.shape} differ in length")
    if f.size == 0:
        raise ValueError("empty prediction set")
    if np.any((f < 0) | (f > 1)) or not np.all(np.isfinite(f)):
        raise ValueError("confidences must lie in [0, 1]")
    return f, y


def bin_index(f, num_bins: int) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return np.minimum((f * num_bins).astype(int), num_bins - 1)


def reliability_bins(f, y, num_bins: int = DEFAULT_BINS) -> ReliabilityBins:
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    f, y = _check(f, y)
    idx = bin_index(f, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    sum_f = np.bincount(idx, weights=f, minlength=num_bins)
    sum_y = np.bincount(idx, weights=y, minlength=num_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.where(counts > 0, sum_f / np.maximum(counts, 1), np.nan)
        acc = np.where(counts > 0, sum_y / np.maximum(counts, 1), np.nan)
    return ReliabilityBins(num_bins, counts, conf, acc)


def ece(f, y, num_bins: int = DEFAULT_BINS) -> float:
    bins = reliability_bins(f, y, num_bins)
    occ = bins.counts > 0
    return float(np.sum(bins.counts[occ] / bins.total * np.abs(bins.acc[occ] - bins.conf[occ])))


def brier_decomposition(f, y) -> tuple[float, float, float]:
    """(brier, cal, ref), grouping by exact distinct prediction values."""
    f, y = _check(f, y)
    m = f.size
    values, inv, counts = np.unique(f, return_inverse=True, return_counts=True)
    ybar = np.bincount(inv, weights=y) / counts
    brier = float(np.mean((f - y) ** 2))
    cal = float(np.sum(counts * (values - ybar) ** 2) / m)
    ref = float(np.sum(counts * ybar * (1.0 - ybar)) / m)
    return brier, cal, ref


def mmce_terms(f, y) -> tuple[np.ndarray, np.ndarray]:
    """Confidence r = max(f, 1-f) and correctness c of the thresholded prediction.

    The predicted class is 1 when f >= 0.5 (same tie rule as accuracy).
    """
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.maximum(f, 1.0 - f)
    c = ((f >= 0.5).astype(float) == y).astype(float)
    return r, c


_MMCE_BLOCK = 2048  # rows of the kernel held in memory at once


def mmce_weighted(r, c, weights, kernel: KernelSpec = KernelSpec()) -> float:
    """Squared RKHS norm of sum_i w_i (c_i - r_i) phi(r_i).

    With uniform weights 1/m this is the empirical MMCE; with outcome
    probabilities it is the exact population value.
    """
    r = np.asarray(r, dtype=float)
    a = np.asarray(weights, dtype=float) * (np.asarray(c, dtype=float) - r)
    # the kernel sees only r, so coefficients of equal confidences merge exactly
    u, inv = np.unique(r, return_inverse=True)
    a = np.bincount(inv.ravel(), weights=a, minlength=u.size)
    val = 0.0
    for start in range(0, u.size, _MMCE_BLOCK):
        stop = start + _MMCE_BLOCK
        val += float(a[start:stop] @ (kernel(u[start:stop], u) @ a))
    return max(val, 0.0)


def mmce(f, y, kernel: KernelSpec = KernelSpec()) -> float:
    f, y = _check(f, y)
    r, c = mmce_terms(f, y)
    return mmce_weighted(r, c, np.full(f.size, 1.0 / f.size), kernel)


def clove(preds: Sequence[tuple[np.ndarray, np.ndarray]], kernel: KernelSpec = KernelSpec()) -> float:
    """Sum of per-environment MMCE over (f_e, y_e) pairs."""
    if len(preds) == 0:
        raise ValueError("need at least one environment")
    return float(sum(mmce(f, y, kernel) for f, y in preds))


def irmv1_env(logits, y) -> float:
    """d/dw of the mean cross-entropy of sigmoid(w * logits) at w = 1."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.mean((_sigmoid(z) - y) * z))


def irmv1_penalty(per_env: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Sum over environments of the squared logit-scale derivative."""
    return float(sum(irmv1_env(z, y) ** 2 for z, y in per_env))


def aggregate(scores, mode: str = "mean") -> float:
    s = np.asarray(list(scores), dtype=float)
    if s.size == 0:
        raise ValueError("need at least one score")
    if mode == "mean":
        return float(np.mean(s))
    if mode == "max":
        return float(np.max(s))
    raise ValueError(f"unknown aggregation mode {mode!r}")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def logit(p, eps: float = 1e-12):
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def metric_report(preds: Mapping[str, tuple[np.ndarray, np.ndarray]], num_bins: int = DEFAULT_BINS,
                  kernel: KernelSpec = KernelSpec()) -> dict:
    """Per-environment and aggregate scores in the metric-report JSON layout.

    ``preds`` maps env id to (probabilities, labels). The IRMv1 term uses the
    logits implied by the probabilities.
    """
    per_env = {}
    for env_id, (f, y) in preds.items():
        b, cal, ref = brier_decomposition(f, y)
        per_env[env_id] = {"ece": ece(f, y, num_bins), "mmce": mmce(f, y, kernel),
                           "brier": b, "cal": cal, "ref": ref}
    eces = [v["ece"] for v in per_env.values()]
    return {
        "per_env": per_env,
        "mean_ece": aggregate(eces, "mean"),
        "max_ece": aggregate(eces, "max"),
        "clove": float(sum(v["mmce"] for v in per_env.values())),
        "irmv1": irmv1_penalty([(logit(f), y) for f, y in preds.values()]),
    }
