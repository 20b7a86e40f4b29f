"""Model selection by calibration on validation environments.

Both procedures first recalibrate every candidate with one isotonic map fitted
on the pooled validation data, then score each environment separately.
Ties go to the lowest candidate index.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .calibrate import MonotoneMap, apply, calibrate_naive
from .env_data import EnvironmentBundle
from .metrics import DEFAULT_BINS

Predictor = Callable[[np.ndarray], np.ndarray]


def as_predictor(model) -> Predictor:
    if hasattr(model, "predict"):
        return model.predict
    if callable(model):
        return model
    raise TypeError(f"cannot predict with {type(model).__name__}")


def accuracy(f, y) -> float:
    """Threshold 0.5 with f >= 0.5 mapped to class 1."""
    return float(np.mean((np.asarray(f) >= 0.5) == (np.asarray(y) == 1)))


@dataclass
class SelectionReport:
    mode: str
    model_ids: list[str]
    env_ids: list[str]
    ece: np.ndarray  # [models, envs], after recalibration
    val_acc: np.ndarray
    chosen: str | None
    chosen_index: int | None
    criterion: np.ndarray
    maps: list[MonotoneMap] = field(default_factory=list)
    diagnostic: str = ""
    acc_threshold: float | None = None

    @property
    def worst_ece(self) -> np.ndarray:
        return self.ece.max(axis=1)

    @property
    def mean_ece(self) -> np.ndarray:
        return self.ece.mean(axis=1)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "model_ids": self.model_ids,
            "env_ids": self.env_ids,
            "ece": self.ece.tolist(),
            "worst_ece": self.worst_ece.tolist(),
            "mean_ece": self.mean_ece.tolist(),
            "val_acc": self.val_acc.tolist(),
            "criterion": self.criterion.tolist(),
            "chosen": self.chosen,
            "chosen_index": self.chosen_index,
            "acc_threshold": self.acc_threshold,
            "diagnostic": self.diagnostic,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model_id,env_id,ece,val_acc\n")
        for i, mid in enumerate(self.model_ids):
            for j, eid in enumerate(self.env_ids):
                buf.write(f"{mid},{eid},{float(self.ece[i, j])!r},{float(self.val_acc[i])!r}\n")
        return buf.getvalue()


def _argmin_first(values: np.ndarray, eligible: np.ndarray) -> int | None:
    idx = np.flatnonzero(eligible)
    if idx.size == 0:
        return None
    return int(idx[np.argmin(values[idx])])  # argmin returns the first minimum


def _score_pool(models: Sequence, validation: EnvironmentBundle, num_bins: int):
    if len(models) == 0:
        raise ValueError("candidate pool is empty")
    if len(validation) == 0:
        raise ValueError("validation bundle has no environments")
    ece = np.zeros((len(models), len(validation)))
    val_acc = np.zeros(len(models))
    maps = []
    for i, model in enumerate(models):
        predict = as_predictor(model)
        raw = [(np.asarray(predict(e.features), dtype=float), e.labels) for e in validation]
        cal = calibrate_naive(raw)
        maps.append(cal)
        recal = [(apply(cal, f), y) for f, y in raw]
        for j, (f, y) in enumerate(recal):
            ece[i, j] = metrics.ece(f, y, num_bins)
        val_acc[i] = accuracy(np.concatenate([f for f, _ in recal]), np.concatenate([y for _, y in recal]))
    return ece, val_acc, maps


def _ids(models, model_ids):
    ids = [f"m{i}" for i in range(len(models))] if model_ids is None else [str(m) for m in model_ids]
    if len(ids) != len(models):
        raise ValueError("model_ids must match the pool size")
    return ids


def select_worst_case_ece(models: Sequence, validation: EnvironmentBundle, num_bins: int = DEFAULT_BINS,
                          model_ids: Sequence[str] | None = None) -> SelectionReport:
    """Pick the candidate whose worst per-environment ECE after pooled isotonic recalibration is lowest."""
    ids = _ids(models, model_ids)
    ece, val_acc, maps = _score_pool(models, validation, num_bins)
    crit = ece.max(axis=1)
    k = _argmin_first(crit, np.ones(len(models), dtype=bool))
    return SelectionReport("worst_case_ece", ids, validation.env_ids, ece, val_acc, ids[k], k, crit, maps)


def select_threshold_avg_ece(models: Sequence, validation: EnvironmentBundle, acc_threshold: float,
                             num_bins: int = DEFAULT_BINS, model_ids: Sequence[str] | None = None) -> SelectionReport:
    """Lowest mean ECE among candidates whose recalibrated validation accuracy meets the threshold."""
    if not 0.0 <= acc_threshold <= 1.0:
        raise ValueError("acc_threshold must lie in [0, 1]")
    ids = _ids(models, model_ids)
    ece, val_acc, maps = _score_pool(models, validation, num_bins)
    crit = ece.mean(axis=1)
    k = _argmin_first(crit, val_acc >= acc_threshold)
    diag = "" if k is not None else f"no candidate reaches validation accuracy {acc_threshold}"
    return SelectionReport("threshold_avg_ece", ids, validation.env_ids, ece, val_acc,
                           None if k is None else ids[k], k, crit, maps, diag, acc_threshold)


def evaluate_ood(model, test: EnvironmentBundle, cal_map=None, num_bins: int = DEFAULT_BINS) -> dict:
    """Accuracy, ECE and Brier score of (optionally recalibrated) predictions on held-out environments."""
    if len(test) == 0:
        raise ValueError("test bundle has no environments")
    predict = as_predictor(model)
    per_env = {}
    fs, ys = [], []
    for e in test:
        f = np.asarray(predict(e.features), dtype=float)
        if cal_map is not None:
            f = apply(cal_map, f)
        fs.append(f)
        ys.append(e.labels)
        per_env[e.env_id] = {"accuracy": accuracy(f, e.labels), "ece": metrics.ece(f, e.labels, num_bins),
                             "brier": metrics.brier_decomposition(f, e.labels)[0]}
    f, y = np.concatenate(fs), np.concatenate(ys)
    return {"accuracy": accuracy(f, y), "ece": metrics.ece(f, y, num_bins),
            "brier": metrics.brier_decomposition(f, y)[0], "per_env": per_env}
