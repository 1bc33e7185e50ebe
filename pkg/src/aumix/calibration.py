"""Expected calibration error, label smoothing and temperature scaling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .numerics import DTYPE, softmax

DEFAULT_BINS = 10


@dataclass
class PredictionSet:
    logits: np.ndarray
    probs: np.ndarray
    confidence: np.ndarray
    predicted: np.ndarray
    gold: np.ndarray
    temperature: float | None = None

    @classmethod
    def from_logits(cls, logits, gold, temperature: float | None = None) -> PredictionSet:
        logits = np.asarray(logits, dtype=DTYPE)
        gold = np.asarray(gold, dtype=np.int64)
        if logits.ndim != 2 or logits.shape[0] != gold.shape[0]:
            raise InvalidInputError("logits must be (N, C) with one gold label per row")
        probs = softmax(logits) if temperature is None else apply_temperature(logits, temperature)
        predicted = probs.argmax(axis=1)
        return cls(logits, probs, probs.max(axis=1), predicted, gold, temperature)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.gold

    def __len__(self) -> int:
        return int(self.gold.shape[0])


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    acc: float
    conf: float


@dataclass
class CalibrationReport:
    ece: float
    accuracy: float
    bins: list[CalibrationBin]
    n: int
    temperature: float | None = None
    dataset: str | None = None
    meta: dict = field(default_factory=dict)

    def ece_from_bins(self) -> float:
        return float(sum(b.count / self.n * abs(b.acc - b.conf) for b in self.bins))

    def to_dict(self) -> dict:
        d = {
            "ece": self.ece,
            "accuracy": self.accuracy,
            "n": self.n,
            "bins": [b.__dict__.copy() for b in self.bins],
        }
        if self.temperature is not None:
            d["temperature"] = self.temperature
        if self.dataset is not None:
            d["dataset"] = self.dataset
        d.update(self.meta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationReport:
        known = {"ece", "accuracy", "n", "bins", "temperature", "dataset"}
        return cls(
            ece=d["ece"],
            accuracy=d["accuracy"],
            n=d["n"],
            bins=[CalibrationBin(**b) for b in d["bins"]],
            temperature=d.get("temperature"),
            dataset=d.get("dataset"),
            meta={k: v for k, v in d.items() if k not in known},
        )

    def write_reliability_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "lo", "hi", "count", "acc", "conf", "gap"])
            for i, b in enumerate(self.bins):
                w.writerow([i, repr(b.lo), repr(b.hi), b.count, repr(b.acc), repr(b.conf), repr(abs(b.acc - b.conf))])
        return path


def bin_edges(n_bins: int) -> np.ndarray:
    return np.arange(n_bins + 1, dtype=DTYPE) / n_bins


def _ece_arrays(confidence: np.ndarray, correct: np.ndarray, n_bins: int):
    upper = bin_edges(n_bins)[1:]
    # bin m covers ((m-1)/M, m/M]; searchsorted(side="left") finds the first upper edge >= conf
    idx = np.minimum(np.searchsorted(upper, confidence, side="left"), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=confidence, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct.astype(DTYPE), minlength=n_bins)
    return counts, conf_sum, acc_sum


def ece(preds: PredictionSet, n_bins: int = DEFAULT_BINS, dataset: str | None = None) -> CalibrationReport:
    """Equal-width-bin ECE: sum over bins of |b|/N * |acc(b) - conf(b)|."""
    n = len(preds)
    if n == 0:
        raise InvalidInputError("cannot compute ECE of an empty prediction set")
    if n_bins < 1:
        raise InvalidInputError("need at least one bin")
    counts, conf_sum, acc_sum = _ece_arrays(preds.confidence, preds.correct, n_bins)
    edges = bin_edges(n_bins)
    bins = []
    for m in range(n_bins):
        c = int(counts[m])
        acc = float(acc_sum[m] / c) if c else 0.0
        conf = float(conf_sum[m] / c) if c else 0.0
        bins.append(CalibrationBin(float(edges[m]), float(edges[m + 1]), c, acc, conf))
    return CalibrationReport(
        ece=_ece_from_sums(counts, conf_sum, acc_sum),
        accuracy=float(preds.correct.mean()),
        bins=bins,
        n=n,
        temperature=preds.temperature,
        dataset=dataset,
    )


def _ece_from_sums(counts, conf_sum, acc_sum) -> float:
    occupied = counts > 0
    gaps = np.abs(acc_sum[occupied] / counts[occupied] - conf_sum[occupied] / counts[occupied])
    return float((counts[occupied] / counts.sum() * gaps).sum())


def ece_value(confidence: np.ndarray, correct: np.ndarray, n_bins: int = DEFAULT_BINS) -> float:
    """ECE from raw confidence / correctness arrays, without building a report."""
    return _ece_from_sums(*_ece_arrays(np.asarray(confidence, dtype=DTYPE), np.asarray(correct), n_bins))


# ---------------------------------------------------------------------------
# label smoothing


def smooth_targets(gold: int, num_classes: int, sigma: float) -> np.ndarray:
    """Gold mass 1 - sigma, sigma / (C - 1) on every other class."""
    if num_classes < 2:
        raise InvalidInputError("num_classes must be >= 2")
    if not 0.0 < sigma < 1.0:
        raise InvalidInputError("label smoothing sigma must lie in (0, 1)")
    if not 0 <= gold < num_classes:
        raise InvalidInputError("gold label out of range")
    t = np.full(num_classes, sigma / (num_classes - 1), dtype=DTYPE)
    t[gold] = 1.0 - sigma
    return t


def target_matrix(labels, num_classes: int, sigma: float | None = None) -> np.ndarray:
    """One-hot rows, or label-smoothed rows when ``sigma`` is given."""
    labels = np.asarray(labels, dtype=np.int64)
    if sigma is None:
        out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
        out[np.arange(labels.shape[0]), labels] = 1.0
        return out
    return np.stack([smooth_targets(int(y), num_classes, sigma) for y in labels]) if labels.size else \
        np.zeros((0, num_classes), dtype=DTYPE)


# ---------------------------------------------------------------------------
# temperature scaling


def apply_temperature(logits, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise InvalidInputError("temperature must be > 0")
    return softmax(np.asarray(logits, dtype=DTYPE) / temperature)


def temperature_grid(lo: float = 0.01, hi: float = 5.0, step: float = 0.01) -> np.ndarray:
    if not (0 < lo <= hi) or step <= 0:
        raise InvalidInputError("invalid temperature grid")
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 10)


def fit_temperature(logits, gold, lo: float = 0.01, hi: float = 5.0, step: float = 0.01,
                    n_bins: int = DEFAULT_BINS) -> float:
    """Grid-search the temperature minimising dev-set ECE; ties go to the smallest T."""
    logits = np.asarray(logits, dtype=DTYPE)
    gold = np.asarray(gold, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise InvalidInputError("need a nonempty (N, C) dev logit matrix")
    # canonical row order makes the floating-point sums independent of input order
    order = np.lexsort(np.column_stack([logits, gold]).T[::-1])
    logits, gold = logits[order], gold[order]
    best_t, best_e = None, np.inf
    for t in temperature_grid(lo, hi, step):
        p = apply_temperature(logits, float(t))
        e = ece_value(p.max(axis=1), p.argmax(axis=1) == gold, n_bins)
        if e < best_e:
            best_t, best_e = float(t), e
    return best_t
