"""Per-sample margins across training epochs, AUM, and the median split."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, StateError

log = logging.getLogger(__name__)

HIGH = "HIGH"
LOW = "LOW"


def margin(logits, gold: int) -> float:
    """Gold logit minus the largest other logit."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise InvalidInputError("margin needs a logit vector of length >= 2")
    if not 0 <= gold < z.shape[0]:
        raise InvalidInputError(f"gold label {gold} out of range for {z.shape[0]} classes")
    others = np.delete(z, gold)
    return float(z[gold] - others.max())


def batch_margins(logits: np.ndarray, gold: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, gold] = -np.inf
    return z[rows, gold] - masked.max(axis=1)


@dataclass
class Categorization:
    high: list[int]
    low: list[int]
    threshold: float | None

    def category_of(self) -> dict[int, str]:
        out = {i: HIGH for i in self.high}
        out.update({i: LOW for i in self.low})
        return out

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "high": list(self.high), "low": list(self.low)}

    @classmethod
    def from_dict(cls, d: Mapping) -> Categorization:
        return cls(high=[int(i) for i in d["high"]], low=[int(i) for i in d["low"]],
                   threshold=None if d.get("threshold") is None else float(d["threshold"]))


class MarginLedger:
    """Margin history for a fixed set of training samples.

    Margins are appended one (sample, epoch) at a time while training
    runs; epochs must be recorded in increasing order and each sample
    exactly once per epoch.
    """

    def __init__(self, sample_ids: Iterable[int]):
        self.sample_ids = [int(i) for i in sample_ids]
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise InvalidInputError("duplicate sample ids in ledger")
        self._margins: dict[int, list[float]] = {i: [] for i in self.sample_ids}
        self._epochs: list[int] = []
        self._seen_this_epoch: set[int] = set()

    @property
    def epochs(self) -> list[int]:
        return list(self._epochs)

    def margins(self, sample_id: int) -> list[float]:
        return list(self._margins[sample_id])

    def begin_epoch(self, epoch: int) -> None:
        if self._epochs and epoch <= self._epochs[-1]:
            raise StateError(f"epoch {epoch} already recorded or out of order")
        self._check_epoch_complete()
        self._epochs.append(epoch)
        self._seen_this_epoch = set()

    def _check_epoch_complete(self) -> None:
        if self._epochs and len(self._seen_this_epoch) != len(self.sample_ids):
            missing = len(self.sample_ids) - len(self._seen_this_epoch)
            raise StateError(f"epoch {self._epochs[-1]} is missing {missing} samples")

    def record(self, epoch: int, sample_id: int, logits, gold: int) -> float:
        if not self._epochs or epoch != self._epochs[-1]:
            raise StateError(f"epoch {epoch} is not the open epoch")
        if sample_id in self._seen_this_epoch:
            raise StateError(f"sample {sample_id} already recorded for epoch {epoch}")
        if sample_id not in self._margins:
            raise InvalidInputError(f"unknown sample id {sample_id}")
        m = margin(logits, gold)
        self._margins[sample_id].append(m)
        self._seen_this_epoch.add(sample_id)
        return m

    def record_batch(self, epoch: int, sample_ids, logits: np.ndarray, gold) -> None:
        for sid, z, y in zip(sample_ids, np.asarray(logits), gold):
            self.record(epoch, int(sid), z, int(y))

    def record_epoch(self, epoch: int, logits_by_id: Mapping[int, np.ndarray], gold_by_id: Mapping[int, int]) -> None:
        """Record a whole epoch at once (every sample must be present)."""
        self.begin_epoch(epoch)
        for sid in self.sample_ids:
            if sid not in logits_by_id:
                raise StateError(f"sample {sid} missing from epoch {epoch}")
            self.record(epoch, sid, logits_by_id[sid], gold_by_id[sid])
        self._check_epoch_complete()

    def compute_aum(self) -> dict[int, float]:
        """Mean margin per sample; every sample must have one margin per epoch."""
        self._check_epoch_complete()
        t = len(self._epochs)
        if t == 0:
            raise StateError("no epochs recorded")
        out = {}
        for sid, ms in self._margins.items():
            if len(ms) != t:
                raise StateError(f"sample {sid} has {len(ms)} margins, expected {t}")
            out[sid] = float(np.mean(ms))
        return out

    def write_csv(self, path, categorization: Categorization | None = None, provenance: Mapping | None = None) -> Path:
        """One row per sample: margins per epoch, AUM, category.

        ``provenance`` (e.g. config hash and seed) goes into a leading
        ``# key=value`` comment line.
        """
        aum = self.compute_aum()
        cats = categorization.category_of() if categorization else {}
        path = Path(path)
        with open(path, "w", newline="") as fh:
            if provenance:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
            w = csv.writer(fh)
            w.writerow(["sample_id"] + [f"epoch_{e}" for e in self._epochs] + ["aum", "category"])
            for sid in self.sample_ids:
                w.writerow([sid] + [repr(m) for m in self._margins[sid]] + [repr(aum[sid]), cats.get(sid, "")])
        return path


def read_ledger_csv(path) -> tuple[dict, list[dict]]:
    """Parse a ledger CSV back into (provenance, rows)."""
    prov, lines = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                prov.update(kv.split("=", 1) for kv in line[1:].split())
            else:
                lines.append(line)
    return prov, list(csv.DictReader(lines))


def median(values) -> float:
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    n = v.shape[0]
    mid = n // 2
    return float(v[mid]) if n % 2 else float((v[mid - 1] + v[mid]) / 2.0)


def categorize(aum: Mapping[int, float]) -> Categorization:
    """LOW iff AUM < median(AUM), HIGH otherwise; ids are returned sorted."""
    if not aum:
        raise InvalidInputError("cannot categorize an empty ledger")
    threshold = median(aum.values())
    low = sorted(i for i, a in aum.items() if a < threshold)
    high = sorted(i for i, a in aum.items() if not a < threshold)
    if not low:
        log.warning("all AUM values are >= the median (%.6g); D_low is empty", threshold)
    return Categorization(high=high, low=low, threshold=threshold)


def random_split(sample_ids, rng: np.random.Generator) -> Categorization:
    """Balanced random HIGH/LOW split (the no-AUM ablation)."""
    ids = np.array(sorted(int(i) for i in sample_ids))
    perm = rng.permutation(ids.shape[0])
    half = (ids.shape[0] + 1) // 2
    return Categorization(high=sorted(ids[perm[:half]].tolist()), low=sorted(ids[perm[half:]].tolist()),
                          threshold=None)
