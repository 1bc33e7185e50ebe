"""Shared training plumbing: tokenised datasets, epoch statistics, plain SGD epochs."""

from __future__ import annotations

import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .calibration import target_matrix
from .errors import InvalidInputError
from .model import Classifier, TokenBatch
from .numerics import GradTape


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 0.3
    label_smoothing: float | None = None

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise InvalidInputError("epochs must be a positive int")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise InvalidInputError("batch_size must be a positive int")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if self.label_smoothing is not None and not 0 < self.label_smoothing < 1:
            raise InvalidInputError("label_smoothing must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingData:
    """Samples with their hashed token ids and (possibly smoothed) target rows."""

    def __init__(self, model: Classifier, samples: Sequence, sigma: float | None = None, _tokens=None):
        self.samples = list(samples)
        if not self.samples:
            raise InvalidInputError("training data is empty")
        self.num_classes = model.config.num_classes
        self.sigma = sigma
        self.ids = np.array([s.id for s in self.samples], dtype=np.int64)
        self.labels = np.array([s.label for s in self.samples], dtype=np.int64)
        self.tokens = _tokens if _tokens is not None else [model.token_ids(s) for s in self.samples]
        self.targets = target_matrix(self.labels, self.num_classes, sigma)
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row) != len(self.samples):
            raise InvalidInputError("duplicate sample ids in training data")

    def __len__(self) -> int:
        return len(self.samples)

    def with_sigma(self, model: Classifier, sigma: float | None) -> TrainingData:
        return TrainingData(model, self.samples, sigma, _tokens=self.tokens)

    def rows_of(self, sample_ids) -> np.ndarray:
        return np.array([self._row[int(i)] for i in sample_ids], dtype=np.int64)

    def batch(self, rows) -> TokenBatch:
        return TokenBatch.from_lists([self.tokens[r] for r in rows])


def predict_logits(model: Classifier, data: TrainingData, chunk: int = 2048) -> np.ndarray:
    out = []
    for lo in range(0, len(data), chunk):
        logits, _ = model.predict(data.batch(range(lo, min(lo + chunk, len(data)))))
        out.append(logits)
    return np.concatenate(out)


@dataclass
class EpochStats:
    epoch: int
    strategy: str
    ablation: str | None = None
    n_anchors: int = 0
    loss_base: float = 0.0
    loss_similar: float | None = None
    loss_dissimilar: float | None = None
    loss_total: float = 0.0
    lambda_draws: int = 0
    similarity_computations: int = 0
    zero_saliency: int = 0
    envelope_violations: int = 0
    seconds: float = 0.0
    lambdas: list[float] = field(default_factory=list, repr=False)

    def log_record(self) -> dict:
        lam = np.asarray(self.lambdas)
        rec = {k: v for k, v in asdict(self).items() if k != "lambdas"}
        rec["lambda"] = (
            {"count": int(lam.size), "mean": float(lam.mean()), "std": float(lam.std()),
             "min": float(lam.min()), "max": float(lam.max())}
            if lam.size else {"count": 0}
        )
        return rec


class _Running:
    """Sample-weighted running means of per-batch losses."""

    def __init__(self):
        self.sums: dict[str, float] = {}
        self.n = 0

    def add(self, n: int, **losses: float) -> None:
        self.n += n
        for k, v in losses.items():
            self.sums[k] = self.sums.get(k, 0.0) + n * float(v)

    def mean(self, key: str) -> float | None:
        return self.sums[key] / self.n if key in self.sums and self.n else None


def batches(order: np.ndarray, batch_size: int):
    for lo in range(0, order.shape[0], batch_size):
        yield order[lo : lo + batch_size]


def train_epoch_vanilla(
    model: Classifier,
    data: TrainingData,
    train_cfg: TrainConfig,
    order: np.ndarray,
    epoch: int = 1,
    on_logits: Callable[[np.ndarray, np.ndarray], None] | None = None,
) -> EpochStats:
    """One pass of mini-batch SGD on plain cross-entropy.

    ``on_logits(sample_ids, logits)`` sees each batch's logits at the
    moment of its forward pass (before the update), which is how margins
    are recorded for AUM.
    """
    t0 = time.perf_counter()
    run = _Running()
    for rows in batches(order, train_cfg.batch_size):
        tape = GradTape()
        _, _, logits = model.tape_forward(tape, data.batch(rows))
        if on_logits is not None:
            on_logits(data.ids[rows], logits.value)
        loss = tape.softmax_xent(logits, data.targets[rows])
        model.zero_grad()
        tape.backward(loss)
        model.sgd_step(train_cfg.learning_rate)
        run.add(len(rows), base=loss.value)
    return EpochStats(
        epoch=epoch, strategy="none", n_anchors=run.n, loss_base=run.mean("base"),
        loss_total=run.mean("base"), seconds=time.perf_counter() - t0,
    )
