"""Logit saliency maps and similar / dissimilar partner search.

A saliency map is the absolute gradient of the cross-entropy loss with
respect to the logits, i.e. ``|softmax(z) - target|``.  Partners are found
by exact cosine-similarity search over the opposite AUM category.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, StateError
from .numerics import DTYPE, check_distribution, softmax

log = logging.getLogger(__name__)


class ZeroSaliencyWarning(RuntimeWarning):
    """A saliency map with zero norm was compared; its similarity is taken as 0."""


@dataclass
class SaliencyMap:
    s: np.ndarray
    owner: int | None = None
    epoch: int | None = None


def saliency_values(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise ``|softmax(z) - t|`` for (N, C) or (C,) inputs."""
    logits = np.asarray(logits, dtype=DTYPE)
    targets = check_distribution(targets)
    if logits.shape != targets.shape:
        raise InvalidInputError("logits and target lengths differ")
    return np.abs(softmax(logits) - targets)


def saliency_map(logits, target, owner: int | None = None, epoch: int | None = None) -> SaliencyMap:
    return SaliencyMap(saliency_values(logits, target), owner, epoch)


def _vec(x) -> np.ndarray:
    return np.asarray(x.s if isinstance(x, SaliencyMap) else x, dtype=DTYPE)


def cosine_similarity(a, b) -> float:
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise InvalidInputError("saliency maps differ in length")
    na = np.sqrt(np.sum(a * a))
    nb = np.sqrt(np.sum(b * b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero saliency map; similarity defined as 0", ZeroSaliencyWarning, stacklevel=2)
        return 0.0
    return float(np.sum(a * b) / (na * nb))


def similarity_matrix(anchors: np.ndarray, pool: np.ndarray, pool_norms: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Cosine similarities (n_anchor, n_pool), zero where either norm is zero.

    Uses the same elementwise product / last-axis sum as
    :func:`cosine_similarity` so both give identical numbers.  Also returns
    the number of zero-norm anchors encountered.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=DTYPE))
    pool = np.asarray(pool, dtype=DTYPE)
    na = np.sqrt(np.sum(anchors * anchors, axis=-1))
    nb = np.sqrt(np.sum(pool * pool, axis=-1)) if pool_norms is None else pool_norms
    dots = np.sum(anchors[:, None, :] * pool[None, :, :], axis=-1)
    denom = na[:, None] * nb[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return sims, int(np.count_nonzero(na == 0))


def select_pair(anchor, pool_ids, pool_maps) -> tuple[int, int]:
    """(most similar id, most dissimilar id) from the pool; ties go to the smallest id."""
    pool_ids = np.asarray(pool_ids, dtype=np.int64)
    if pool_ids.size == 0:
        raise StateError("cannot select partners from an empty pool")
    pool_maps = np.asarray([_vec(m) for m in pool_maps], dtype=DTYPE)
    order = np.argsort(pool_ids, kind="stable")
    sims, zero = similarity_matrix(_vec(anchor)[None, :], pool_maps[order])
    if zero or np.any(np.sqrt(np.sum(pool_maps * pool_maps, axis=-1)) == 0):
        warnings.warn("zero saliency map; similarity defined as 0", ZeroSaliencyWarning, stacklevel=2)
    ids = pool_ids[order]
    return int(ids[np.argmax(sims[0])]), int(ids[np.argmin(sims[0])])


class SaliencyCache:
    """Saliency maps of every training sample at one epoch, indexed by id.

    ``pool(category)`` returns the id-sorted members of a category with
    their maps and norms; :meth:`select_pairs` runs the exact search for a
    whole batch of anchors and counts how many similarities it computed.
    """

    def __init__(self, sample_ids, maps: np.ndarray, epoch: int | None = None):
        self.ids = np.asarray(sample_ids, dtype=np.int64)
        self.maps = np.asarray(maps, dtype=DTYPE)
        self.epoch = epoch
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        self._pools: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self.similarity_computations = 0
        self.zero_norm_events = 0

    def map_of(self, sample_id: int) -> np.ndarray:
        return self.maps[self._row[int(sample_id)]]

    def set_pool(self, name: str, member_ids) -> None:
        member_ids = np.sort(np.asarray(member_ids, dtype=np.int64))
        rows = np.array([self._row[int(i)] for i in member_ids], dtype=np.int64)
        maps = self.maps[rows] if rows.size else np.zeros((0, self.maps.shape[1]))
        norms = np.sqrt(np.sum(maps * maps, axis=-1))
        self.zero_norm_events += int(np.count_nonzero(norms == 0))
        self._pools[name] = (member_ids, maps, norms)

    def select_pairs(self, anchor_maps: np.ndarray, pool: str) -> tuple[np.ndarray, np.ndarray]:
        if pool not in self._pools:
            raise StateError(f"pool {pool!r} has not been built for this epoch")
        ids, maps, norms = self._pools[pool]
        if ids.size == 0:
            raise StateError(f"pool {pool!r} is empty")
        sims, zero = similarity_matrix(anchor_maps, maps, norms)
        self.similarity_computations += sims.size
        self.zero_norm_events += zero
        return ids[np.argmax(sims, axis=1)], ids[np.argmin(sims, axis=1)]


class SaliencyDump:
    """Optional JSONL debug trace of per-sample saliency and chosen partners."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, sample_id: int, epoch: int, saliency, similar: int | None, dissimilar: int | None) -> None:
        rec = {"sample_id": int(sample_id), "epoch": int(epoch), "saliency": [float(x) for x in saliency],
               "similar": None if similar is None else int(similar),
               "dissimilar": None if dissimilar is None else int(dissimilar)}
        self._fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        self._fh.close()
