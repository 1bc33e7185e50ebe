"""Mixup primitives and the training strategies built on them.

Strategies
----------
``none``            plain cross-entropy training.
``input_mixup``     random partner, interpolation of mean-pooled input embeddings.
``manifold_mixup``  random partner, interpolation of the pooled hidden state.
``proposed``        AUM/saliency guided: each anchor is mixed with its most
                    similar and most dissimilar partner from the opposite AUM
                    category at the hidden-state level, and the loss is
                    ``beta*base + gamma*similar_mix + delta*dissimilar_mix``.
"""

from __future__ import annotations

import enum
import logging
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import HIGH, LOW, Categorization, MarginLedger
from .errors import InvalidInputError, StateError
from .model import Classifier
from .numerics import DTYPE, GradTape, convex_mix, mixing_weights
from .saliency import SaliencyCache, SaliencyDump, saliency_values
from .training import (
    EpochStats,
    TrainConfig,
    TrainingData,
    _Running,
    batches,
    predict_logits,
    train_epoch_vanilla,
)

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    NONE = "none"
    INPUT_MIXUP = "input_mixup"
    MANIFOLD_MIXUP = "manifold_mixup"
    PROPOSED = "proposed"


class Ablation(str, enum.Enum):
    FULL = "full"
    NO_AUM = "no_aum"
    NO_SALIENCY = "no_saliency"
    NO_SIMILAR = "no_similar"
    NO_DISSIMILAR = "no_dissimilar"


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.4
    beta: float = 0.8
    gamma: float = 0.1
    delta: float = 0.1
    strategy: Strategy = Strategy.NONE
    ablation: Ablation = Ablation.FULL
    fixed_lambda: float | None = None  # bypasses Beta sampling; for tests and degenerate runs

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "ablation", Ablation(self.ablation))
        if not self.alpha > 0:
            raise InvalidInputError("alpha must be > 0")
        if min(self.beta, self.gamma, self.delta) < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if abs(self.beta + self.gamma + self.delta - 1.0) > 1e-9:
            raise InvalidInputError("beta + gamma + delta must equal 1")
        if self.fixed_lambda is not None and not 0 <= self.fixed_lambda <= 1:
            raise InvalidInputError("fixed_lambda must lie in [0, 1]")

    def effective_weights(self) -> tuple[float, float | None, float | None]:
        """(base, similar, dissimilar) weights after ablation; None marks a dropped term."""
        b, g, d = self.beta, self.gamma, self.delta
        if self.ablation is Ablation.NO_SIMILAR:
            return b / (b + d), None, d / (b + d)
        if self.ablation is Ablation.NO_DISSIMILAR:
            return b / (b + g), g / (b + g), None
        return b, g, d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["ablation"] = self.ablation.value
        return d


@dataclass
class MixedExample:
    x: np.ndarray
    y: np.ndarray
    lam: float
    parents: tuple[int | None, int | None] = (None, None)


def sample_lambda(alpha: float, rng: np.random.Generator, size=None):
    """Beta(alpha, alpha) draws as X / (X + Y) with X, Y ~ Gamma(alpha)."""
    if not alpha > 0:
        raise InvalidInputError("alpha must be > 0")
    x = np.asarray(rng.standard_gamma(alpha, size=size), dtype=DTYPE)
    y = np.asarray(rng.standard_gamma(alpha, size=size), dtype=DTYPE)
    total = x + y
    # both gammas underflowing to 0 needs a tiny alpha; split the mass evenly then
    lam = np.where(total > 0, x / np.where(total > 0, total, 1.0), 0.5)
    return float(lam) if size is None else lam


def interpolate(x_i, x_j, y_i, y_j, lam: float, parents=(None, None)) -> MixedExample:
    """lam * (x_i, y_i) + (1 - lam) * (x_j, y_j), kept inside the parents' envelope."""
    x_i, x_j = np.asarray(x_i, dtype=DTYPE), np.asarray(x_j, dtype=DTYPE)
    y_i, y_j = np.asarray(y_i, dtype=DTYPE), np.asarray(y_j, dtype=DTYPE)
    if x_i.shape != x_j.shape:
        raise InvalidInputError(f"representation shapes differ: {x_i.shape} vs {x_j.shape}")
    if y_i.shape != y_j.shape:
        raise InvalidInputError(f"target shapes differ: {y_i.shape} vs {y_j.shape}")
    w_i, w_j = mixing_weights(lam)
    return MixedExample(convex_mix(x_i, x_j, w_i, w_j), convex_mix(y_i, y_j, w_i, w_j), float(lam), tuple(parents))


def combined_loss(loss_base: float, loss_sim: float, loss_dis: float, config: MixupConfig) -> float:
    return config.beta * loss_base + config.gamma * loss_sim + config.delta * loss_dis


def _envelope_violations(mixed: np.ndarray, a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero((mixed < np.minimum(a, b)) | (mixed > np.maximum(a, b))))


def _draw_lambdas(cfg: MixupConfig, rng: np.random.Generator, size) -> np.ndarray:
    lam = sample_lambda(cfg.alpha, rng, size=size)
    if cfg.fixed_lambda is not None:
        lam = np.full(size, float(cfg.fixed_lambda))
    return np.asarray(lam, dtype=DTYPE)


# ---------------------------------------------------------------------------
# baselines


def train_epoch_baseline(
    model: Classifier,
    data: TrainingData,
    strategy: Strategy,
    mix_cfg: MixupConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    order: np.ndarray,
    epoch: int = 1,
) -> EpochStats:
    """Mixup with uniformly random partners; only the mixed loss is optimised."""
    strategy = Strategy(strategy)
    if strategy not in (Strategy.INPUT_MIXUP, Strategy.MANIFOLD_MIXUP):
        raise InvalidInputError(f"not a baseline mixup strategy: {strategy}")
    t0 = time.perf_counter()
    run = _Running()
    lambdas, violations = [], 0
    n = len(data)
    for rows in batches(order, train_cfg.batch_size):
        partners = rng.integers(n, size=rows.shape[0])
        lam = _draw_lambdas(mix_cfg, rng, rows.shape[0])
        lambdas.append(lam)
        tape = GradTape()
        pooled_i = model.tape_pooled(tape, data.batch(rows))
        pooled_j = model.tape_pooled(tape, data.batch(partners))
        w_a, w_b = mixing_weights(lam)
        if strategy is Strategy.INPUT_MIXUP:
            mixed = tape.mix(pooled_i, pooled_j, w_a, w_b)
            violations += _envelope_violations(mixed.value, pooled_i.value, pooled_j.value)
            logits = model.tape_head(tape, model.tape_encode(tape, mixed))
        else:
            h_i = model.tape_encode(tape, pooled_i)
            h_j = model.tape_encode(tape, pooled_j)
            mixed = tape.mix(h_i, h_j, w_a, w_b)
            violations += _envelope_violations(mixed.value, h_i.value, h_j.value)
            logits = model.tape_head(tape, mixed)
        targets = convex_mix(data.targets[rows], data.targets[partners], w_a[:, None], w_b[:, None])
        loss = tape.softmax_xent(logits, targets)
        model.zero_grad()
        tape.backward(loss)
        model.sgd_step(train_cfg.learning_rate)
        run.add(len(rows), mixed=loss.value)
    lam_all = np.concatenate(lambdas) if lambdas else np.zeros(0)
    return EpochStats(
        epoch=epoch, strategy=strategy.value, n_anchors=run.n, loss_base=run.mean("mixed"),
        loss_total=run.mean("mixed"), lambda_draws=int(lam_all.size), envelope_violations=violations,
        seconds=time.perf_counter() - t0, lambdas=lam_all.tolist(),
    )


# ---------------------------------------------------------------------------
# AUM / saliency guided mixup


def build_saliency_cache(model: Classifier, data: TrainingData, categories: Categorization,
                         epoch: int | None = None) -> SaliencyCache:
    """Saliency maps of all training samples under the current parameters."""
    maps = saliency_values(predict_logits(model, data), data.targets)
    cache = SaliencyCache(data.ids, maps, epoch)
    cache.set_pool(HIGH, categories.high)
    cache.set_pool(LOW, categories.low)
    return cache


def hidden_mix_loss(model: Classifier, tape: GradTape, data: TrainingData, hidden, targets: np.ndarray,
                    partner_rows: np.ndarray, lam: np.ndarray):
    """Cross-entropy of the head on lam * anchor hidden + (1 - lam) * partner hidden.

    The partners get their own forward pass on the same tape; returns the
    loss node and the number of envelope violations of the mix.
    """
    h_p = model.tape_encode(tape, model.tape_pooled(tape, data.batch(partner_rows)))
    w_a, w_b = mixing_weights(lam)
    mixed = tape.mix(hidden, h_p, w_a, w_b)
    violations = _envelope_violations(mixed.value, hidden.value, h_p.value)
    mixed_targets = convex_mix(targets, data.targets[partner_rows], w_a[:, None], w_b[:, None])
    return tape.softmax_xent(model.tape_head(tape, mixed), mixed_targets), violations


def train_epoch_proposed(
    model: Classifier,
    data: TrainingData,
    categories: Categorization,
    mix_cfg: MixupConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    order: np.ndarray,
    cache: SaliencyCache | None = None,
    epoch: int = 1,
    dump: SaliencyDump | None = None,
) -> EpochStats:
    """One epoch of the AUM/saliency guided mixup.

    For every anchor: base cross-entropy, a live saliency map from the
    anchor's logits, partner search in the opposite category (against the
    epoch's ``cache``), two hidden-state mixes with independently drawn
    ratios, and one SGD update per mini-batch on the mean combined loss.
    """
    if categories is None:
        raise StateError("proposed mixup needs a HIGH/LOW categorization")
    use_saliency = mix_cfg.ablation is not Ablation.NO_SALIENCY
    if use_saliency and cache is None:
        raise StateError("proposed mixup needs this epoch's saliency cache")
    category = categories.category_of()
    missing = [int(i) for i in data.ids if int(i) not in category]
    if missing:
        raise StateError(f"{len(missing)} training samples have no category (e.g. {missing[0]})")
    pools = {HIGH: np.asarray(categories.low, dtype=np.int64), LOW: np.asarray(categories.high, dtype=np.int64)}
    anchor_is_high = np.array([category[int(i)] == HIGH for i in data.ids])
    w_base, w_sim, w_dis = mix_cfg.effective_weights()

    t0 = time.perf_counter()
    sim_before = cache.similarity_computations if cache is not None else 0
    zero_before = cache.zero_norm_events if cache is not None else 0
    run = _Running()
    lambdas, violations = [], 0
    for rows in batches(order, train_cfg.batch_size):
        b = rows.shape[0]
        tape = GradTape()
        _, hidden, logits = model.tape_forward(tape, data.batch(rows))
        targets = data.targets[rows]
        base = tape.softmax_xent(logits, targets)
        live = saliency_values(logits.value, targets)

        sim_ids = np.empty(b, dtype=np.int64)
        dis_ids = np.empty(b, dtype=np.int64)
        high = anchor_is_high[rows]
        for mask, own in ((high, HIGH), (~high, LOW)):
            if not mask.any():
                continue
            pool = pools[own]
            if pool.size == 0:
                raise StateError(f"opposite category of {own} anchors is empty")
            if use_saliency:
                sim_ids[mask], dis_ids[mask] = cache.select_pairs(live[mask], LOW if own == HIGH else HIGH)
            else:
                picks = rng.integers(pool.size, size=(int(mask.sum()), 2))
                sim_ids[mask], dis_ids[mask] = pool[picks[:, 0]], pool[picks[:, 1]]
        lam = _draw_lambdas(mix_cfg, rng, (b, 2))
        lambdas.append(lam.ravel())

        terms = [(w_base, base)]
        losses = {"base": base.value}
        for col, weight, partner_ids, key in ((0, w_sim, sim_ids, "similar"), (1, w_dis, dis_ids, "dissimilar")):
            if weight is None:
                continue
            term, v = hidden_mix_loss(model, tape, data, hidden, targets, data.rows_of(partner_ids), lam[:, col])
            violations += v
            terms.append((weight, term))
            losses[key] = term.value
        total = tape.weighted_sum(terms)
        model.zero_grad()
        tape.backward(total)
        model.sgd_step(train_cfg.learning_rate)
        run.add(b, total=total.value, **losses)
        if dump is not None:
            for k, r in enumerate(rows):
                dump.write(int(data.ids[r]), epoch, live[k], int(sim_ids[k]), int(dis_ids[k]))

    lam_all = np.concatenate(lambdas) if lambdas else np.zeros(0)
    return EpochStats(
        epoch=epoch, strategy=Strategy.PROPOSED.value, ablation=mix_cfg.ablation.value, n_anchors=run.n,
        loss_base=run.mean("base"), loss_similar=run.mean("similar"), loss_dissimilar=run.mean("dissimilar"),
        loss_total=run.mean("total"), lambda_draws=int(lam_all.size),
        similarity_computations=(cache.similarity_computations - sim_before) if cache is not None else 0,
        zero_saliency=(cache.zero_norm_events - zero_before) if cache is not None else 0,
        envelope_violations=violations, seconds=time.perf_counter() - t0, lambdas=lam_all.tolist(),
    )


# ---------------------------------------------------------------------------
# driver


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(shuffle stream, mixing stream); independent so mixup draws never move batch order."""
    shuffle, mixing = np.random.SeedSequence([int(seed), 0xA11]).spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(mixing)


def fit(
    model: Classifier,
    data: TrainingData,
    train_cfg: TrainConfig,
    mix_cfg: MixupConfig,
    seed: int,
    categories: Categorization | None = None,
    ledger: MarginLedger | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
    dump: SaliencyDump | None = None,
) -> list[EpochStats]:
    """Train for ``train_cfg.epochs`` epochs with the configured strategy.

    With a ``ledger`` the margins of every sample are recorded at its
    forward pass (plain training only).
    """
    strategy = mix_cfg.strategy
    if ledger is not None and strategy is not Strategy.NONE:
        raise InvalidInputError("margins are only recorded during plain training")
    if strategy is Strategy.PROPOSED and categories is None:
        raise StateError("proposed mixup needs a HIGH/LOW categorization")
    shuffle_rng, mix_rng = rng_streams(seed)
    history = []
    n = len(data)
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        if strategy is Strategy.NONE:
            hook = None
            if ledger is not None:
                ledger.begin_epoch(epoch)
                gold = dict(zip(data.ids.tolist(), data.labels.tolist()))

                def hook(ids, logits, _epoch=epoch, _gold=gold):
                    ledger.record_batch(_epoch, ids, logits, [_gold[int(i)] for i in ids])

            stats = train_epoch_vanilla(model, data, train_cfg, order, epoch, on_logits=hook)
        elif strategy is Strategy.PROPOSED:
            cache = None
            if mix_cfg.ablation is not Ablation.NO_SALIENCY:
                cache = build_saliency_cache(model, data, categories, epoch)
            stats = train_epoch_proposed(model, data, categories, mix_cfg, train_cfg, mix_rng, order,
                                         cache, epoch, dump)
        else:
            stats = train_epoch_baseline(model, data, strategy, mix_cfg, train_cfg, mix_rng, order, epoch)
        if stats.zero_saliency:
            log.warning("epoch %d: %d zero saliency maps compared with similarity 0", epoch, stats.zero_saliency)
        log.info("epoch %d [%s] loss=%.4f (%.1fs)", epoch, stats.strategy, stats.loss_total, stats.seconds)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history
