"""Samples, dataset bundles, JSONL ingestion and a seeded synthetic shift task."""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class Sample:
    id: int
    text_a: str
    label: int
    text_b: str | None = None


@dataclass
class DatasetBundle:
    train: list[Sample]
    dev: list[Sample]
    test_id: list[Sample]
    test_ood: list[Sample]
    num_classes: int
    label_names: list[str]
    provenance: dict = field(default_factory=dict)

    SPLITS = ("train", "dev", "test_id", "test_ood")

    def splits(self) -> dict[str, list[Sample]]:
        return {name: getattr(self, name) for name in self.SPLITS}

    def validate(self, require_all: bool = True) -> None:
        seen: set[int] = set()
        for name, samples in self.splits().items():
            if require_all and not samples:
                raise InvalidInputError(f"split {name!r} is empty")
            for s in samples:
                if s.id in seen:
                    raise InvalidInputError(f"sample id {s.id} appears in more than one place")
                if not 0 <= s.label < self.num_classes:
                    raise InvalidInputError(f"sample {s.id} has label {s.label} outside [0, {self.num_classes})")
                seen.add(s.id)

    def manifest(self) -> dict:
        return {
            "counts": {k: len(v) for k, v in self.splits().items()},
            "num_classes": self.num_classes,
            "label_names": list(self.label_names),
            **self.provenance,
        }


# ---------------------------------------------------------------------------
# JSONL


def _label_table(labels: Sequence[str] | Mapping) -> dict:
    if isinstance(labels, Mapping):
        return dict(labels)
    return {name: i for i, name in enumerate(labels)}


def load_jsonl(
    path,
    labels: Sequence[str] | Mapping,
    text_key: str = "text",
    label_key: str = "label",
    text_b_key: str | None = None,
    id_offset: int = 0,
) -> list[Sample]:
    """Read one Sample per non-blank line; ids are ``id_offset + line index``.

    ``labels`` is either a list of label names (index = class id) or an
    explicit mapping from raw label values to class ids.
    """
    table = _label_table(labels)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno + 1}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise InvalidInputError(f"{path}:{lineno + 1}: expected a JSON object")
            for key in (text_key, label_key) + ((text_b_key,) if text_b_key else ()):
                if key not in rec:
                    raise InvalidInputError(f"{path}:{lineno + 1}: missing key {key!r}")
            raw = rec[label_key]
            if raw not in table:
                raise InvalidInputError(f"{path}:{lineno + 1}: unknown label {raw!r}")
            out.append(
                Sample(
                    id=id_offset + lineno,
                    text_a=str(rec[text_key]),
                    label=int(table[raw]),
                    text_b=str(rec[text_b_key]) if text_b_key else None,
                )
            )
    return out


def load_bundle_jsonl(
    paths: Mapping[str, str],
    labels: Sequence[str] | Mapping,
    text_key: str = "text",
    label_key: str = "label",
    text_b_key: str | None = None,
) -> DatasetBundle:
    """Load the four splits; ids are offset per split so they never collide."""
    loaded, offset = {}, 0
    for name in DatasetBundle.SPLITS:
        if name not in paths:
            raise InvalidInputError(f"missing path for split {name!r}")
        with open(paths[name], encoding="utf-8") as fh:
            n_lines = sum(1 for _ in fh)
        loaded[name] = load_jsonl(paths[name], labels, text_key, label_key, text_b_key, id_offset=offset)
        offset += n_lines
    table = _label_table(labels)
    names = [str(k) for k, _ in sorted(table.items(), key=lambda kv: kv[1])]
    bundle = DatasetBundle(**loaded, num_classes=len(set(table.values())), label_names=names,
                           provenance={"source": "jsonl", "paths": dict(paths)})
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# splitting


def split(items: Sequence, fractions: Sequence[float], seed: int) -> list[list]:
    """Seeded shuffle followed by a contiguous partition by cumulative fractions."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError("fractions must be nonnegative and sum to 1")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    bounds = [0] + [int(round(c * n)) for c in np.cumsum(fractions)]
    bounds[-1] = n
    return [[items[i] for i in order[lo:hi]] for lo, hi in zip(bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic shifted classification task.

    Each class owns ``signal_per_class`` signal tokens; a sample draws a
    length, then each token is a signal token with probability
    ``signal_rate`` (from its own class, or from another class with
    probability ``overlap``) and otherwise a noise token.  A ``content_noise``
    fraction of samples is written from a wrong class while keeping its
    label, which produces the ambiguous / hard-to-learn low-margin samples.
    """

    n_train: int = 5000
    n_test: int = 1000
    n_dev: int | None = None
    num_classes: int = 3
    shift: float = 0.5
    signal_per_class: int = 30
    n_noise_tokens: int = 3000
    min_len: int = 6
    max_len: int = 14
    signal_rate: float = 0.5
    overlap: float = 0.15
    content_noise: float = 0.0
    prior_tilt: float = 1.5


def _class_tokens(c: int, j: int, synonym: bool = False) -> str:
    return f"sig{c}x{j}" + ("syn" if synonym else "")


def synth_task(
    seed: int,
    n_train: int = 5000,
    n_test: int = 1000,
    num_classes: int = 3,
    shift: float = 0.5,
    **overrides,
) -> DatasetBundle:
    """Generate train/dev/test-ID/test-OOD splits of a bag-of-tokens task.

    The OOD split replaces a ``shift`` fraction of each class's signal
    tokens by synonyms never seen in-domain and tilts the class prior
    towards the first classes, so in-domain training leaves the model
    over-confident out of domain.  ``shift=0`` makes test_ood an
    independent draw from the in-domain distribution.
    """
    cfg = SynthConfig(n_train=n_train, n_test=n_test, num_classes=num_classes, shift=shift, **overrides)
    if cfg.n_train <= 0 or cfg.n_test <= 0 or (cfg.n_dev is not None and cfg.n_dev <= 0):
        raise InvalidInputError("split sizes must be positive")
    if cfg.num_classes < 2:
        raise InvalidInputError("num_classes must be >= 2")
    if not 0.0 <= cfg.shift <= 1.0:
        raise InvalidInputError("shift must lie in [0, 1]")
    n_dev = cfg.n_test if cfg.n_dev is None else cfg.n_dev
    C, K = cfg.num_classes, cfg.signal_per_class

    root = np.random.SeedSequence([seed, 0x5EED])
    s_vocab, s_train, s_dev, s_id, s_ood = (np.random.default_rng(s) for s in root.spawn(5))

    n_swapped = int(round(cfg.shift * K))
    swapped = np.zeros((C, K), dtype=bool)
    for c in range(C):
        swapped[c, s_vocab.permutation(K)[:n_swapped]] = True

    def draw(rng, n, priors, ood):
        if priors is None:
            labels = rng.permutation(np.arange(n) % C)
        else:
            labels = rng.choice(C, size=n, p=priors)
        samples = []
        for label in labels:
            source = int(label)
            if rng.random() < cfg.content_noise:
                source = int((label + rng.integers(1, C)) % C)
            length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            toks = []
            for _ in range(length):
                if rng.random() < cfg.signal_rate:
                    c = source
                    if rng.random() < cfg.overlap:
                        c = int((source + rng.integers(1, C)) % C)
                    j = int(rng.integers(K))
                    toks.append(_class_tokens(c, j, synonym=ood and bool(swapped[c, j])))
                else:
                    toks.append(f"w{int(rng.integers(cfg.n_noise_tokens))}")
            samples.append((" ".join(toks), int(label)))
        return samples

    tilt = np.exp(-cfg.prior_tilt * cfg.shift * np.linspace(0.0, 1.0, C))
    ood_priors = None if cfg.shift == 0 else tilt / tilt.sum()
    raw = {
        "train": draw(s_train, cfg.n_train, None, False),
        "dev": draw(s_dev, n_dev, None, False),
        "test_id": draw(s_id, cfg.n_test, None, False),
        "test_ood": draw(s_ood, cfg.n_test, ood_priors, cfg.shift > 0),
    }
    splits, next_id = {}, 0
    for name in DatasetBundle.SPLITS:
        splits[name] = [Sample(next_id + i, text, label) for i, (text, label) in enumerate(raw[name])]
        next_id += len(raw[name])
    provenance = {"source": "synthetic", "seed": int(seed), "shift": float(cfg.shift),
                  "synth_config": {k: v for k, v in cfg.__dict__.items()}}
    bundle = DatasetBundle(**splits, num_classes=C, label_names=[f"class_{c}" for c in range(C)],
                           provenance=provenance)
    bundle.validate()
    return bundle
