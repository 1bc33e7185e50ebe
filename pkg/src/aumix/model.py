"""Hashing bag-of-tokens classifier with explicit embedding / encoder / head stages.

The three stages are the cut points used by the different mixup variants:
the mean-pooled input embedding (input-level Mixup), the pooled hidden
state after the encoder (Manifold-Mixup and the AUM/saliency mixup), and
the logits (margins and saliency maps).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, InvalidInputError
from .numerics import DTYPE, GradTape, Node, Parameter, segment_mean_values

SEP_TOKEN = "[sep]"
CHECKPOINT_MAGIC = b"AUMIXCK\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    vocab_hash_buckets: int = 2**15
    embed_dim: int = 64
    hidden_dim: int = 128
    embed_init_scale: float = 0.125
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_hash_buckets", "embed_dim", "hidden_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise InvalidInputError(f"{name} must be a positive int, got {v!r}")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise InvalidInputError("num_classes must be an int >= 2")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidInputError("seed must be an unsigned int")
        if not self.embed_init_scale > 0:
            raise InvalidInputError("embed_init_scale must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def tokenize(text_a: str, text_b: str | None = None) -> list[str]:
    """Lowercased whitespace tokens; pairs are joined by a reserved separator."""
    toks = text_a.lower().split()
    if text_b is not None:
        toks = toks + [SEP_TOKEN] + text_b.lower().split()
    return toks


def hash_token(token: str, buckets: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % buckets


@dataclass
class TokenBatch:
    """Flattened token ids of several samples plus their segment layout."""

    ids: np.ndarray
    segments: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_lists(cls, id_lists) -> TokenBatch:
        counts = np.array([len(x) for x in id_lists], dtype=np.int64)
        if counts.size == 0 or np.any(counts == 0):
            raise InvalidInputError("every sample needs at least one token")
        ids = np.concatenate(id_lists).astype(np.int64)
        segments = np.repeat(np.arange(counts.size), counts)
        return cls(ids, segments, counts)

    def __len__(self) -> int:
        return int(self.counts.size)


class Classifier:
    """Embedding table -> mean pool -> 2 x (affine + tanh) -> affine head."""

    param_names = ("embedding", "w1", "b1", "w2", "b2", "w_head", "b_head")

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        # rows start in U(-s, s); small rows keep early pooled features near
        # the tanh's linear range
        self.embedding = Parameter(
            "embedding", c.embed_init_scale * uniform((c.vocab_hash_buckets, c.embed_dim), 1), sparse=True
        )
        self.w1 = Parameter("w1", uniform((c.embed_dim, c.hidden_dim), c.embed_dim))
        self.b1 = Parameter("b1", uniform((c.hidden_dim,), c.embed_dim))
        self.w2 = Parameter("w2", uniform((c.hidden_dim, c.hidden_dim), c.hidden_dim))
        self.b2 = Parameter("b2", uniform((c.hidden_dim,), c.hidden_dim))
        self.w_head = Parameter("w_head", uniform((c.hidden_dim, c.num_classes), c.hidden_dim))
        self.b_head = Parameter("b_head", uniform((c.num_classes,), c.hidden_dim))

    @property
    def params(self) -> list[Parameter]:
        return [getattr(self, n) for n in self.param_names]

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def sgd_step(self, lr: float) -> None:
        for p in self.params:
            p.sgd_step(lr)

    # -- single-sample numpy path ------------------------------------------

    def token_ids(self, sample) -> np.ndarray:
        toks = tokenize(sample.text_a, getattr(sample, "text_b", None))
        if not toks:
            raise InvalidInputError(f"sample {getattr(sample, 'id', '?')} has no tokens")
        b = self.config.vocab_hash_buckets
        return np.array([hash_token(t, b) for t in toks], dtype=np.int64)

    def embed(self, sample) -> np.ndarray:
        return self.embedding.value[self.token_ids(sample)]

    def pool(self, embeddings: np.ndarray) -> np.ndarray:
        embeddings = np.asarray(embeddings, dtype=DTYPE)
        if embeddings.ndim != 2 or embeddings.shape[0] < 1 or embeddings.shape[1] != self.config.embed_dim:
            raise InvalidInputError("embeddings must be a (n_tokens >= 1, embed_dim) matrix")
        n = embeddings.shape[0]
        return segment_mean_values(embeddings, np.zeros(n, dtype=np.int64), np.array([n]))[0]

    def encode_pooled(self, pooled: np.ndarray) -> np.ndarray:
        h1 = np.tanh(pooled @ self.w1.value + self.b1.value)
        return np.tanh(h1 @ self.w2.value + self.b2.value)

    def encode(self, embeddings: np.ndarray) -> np.ndarray:
        return self.encode_pooled(self.pool(embeddings))

    def head(self, hidden: np.ndarray) -> np.ndarray:
        hidden = np.asarray(hidden, dtype=DTYPE)
        if hidden.shape[-1] != self.config.hidden_dim:
            raise InvalidInputError(
                f"hidden state has length {hidden.shape[-1]}, expected {self.config.hidden_dim}"
            )
        return hidden @ self.w_head.value + self.b_head.value

    def forward(self, sample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (logits, hidden state, token embeddings) for one sample."""
        emb = self.embed(sample)
        hidden = self.encode(emb)
        return self.head(hidden), hidden, emb

    def forward_from_hidden(self, hidden: np.ndarray) -> np.ndarray:
        return self.head(hidden)

    def forward_from_embeddings(self, embeddings: np.ndarray) -> np.ndarray:
        return self.head(self.encode(embeddings))

    # -- batched numpy path ------------------------------------------------

    def batch_pooled(self, batch: TokenBatch) -> np.ndarray:
        return segment_mean_values(self.embedding.value[batch.ids], batch.segments, batch.counts)

    def predict(self, batch: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
        """(logits, hidden) for a whole batch without recording gradients."""
        hidden = self.encode_pooled(self.batch_pooled(batch))
        return self.head(hidden), hidden

    # -- tape path -----------------------------------------------------------

    def tape_pooled(self, tape: GradTape, batch: TokenBatch) -> Node:
        rows = tape.gather(self.embedding, batch.ids)
        return tape.segment_mean(rows, batch.segments, batch.counts)

    def tape_encode(self, tape: GradTape, pooled: Node) -> Node:
        h1 = tape.tanh(tape.affine(pooled, self.w1, self.b1))
        return tape.tanh(tape.affine(h1, self.w2, self.b2))

    def tape_head(self, tape: GradTape, hidden: Node) -> Node:
        return tape.affine(hidden, self.w_head, self.b_head)

    def tape_forward(self, tape: GradTape, batch: TokenBatch) -> tuple[Node, Node, Node]:
        """Record a forward pass; returns (pooled embeddings, hidden, logits)."""
        pooled = self.tape_pooled(tape, batch)
        hidden = self.tape_encode(tape, pooled)
        return pooled, hidden, self.tape_head(tape, hidden)

    # -- state ---------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            arr = np.asarray(state[p.name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise CheckpointError(f"parameter {p.name} has shape {arr.shape}, expected {p.shape}")
            p.value = arr.copy()
            p.zero_grad()


def save_checkpoint(model: Classifier, path, meta: dict | None = None) -> Path:
    """Write config + flat float64 parameter arrays into a versioned binary file.

    Layout: magic (8 bytes), version (uint32 LE), header length (uint64 LE),
    UTF-8 JSON header, then each parameter's raw little-endian float64 data
    in header order.  No timestamps are stored, so identical models produce
    identical bytes.
    """
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in model.params],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.writelines(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in model.params)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Classifier, dict]:
    """Load a checkpoint; raises CheckpointError on corruption or config mismatch."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["model_config"])
    if expected is not None and expected != config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expected}")
    offset = 20 + hlen
    state = {}
    for spec in header["params"]:
        n = int(np.prod(spec["shape"]))
        chunk = data[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated parameter data")
        state[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(spec["shape"])
        offset += 8 * n
    model = Classifier(config)
    model.load_state(state)
    return model, header["meta"]
