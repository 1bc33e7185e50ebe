import numpy as np
import pytest

from aumix.data import Sample
from aumix.errors import CheckpointError, InvalidInputError
from aumix.model import (
    SEP_TOKEN,
    Classifier,
    ModelConfig,
    TokenBatch,
    hash_token,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from aumix.numerics import GradTape, grad_check


def small(num_classes=3, seed=0):
    return Classifier(ModelConfig(num_classes=num_classes, vocab_hash_buckets=64, embed_dim=5, hidden_dim=7,
                                  seed=seed))


SAMPLES = [Sample(0, "the cat sat", 0), Sample(1, "a dog ran far", 1), Sample(2, "cat", 2, text_b="dog")]


class TestTokenize:
    def test_lower_and_pair(self):
        assert tokenize("A b", "C") == ["a", "b", SEP_TOKEN, "c"]

    def test_hash_stable(self):
        assert hash_token("cat", 2**15) == hash_token("cat", 2**15)
        assert 0 <= hash_token("anything", 10) < 10

    def test_empty_sample_rejected(self):
        with pytest.raises(InvalidInputError):
            TokenBatch.from_lists([np.array([1]), np.array([], dtype=np.int64)])


class TestForward:
    def test_shapes(self):
        m = small()
        logits, hidden, emb = m.forward(SAMPLES[0])
        assert logits.shape == (3,) and hidden.shape == (7,) and emb.shape == (3, 5)

    def test_embedding_cut_roundtrip(self):
        m = small()
        for s in SAMPLES:
            logits, hidden, emb = m.forward(s)
            np.testing.assert_array_equal(m.forward_from_embeddings(emb), logits)
            np.testing.assert_array_equal(m.forward_from_hidden(hidden), logits)

    def test_batch_matches_single(self):
        m = small()
        batch = TokenBatch.from_lists([m.token_ids(s) for s in SAMPLES])
        logits, _ = m.predict(batch)
        for i, s in enumerate(SAMPLES):
            np.testing.assert_allclose(logits[i], m.forward(s)[0], rtol=0, atol=1e-14)

    def test_head_dims(self):
        with pytest.raises(InvalidInputError):
            small().head(np.zeros(3))

    def test_seeded_init(self):
        a, b, c = small(seed=1), small(seed=1), small(seed=2)
        assert all(np.array_equal(x.value, y.value) for x, y in zip(a.params, b.params))
        assert not np.array_equal(a.w1.value, c.w1.value)

    def test_init_bounds(self):
        m = small()
        assert np.abs(m.embedding.value).max() <= m.config.embed_init_scale
        assert np.abs(m.w1.value).max() <= 1 / np.sqrt(5)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            ModelConfig(num_classes=1)
        with pytest.raises(InvalidInputError):
            ModelConfig(num_classes=3, hidden_dim=0)


class TestGradients:
    def test_full_loss_gradcheck(self):
        m = small()
        batch = TokenBatch.from_lists([m.token_ids(s) for s in SAMPLES])
        targets = np.array([[1, 0, 0], [0, 0.9, 0.1], [0.2, 0.3, 0.5]], dtype=float)

        def fn():
            tape = GradTape()
            _, _, logits = m.tape_forward(tape, batch)
            return tape.softmax_xent(logits, targets)

        rep = grad_check(fn, m.params, h=1e-4, tol=1e-4)
        assert rep.passed, rep


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        m = small()
        p1 = save_checkpoint(m, tmp_path / "a.bin", {"seed": 0})
        m2, meta = load_checkpoint(p1, expected=m.config)
        assert meta == {"seed": 0}
        for a, b in zip(m.params, m2.params):
            np.testing.assert_array_equal(a.value, b.value)
        p2 = save_checkpoint(m2, tmp_path / "b.bin", {"seed": 0})
        assert p1.read_bytes() == p2.read_bytes()

    def test_mismatch(self, tmp_path):
        p = save_checkpoint(small(), tmp_path / "a.bin")
        with pytest.raises(CheckpointError):
            load_checkpoint(p, expected=small(num_classes=4).config)

    def test_corrupt(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
        good = save_checkpoint(small(), tmp_path / "g.bin").read_bytes()
        p.write_bytes(good[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
