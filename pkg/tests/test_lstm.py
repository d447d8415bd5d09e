import pytest
import numpy as np

from aesf.lstm import (
    LstmClassifier,
    LstmConfig,
    init_lstm_params,
    lstm_bptt,
    lstm_cell,
    lstm_encode,
    lstm_forward,
    zero_state,
)
from aesf.numeric_core import ParamStore, ShapeError, Tensor, adam_step, cross_entropy, grad_check
from aesf.scorers import LstmScorer, load_scorer
from aesf.tokenizer import SPECIAL_TOKENS, Vocab

SEED = 43
SMALL = LstmConfig(vocab_size=12, embed_dim=3, hidden=4, n_layers=2)


def test_invalid_config():
    with pytest.raises(ValueError):
        LstmConfig(forget_bias=0.5)
    with pytest.raises(ValueError):
        LstmConfig(pooling="max")
    with pytest.raises(ValueError):
        LstmConfig(hidden=0)


def test_forget_gate_bias_initialization():
    store = ParamStore()
    init_lstm_params(store, LstmConfig(vocab_size=5, hidden=3, forget_bias=2.0), np.random.default_rng(SEED))
    assert np.array_equal(store["layer.0.forget.bias"].data, np.full(3, 2.0))
    assert np.array_equal(store["layer.0.input.bias"].data, np.zeros(3))
    assert np.array_equal(store["layer.0.cec"].data, np.eye(3))


def test_cell_shape_mismatch():
    store = ParamStore()
    init_lstm_params(store, SMALL, np.random.default_rng(SEED))
    with pytest.raises(ShapeError):
        lstm_cell(Tensor(np.zeros((2, 3))), zero_state(1, 4), store)


def test_trailing_padding_does_not_change_logits():
    for pooling in ["last", "mean"]:
        model = LstmClassifier(LstmConfig(vocab_size=12, embed_dim=3, hidden=4, pooling=pooling), k=3, seed=SEED)
        short = model.logits([[5, 6, 7]]).data
        padded = model.logits([[5, 6, 7, 0, 0]], lengths=[3]).data
        assert np.allclose(short, padded, atol=1e-14)


def test_batch_equals_single_sequences():
    model = LstmClassifier(SMALL, k=2, seed=SEED)
    batch = model.logits([[5, 6, 7, 8], [9, 10, 0, 0]], lengths=[4, 2]).data
    assert np.allclose(batch[0], model.logits([[5, 6, 7, 8]]).data[0])
    assert np.allclose(batch[1], model.logits([[9, 10]]).data[0])


def test_invalid_lengths():
    model = LstmClassifier(SMALL, k=2, seed=SEED)
    with pytest.raises(ValueError):
        model.logits([[5, 6]], lengths=[3])
    with pytest.raises(ValueError):
        model.logits([[]])


def test_bptt_gradients_match_finite_differences():
    model = LstmClassifier(SMALL, k=3, seed=SEED)
    ids = np.array([[5, 6, 7, 8], [9, 10, 11, 0]])
    lengths, labels = [4, 3], [0, 2]

    def f(store):
        return cross_entropy(lstm_forward(ids, store, SMALL, lengths), labels)

    report = grad_check(f, model.store, max_coords=4, rng=np.random.default_rng(SEED))
    assert report["passed"], report["failures"]


def test_constant_error_carousel_stays_fixed():
    model = LstmClassifier(SMALL, k=2, seed=SEED)
    _, grads = lstm_bptt([[5, 6, 7]], [1], model.store, SMALL)
    assert np.array_equal(grads["layer.0.cec"], np.zeros((4, 4)))
    assert np.array_equal(grads["layer.1.cec"], np.zeros((4, 4)))
    assert np.any(grads["layer.0.input.input_weight"] != 0.0)


def test_frozen_embeddings_get_no_gradient():
    config = LstmConfig(vocab_size=12, embed_dim=3, hidden=4, freeze_embeddings=True)
    model = LstmClassifier(config, k=2, seed=SEED)
    _, grads = lstm_bptt([[5, 6, 7]], [1], model.store, config)
    assert np.array_equal(grads["embeddings.word"], np.zeros((12, 3)))


def test_train_mode_dropout_needs_rng():
    config = LstmConfig(vocab_size=12, embed_dim=3, hidden=4, dropout=0.5)
    model = LstmClassifier(config, k=2, seed=SEED)
    with pytest.raises(ValueError):
        lstm_encode([[5, 6]], model.store, config, mode="train")
    assert np.array_equal(
        lstm_encode([[5, 6]], model.store, config).data,
        lstm_encode([[5, 6]], model.store, config, mode="eval").data,
    )


def test_lstm_learns_marker_token():
    rng = np.random.default_rng(SEED)
    config = LstmConfig(vocab_size=12, embed_dim=4, hidden=8)
    model = LstmClassifier(config, k=2, seed=SEED)
    ids = rng.integers(7, 12, size=(16, 5))
    labels = np.arange(16) % 2
    # the label is the token at a random position
    ids[np.arange(16), rng.integers(0, 5, size=16)] = 5 + labels
    for _ in range(200):
        _, grads = lstm_bptt(ids, labels, model.store, config)
        adam_step(model.store, grads, lr=0.05)
    assert np.array_equal(model.predict(ids), labels)


def test_lstm_scorer_windows_and_checkpoint(tmp_path):
    vocab = Vocab(SPECIAL_TOKENS + ["a", "b", "c"])
    scorer = LstmScorer(vocab, LstmConfig(embed_dim=3, hidden=4), k=3, max_len=4, seed=SEED)
    assert scorer.config.vocab_size == len(vocab)
    units = scorer.essay_units("a b c a b c a")
    assert [u.size for u in units] == [4, 4]
    assert scorer.essay_units("")[0].tolist() == [vocab.unk_id]
    assert scorer.essay_units("zz")[0].tolist() == [vocab.unk_id, vocab.unk_id]
    path = str(tmp_path / "checkpoint.aesf")
    scorer.save(path)
    restored = load_scorer(path)
    assert isinstance(restored, LstmScorer)
    assert np.array_equal(
        restored.window_probabilities("a b c a b c a"), scorer.window_probabilities("a b c a b c a")
    )
