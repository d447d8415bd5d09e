import os, pytest
import numpy as np

from aesf.numeric_core import ParamStore, Tensor, dense, grad_check
from aesf.scorers import TransformerScorer, load_scorer
from aesf.selftest import rel_shift_oracle
from aesf.tokenizer import SPECIAL_TOKENS, Vocab
from aesf.transformer import (
    AttnMask,
    EncoderConfig,
    Memory,
    TransformerEncoder,
    embed_input,
    init_bert_params,
    multi_head_bert,
    multi_head_xlnet,
    nsp_head,
    padding_mask,
    perm_mask,
    rel_pos_encoding,
    rel_shift,
    relative_scores,
    segment_onehot,
    self_attention,
    two_stream_forward,
    update_memory,
)

SEED = 43
TINY = EncoderConfig(
    hidden=8, heads=2, n_layers=1, ffn_dim=8, vocab_size=12, max_len=8, mem_len=4, dropout=0.0
)
SMALL = EncoderConfig(
    hidden=16, heads=4, n_layers=2, ffn_dim=32, vocab_size=20, max_len=12, mem_len=4, dropout=0.0
)


def test_invalid_config():
    with pytest.raises(ValueError):
        EncoderConfig(hidden=30, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(max_len=1)
    with pytest.raises(ValueError):
        EncoderConfig(dropout=1.0)
    with pytest.raises(ValueError):
        EncoderConfig.preset("huge")


def test_preset_overrides():
    config = EncoderConfig.preset("desk", n_layers=3)
    assert config.n_layers == 3
    assert config.hidden == 32


def test_attention_rows_sum_to_one_and_blocked_weights_vanish():
    rng = np.random.default_rng(SEED)
    Q, K, V = [Tensor(rng.normal(size=(3, 4))) for _ in range(3)]
    mask = AttnMask.from_allowed(np.array([[1, 0, 1], [1, 1, 0], [0, 0, 1]], dtype=bool))
    _, weights = self_attention(Q, K, V, mask, return_weights=True)
    assert np.allclose(weights.data.sum(axis=-1), 1.0)
    assert np.all(weights.data[mask.blocked] == 0.0)


def test_query_without_visible_keys_gets_zero_output():
    rng = np.random.default_rng(SEED)
    Q, K, V = [Tensor(rng.normal(size=(2, 4))) for _ in range(3)]
    mask = AttnMask.from_allowed([[False, False], [True, False]])
    out = self_attention(Q, K, V, mask)
    assert np.array_equal(out.data[0], np.zeros(4))
    assert np.allclose(out.data[1], V.data[0])


def test_mask_values_are_validated():
    with pytest.raises(ValueError):
        AttnMask([[0.0, -1.0]])


def test_bert_padding_does_not_change_real_rows():
    encoder = TransformerEncoder(SMALL, "bert", seed=SEED)
    H, pooled, memory = encoder.encode([[2, 7, 8, 9, 3]])
    H_pad, pooled_pad, _ = encoder.encode([[2, 7, 8, 9, 3, 0, 0]], keep=[[1, 1, 1, 1, 1, 0, 0]])
    assert memory is None
    assert np.allclose(H.data, H_pad.data[:, :5])
    assert np.allclose(pooled.data, pooled_pad.data)


def attention_store(rng, shapes):
    store = ParamStore()
    for part, shape in shapes.items():
        store.add("layer.0.attention." + part, rng.normal(size=shape))
    return store


def test_single_head_bert_attention_is_self_attention():
    rng = np.random.default_rng(SEED)
    store = attention_store(rng, {part: (4, 4) for part in ["query", "key", "value"]})
    X = Tensor(rng.normal(size=(3, 4)))
    mask = AttnMask.from_allowed(np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool))
    Q, K, V = [dense(X, store["layer.0.attention." + part]) for part in ["query", "key", "value"]]
    expected = self_attention(Q, K, V, mask).data
    assert np.allclose(multi_head_bert(X, store, 0, mask, heads=1).data, expected)


def test_two_head_bert_attention_matches_per_head_loops():
    rng = np.random.default_rng(SEED)
    store = attention_store(rng, {part: (4, 4) for part in ["query", "key", "value"]})
    X = rng.normal(size=(3, 4))
    allowed = np.array([[1, 0, 1], [1, 1, 0], [1, 1, 1]], dtype=bool)
    Q, K, V = [X @ store["layer.0.attention." + part].data.T for part in ["query", "key", "value"]]
    expected = np.zeros((3, 4))
    for head in range(2):
        cols = slice(2 * head, 2 * head + 2)
        for i in range(3):
            scores = np.array([Q[i, cols] @ K[j, cols] / np.sqrt(2) for j in range(3)])
            scores = np.where(allowed[i], scores, scores - 10000.0)
            weights = np.exp(scores - scores.max()) / np.exp(scores - scores.max()).sum()
            expected[i, cols] = sum(weights[j] * V[j, cols] for j in range(3))
    got = multi_head_bert(Tensor(X), store, 0, AttnMask.from_allowed(allowed), heads=2)
    assert np.allclose(got.data, expected, atol=1e-12)


def test_embed_input_is_a_one_hot_product():
    store = ParamStore()
    init_bert_params(store, TINY, np.random.default_rng(SEED))
    ids, segments = np.array([7, 3, 7, 5]), np.array([0, 0, 0, 1])
    expected = (
        np.eye(TINY.vocab_size)[ids] @ store["embeddings.word"].data
        + np.eye(TINY.max_len)[np.arange(4)] @ store["embeddings.position"].data
        + np.eye(2)[segments] @ store["embeddings.segment"].data
    )
    out = embed_input([ids], [segments], store, TINY).data[0]
    assert np.allclose(out, expected)
    # the same token at two positions differs by the positional rows only
    position = store["embeddings.position"].data
    assert np.allclose(out[0] - out[2], position[0] - position[2])


def test_xlnet_attention_without_positions_or_segments_reduces_to_bert():
    rng = np.random.default_rng(SEED)
    R, L, d = TINY.hidden, TINY.heads, TINY.d_k
    shapes = {part: (L, R, d) for part in ["query", "key", "value"]}
    shapes["output"] = (L, d, R)
    store = attention_store(rng, shapes)
    store.add("layer.0.attention.position_key", np.zeros((L, R, d)))
    store.add("layer.0.attention.position_bias", np.zeros((L, d)))
    store.add("layer.0.attention.segment_bias", np.zeros((L, d)))
    store.add("layer.0.attention.segment", np.zeros((L, d, 2)))
    stacked = ParamStore()
    for part in ["query", "key", "value"]:
        weights = store["layer.0.attention." + part].data
        stacked.add("layer.0.attention." + part, np.concatenate(list(weights), axis=1).T)
    H = rng.normal(size=(1, 5, R))
    mask = padding_mask([[1, 1, 1, 1, 0]])
    out = multi_head_xlnet(
        Tensor(H),
        None,
        rel_pos_encoding(5, 0, R),
        segment_onehot(np.zeros((1, 5))),
        store,
        0,
        mask,
        TINY,
    )
    merged = multi_head_bert(Tensor(H), stacked, 0, mask, heads=L).data
    output = np.concatenate(list(store["layer.0.attention.output"].data), axis=0)
    assert np.allclose(out.data, merged @ output)


def test_relative_scores_align_distances():
    M, S = 2, 3
    distances = Tensor(np.arange(M + S, -S, -1.0)[:, None])
    aligned = relative_scores(Tensor(np.ones((S, 1))), distances, M + S).data
    expected = np.array([[M + i - j for j in range(M + S)] for i in range(S)], dtype=np.float64)
    assert np.array_equal(aligned, expected)
    # a query sits at distance 0 from its own key
    assert np.all(aligned[np.arange(S), M + np.arange(S)] == 0.0)


def test_xlnet_padding_does_not_change_real_rows():
    encoder = TransformerEncoder(SMALL, "xlnet", seed=SEED)
    H, pooled, _ = encoder.encode([[5, 6, 7, 3, 2]])
    H_pad, pooled_pad, _ = encoder.encode([[5, 6, 7, 3, 2, 0, 0]], keep=[[1, 1, 1, 1, 1, 0, 0]])
    assert np.allclose(H.data, H_pad.data[:, :5])
    assert np.allclose(pooled.data, pooled_pad.data)


def test_encode_needs_a_real_token():
    encoder = TransformerEncoder(SMALL, "bert", seed=SEED)
    with pytest.raises(ValueError):
        encoder.encode([[2, 3]], keep=[[0, 0]])


def test_embed_input_rejects_long_sequences():
    encoder = TransformerEncoder(TINY, "bert", seed=SEED)
    with pytest.raises(ValueError):
        embed_input(np.ones((1, 9)), np.zeros((1, 9)), encoder.store, TINY)


def test_padding_mask_shape():
    mask = padding_mask([[1, 1, 0], [1, 0, 0]])
    assert mask.shape == (2, 1, 1, 3)
    assert mask.blocked[1, 0, 0].tolist() == [False, True, True]


def test_perm_mask_streams():
    permutation = np.random.default_rng(SEED).permutation(7)
    content = perm_mask(permutation, 7).allowed
    query = perm_mask(permutation, 7, "query").allowed
    assert np.all(np.diag(content))
    assert not np.any(np.diag(query))
    assert np.array_equal(content & ~np.eye(7, dtype=bool), query)
    # the first token of the order sees only itself
    assert content[permutation[0]].sum() == 1
    assert content[permutation[-1]].all()


def test_perm_mask_invalid_arguments():
    with pytest.raises(ValueError):
        perm_mask([0, 0, 1], 3)
    with pytest.raises(ValueError):
        perm_mask([0, 1, 2], 3, stream="key")


def test_rel_shift_matches_index_gather():
    rng = np.random.default_rng(SEED)
    for q, r in [(1, 1), (2, 5), (4, 4), (3, 10), (6, 9)]:
        scores = rng.normal(size=(q, r))
        assert np.array_equal(rel_shift(Tensor(scores)).data, rel_shift_oracle(scores))
    with pytest.raises(ValueError):
        rel_shift(Tensor(np.zeros((3, 2))))


def test_rel_pos_encoding_shape():
    assert rel_pos_encoding(5, 3, 8).shape == (13, 8)
    with pytest.raises(ValueError):
        rel_pos_encoding(5, 3, 7)


def test_update_memory_truncation():
    hidden = np.arange(6.0).reshape(1, 6, 1)
    assert update_memory([hidden], None, 0).rows == 0
    assert update_memory([hidden], Memory.empty(1, 1, 1), 4).layers[0][0, :, 0].tolist() == [2, 3, 4, 5]
    with pytest.raises(ValueError):
        update_memory([hidden], None, -1)


def test_xlnet_memory_keeps_detached_layer_inputs():
    encoder = TransformerEncoder(SMALL, "xlnet", seed=SEED)
    ids = np.array([[5, 6, 7, 8, 9, 10]])
    memory = encoder.new_memory(1)
    H_first, _, memory = encoder.encode(ids, memory=memory)
    assert len(memory.layers) == SMALL.n_layers
    assert memory.rows == SMALL.mem_len
    assert isinstance(memory.layers[0], np.ndarray)
    assert np.array_equal(memory.layers[0][0], encoder.store["embeddings.word"].data[ids[0, 2:]])
    H_second, _, memory = encoder.encode(ids, memory=memory)
    assert memory.rows == SMALL.mem_len
    assert H_second.shape == H_first.shape
    assert not np.allclose(H_first.data, H_second.data)


def test_xlnet_without_memory_returns_none():
    encoder = TransformerEncoder(SMALL, "xlnet", seed=SEED)
    _, pooled, memory = encoder.encode([[5, 6, 7, 3, 2]])
    assert memory is None
    assert pooled.shape == (1, SMALL.hidden)


def test_query_stream_never_sees_last_target():
    rng = np.random.default_rng(SEED)
    encoder = TransformerEncoder(SMALL, "xlnet", seed=SEED)
    ids = rng.integers(5, 20, size=9)
    permutation = rng.permutation(9)
    changed = ids.copy()
    changed[permutation[-1]] = 5 if ids[permutation[-1]] != 5 else 6
    _, rows = two_stream_forward(ids, permutation, encoder.store, SMALL, return_query=True)
    _, rows_changed = two_stream_forward(changed, permutation, encoder.store, SMALL, return_query=True)
    assert np.array_equal(rows.data, rows_changed.data)


def test_query_stream_reads_earlier_tokens():
    rng = np.random.default_rng(SEED)
    encoder = TransformerEncoder(SMALL, "xlnet", seed=SEED)
    ids = rng.integers(5, 20, size=9)
    permutation = rng.permutation(9)
    changed = ids.copy()
    changed[permutation[0]] = 5 if ids[permutation[0]] != 5 else 6
    _, rows = two_stream_forward(ids, permutation, encoder.store, SMALL, return_query=True)
    _, rows_changed = two_stream_forward(changed, permutation, encoder.store, SMALL, return_query=True)
    assert not np.allclose(rows.data[permutation[-1]], rows_changed.data[permutation[-1]])
    # the first position of the order has no context at all
    other = rng.integers(5, 20, size=9)
    _, rows_other = two_stream_forward(other, permutation, encoder.store, SMALL, return_query=True)
    assert np.allclose(rows.data[permutation[0]], rows_other.data[permutation[0]], rtol=0.0, atol=1e-12)


def test_two_stream_needs_six_tokens():
    encoder = TransformerEncoder(SMALL, "xlnet", seed=SEED)
    with pytest.raises(ValueError):
        two_stream_forward([5, 6, 7, 8, 9], np.arange(5), encoder.store, SMALL)


def test_objectives_belong_to_their_variant():
    rng = np.random.default_rng(SEED)
    bert = TransformerEncoder(TINY, "bert", seed=SEED)
    xlnet = TransformerEncoder(TINY, "xlnet", seed=SEED)
    with pytest.raises(RuntimeError):
        xlnet.mlm_loss([[2, 4, 3]], [[1, 1, 1]], [[1]], [[7]])
    with pytest.raises(RuntimeError):
        bert.plm_loss(np.arange(5, 11), rng)
    assert np.isfinite(bert.mlm_loss([[2, 4, 3]], [[1, 1, 1]], [[1]], [[7]], rng=rng).item())
    assert np.isfinite(xlnet.plm_loss(np.arange(5, 11), rng).item())


def test_nsp_labels_must_be_binary():
    encoder = TransformerEncoder(TINY, "bert", seed=SEED)
    with pytest.raises(ValueError):
        nsp_head(Tensor(np.zeros((1, 8))), encoder.store, [2])


def test_param_groups_cover_fine_tuned_tensors():
    for variant in ["bert", "xlnet"]:
        encoder = TransformerEncoder(SMALL, variant, seed=SEED)
        groups = encoder.param_groups()
        assert list(groups) == ["embeddings", "layer.0", "layer.1", "head"]
        grouped = [name for names in groups.values() for name in names]
        assert len(grouped) == len(set(grouped))
        ungrouped = set(encoder.store.names) - set(grouped)
        expected = {"lm.bias", "nsp.weight", "nsp.bias"} if variant == "bert" else {"lm.bias"}
        assert ungrouped == expected
    assert "embeddings.query_stream" in encoder.param_groups()["embeddings"]


def test_bert_gradients_match_finite_differences():
    encoder = TransformerEncoder(TINY, "bert", seed=SEED)
    ids = np.array([[2, 4, 6, 4, 3, 0]])
    keep = np.array([[1, 1, 1, 1, 1, 0]])

    def f(store):
        return encoder.mlm_loss(ids, keep, [[1, 3]], [[7, 8]], mode="eval")

    report = grad_check(f, encoder.store, tol=1e-4, max_coords=2, rng=np.random.default_rng(SEED))
    assert report["passed"], report["failures"]


def test_xlnet_gradients_match_finite_differences():
    encoder = TransformerEncoder(TINY, "xlnet", seed=SEED)
    ids = np.array([5, 6, 7, 8, 9, 10])
    permutation = np.array([3, 0, 5, 1, 4, 2])

    def f(store):
        return two_stream_forward(ids, permutation, store, TINY)

    report = grad_check(f, encoder.store, tol=1e-4, max_coords=2, rng=np.random.default_rng(SEED))
    assert report["passed"], report["failures"]


def test_transformer_scorer_arguments():
    vocab = Vocab(SPECIAL_TOKENS + ["a", "b"])
    with pytest.raises(ValueError):
        TransformerScorer(vocab, SMALL, "bert", k=2, layer_limit=3)
    with pytest.raises(ValueError):
        TransformerScorer(vocab, SMALL, "bert", k=2, carry_memory=True)
    with pytest.raises(ValueError):
        TransformerScorer(vocab, SMALL, "gpt", k=2)


def test_transformer_scorer_windows_and_layer_limit():
    vocab = Vocab(SPECIAL_TOKENS + ["a", "b"])
    config = EncoderConfig(hidden=8, heads=2, n_layers=2, ffn_dim=8, max_len=6, dropout=0.0)
    scorer = TransformerScorer(vocab, config, "bert", k=3, seed=SEED, layer_limit=1)
    assert scorer.config.vocab_size == len(vocab)
    units = scorer.essay_units("a b a b a b a")
    assert [unit.true_length for unit in units] == [6, 6]
    assert units[0].ids[0] == vocab.cls_id
    assert list(scorer.param_groups()) == ["embeddings", "layer.0", "head"]
    assert scorer.window_probabilities("a b a b a b a").shape == (2, 3)


def test_xlnet_scorer_carries_memory_across_windows():
    vocab = Vocab(SPECIAL_TOKENS + ["a", "b"])
    config = EncoderConfig(
        hidden=8, heads=2, n_layers=2, ffn_dim=8, max_len=6, mem_len=4, dropout=0.0, init_std=0.5
    )
    carried = TransformerScorer(vocab, config, "xlnet", k=3, seed=SEED, carry_memory=True)
    plain = TransformerScorer(vocab, config, "xlnet", k=3, seed=SEED)
    text = "a b a b b a b"
    with_memory = carried.window_probabilities(text)
    without = plain.window_probabilities(text)
    assert with_memory.shape == without.shape == (2, 3)
    assert np.allclose(with_memory[0], without[0])
    assert not np.allclose(with_memory[1], without[1])


def test_transformer_scorer_checkpoint(tmp_path):
    vocab = Vocab(SPECIAL_TOKENS + ["a", "b"])
    config = EncoderConfig(hidden=8, heads=2, n_layers=2, ffn_dim=8, max_len=6, dropout=0.0)
    scorer = TransformerScorer(vocab, config, "xlnet", k=3, seed=SEED, layer_limit=1)
    path = os.path.join(tmp_path, "checkpoint.aesf")
    scorer.save(path)
    restored = load_scorer(path)
    assert isinstance(restored, TransformerScorer)
    assert restored.variant == "xlnet"
    assert restored.layer_limit == 1
    assert np.allclose(restored.window_probabilities("a b b a"), scorer.window_probabilities("a b b a"))
