import os, pytest
import numpy as np

from aesf.data import SyntheticEssayCorpus
from aesf.tokenizer import (
    CLS,
    CONTINUATION,
    SPECIAL_TOKENS,
    UNK,
    Vocab,
    build_vocab,
    decode,
    encode,
    mask_for_mlm,
    pre_tokenize,
    wrap_ids,
)

SEED = 43
TEXTS = [e.text for e in SyntheticEssayCorpus(num_essays=40, seed=SEED).essays]


def test_reserved_ids():
    vocab = build_vocab(TEXTS, 100)
    assert vocab.pieces[:5] == SPECIAL_TOKENS
    assert (vocab.pad_id, vocab.unk_id, vocab.cls_id, vocab.sep_id, vocab.mask_id) == (0, 1, 2, 3, 4)


def test_build_vocab_reaches_target_size():
    vocab = build_vocab(TEXTS, 120)
    pieces = vocab.pieces[len(SPECIAL_TOKENS) :]
    surfaces = {
        piece[len(CONTINUATION) :] if piece.startswith(CONTINUATION) else piece
        for piece in pieces
    }
    assert len(surfaces) == 120 - len(SPECIAL_TOKENS)
    # every surface string is usable word-initially and word-internally
    assert len(vocab) == len(SPECIAL_TOKENS) + 2 * len(surfaces)


def test_single_merge_of_repeated_character():
    vocab = build_vocab(["aaaa"], len(SPECIAL_TOKENS) + 2)
    assert "a" in vocab and "aa" in vocab
    assert vocab.segment_word("aaaa") == ["aa", "##aa"]
    assert build_vocab(["aaaa"], len(SPECIAL_TOKENS) + 1).pieces[-2:] == ["a", "##a"]


def test_build_vocab_is_deterministic():
    assert build_vocab(TEXTS, 110).pieces == build_vocab(list(reversed(TEXTS)), 110).pieces


def test_build_vocab_stops_at_min_frequency():
    vocab = build_vocab(["ab ab ab cd"], 100, min_frequency=2)
    assert "ab" in vocab
    assert "cd" not in vocab


def test_build_vocab_target_below_alphabet():
    with pytest.raises(ValueError):
        build_vocab(TEXTS, len(SPECIAL_TOKENS) + 1)


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab(["", "   "], 50)


def test_frequency_ties_take_smallest_pair():
    # 'ab' and 'cd' both occur twice
    vocab = build_vocab(["ab cd ab cd"], len(SPECIAL_TOKENS) + 5)
    assert vocab.pieces[-2:] == ["ab", "##ab"]


def test_vocab_must_start_with_reserved_tokens():
    with pytest.raises(ValueError):
        Vocab(["a", "b"])
    with pytest.raises(ValueError):
        Vocab(SPECIAL_TOKENS + ["a", "a"])


def test_unknown_characters_become_unk():
    vocab = Vocab(SPECIAL_TOKENS + ["c", "##a", "##t"])
    assert vocab.segment_word("cxt") == ["c", UNK, "##t"]


def test_decode_inverts_encode_on_training_text():
    vocab = build_vocab(TEXTS, 150)
    for text in TEXTS[:10]:
        seq = encode(text, vocab, max_len=512)
        assert decode(seq.ids, vocab) == " ".join(pre_tokenize(text))


def test_vocab_save_and_load(tmp_path):
    vocab = build_vocab(TEXTS, 100)
    path = os.path.join(tmp_path, "vocab.txt")
    vocab.save(path)
    assert Vocab.load(path).pieces == vocab.pieces


def test_wrap_ids_truncates_and_pads():
    vocab = Vocab(SPECIAL_TOKENS + ["a"])
    seq = wrap_ids([5] * 10, vocab, max_len=6)
    assert seq.ids.tolist() == [2, 5, 5, 5, 5, 3]
    assert seq.true_length == 6
    short = wrap_ids([5], vocab, max_len=5, segment=1)
    assert short.ids.tolist() == [2, 5, 3, 0, 0]
    assert short.attention_keep.tolist() == [1, 1, 1, 0, 0]
    assert short.segment_ids.tolist() == [1, 1, 1, 0, 0]


def test_cls_last_placement():
    vocab = Vocab(SPECIAL_TOKENS + ["a"])
    seq = wrap_ids([5, 5], vocab, max_len=6, cls_placement="last")
    assert seq.ids.tolist() == [5, 5, 3, 2, 0, 0]
    assert vocab.pieces[seq.ids[seq.true_length - 1]] == CLS


def test_wrap_ids_invalid_arguments():
    vocab = Vocab(SPECIAL_TOKENS)
    with pytest.raises(ValueError):
        wrap_ids([], vocab, max_len=1)
    with pytest.raises(ValueError):
        wrap_ids([], vocab, max_len=4, cls_placement="middle")


def test_mask_for_mlm_skips_special_tokens():
    vocab = build_vocab(TEXTS, 100)
    rng = np.random.default_rng(SEED)
    seq = encode(TEXTS[0], vocab, max_len=64)
    real = seq.true_length - 2
    for _ in range(20):
        masked, positions, targets = mask_for_mlm(seq, vocab, 0.15, rng)
        assert len(positions) == max(1, int(np.floor(0.15 * real + 0.5)))
        assert np.all(masked[positions] == vocab.mask_id)
        assert np.array_equal(targets, seq.ids[positions])
        assert masked[0] == vocab.cls_id
        assert masked[seq.true_length - 1] == vocab.sep_id
        assert np.all(masked[seq.true_length :] == vocab.pad_id)


def test_mask_for_mlm_masks_at_least_one_token():
    vocab = Vocab(SPECIAL_TOKENS + ["a"])
    masked, positions, _ = mask_for_mlm(wrap_ids([5], vocab, 4), vocab, 0.15, np.random.default_rng(SEED))
    assert positions.tolist() == [1]
    assert masked.tolist() == [2, 4, 3, 0]


def test_mask_for_mlm_without_maskable_tokens():
    vocab = Vocab(SPECIAL_TOKENS)
    with pytest.raises(ValueError):
        mask_for_mlm(wrap_ids([], vocab, 4), vocab, 0.15, np.random.default_rng(SEED))
