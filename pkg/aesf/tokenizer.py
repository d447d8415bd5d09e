import logging
import re
import numpy as np
from collections import Counter
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

from .numeric_core import round_half_away

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = [PAD, UNK, CLS, SEP, MASK]
CONTINUATION = "##"
CLS_PLACEMENTS = ["first", "last"]


def pre_tokenize(text: str) -> List[str]:
    """
    Lowercase and split into words and single punctuation marks

    Examples
    --------
    >>> pre_tokenize("Hello, World!")
    ['hello', ',', 'world', '!']
    """
    return re.findall(r"\w+|[^\w\s]", text.lower())


class EncodedSeq(NamedTuple):
    ids: np.ndarray
    attention_keep: np.ndarray
    segment_ids: np.ndarray
    true_length: int


class Vocab:
    """
    Subword vocabulary; word-internal pieces carry the ``##`` prefix

    Parameters
    ----------
    pieces : Sequence[str]
        All pieces in id order, starting with the reserved tokens
        [PAD], [UNK], [CLS], [SEP], [MASK]

    Examples
    --------
    >>> vocab = Vocab(SPECIAL_TOKENS + ["un", "##afford", "##able", "a"])
    >>> vocab.segment_word("unaffordable")
    ['un', '##afford', '##able']
    >>> vocab.pad_id, vocab.mask_id, len(vocab)
    (0, 4, 9)
    """

    def __init__(self, pieces: Sequence[str]):
        pieces = list(pieces)
        if pieces[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("Vocabulary must start with %s!" % SPECIAL_TOKENS)
        if len(set(pieces)) != len(pieces):
            raise ValueError("Vocabulary pieces must be unique!")
        self.pieces = pieces
        self.index = {piece: i for i, piece in enumerate(pieces)}
        self._max_piece = max(len(p) for p in pieces)

    def __repr__(self):
        return "Vocab(size=%i)" % len(self)

    def __len__(self):
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def special_ids(self) -> List[int]:
        return [self.index[t] for t in SPECIAL_TOKENS]

    def segment_word(self, word: str) -> List[str]:
        """Greedy longest-match segmentation of a single word"""
        pieces, start = [], 0
        while start < len(word):
            prefix = "" if start == 0 else CONTINUATION
            end = min(len(word), start + self._max_piece)
            while end > start and prefix + word[start:end] not in self.index:
                end -= 1
            if end == start:
                pieces.append(UNK)
                start += 1
            else:
                pieces.append(prefix + word[start:end])
                start = end
        return pieces

    def tokenize(self, text: str) -> List[int]:
        """Piece ids of a text, without special tokens"""
        return [
            self.index[piece]
            for word in pre_tokenize(text)
            for piece in self.segment_word(word)
        ]

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.pieces) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def _merge(symbols: List[str], pair: Tuple[str, str], merged: str) -> List[str]:
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def _surface(piece: str) -> str:
    return piece[len(CONTINUATION) :] if piece.startswith(CONTINUATION) else piece


def build_vocab(
    corpus: Iterable[str], target_size: int, min_frequency: int = 1
) -> Vocab:
    """
    Grow a vocabulary by repeatedly merging the most frequent adjacent piece pair

    Words start as their first character followed by ``##``-marked
    characters. Every surface string enters the vocabulary in both forms,
    word-initial and ``##`` continuation, and the pair occupies one slot of
    ``target_size``. Frequency ties go to the lexicographically smallest pair.

    Parameters
    ----------
    corpus : Iterable[str]
        Training texts, lowercased before counting
    target_size : int
        Reserved tokens plus distinct surface strings to reach
    min_frequency : int
        Stop early when the best pair occurs fewer times

    Examples
    --------
    >>> build_vocab(["aaaa"], len(SPECIAL_TOKENS) + 1).pieces[len(SPECIAL_TOKENS):]
    ['a', '##a']
    >>> build_vocab(["aaaa"], len(SPECIAL_TOKENS) + 2).pieces[len(SPECIAL_TOKENS):]
    ['a', '##a', 'aa', '##aa']
    """
    word_counts = Counter(word for text in corpus for word in pre_tokenize(text))
    if len(word_counts) == 0:
        raise ValueError("Cannot build a vocabulary from an empty corpus!")
    splits = {
        word: [word[0]] + [CONTINUATION + c for c in word[1:]] for word in word_counts
    }
    alphabet = sorted({_surface(s) for symbols in splits.values() for s in symbols})
    if target_size < len(SPECIAL_TOKENS) + len(alphabet):
        raise ValueError(
            "target_size %i is below the %i reserved tokens plus the alphabet of %i characters!"
            % (target_size, len(SPECIAL_TOKENS), len(alphabet))
        )
    pieces = list(SPECIAL_TOKENS)
    surfaces = set()

    def register(surface):
        surfaces.add(surface)
        for piece in [surface, CONTINUATION + surface]:
            if piece not in SPECIAL_TOKENS:
                pieces.append(piece)

    for surface in alphabet:
        register(surface)
    while len(SPECIAL_TOKENS) + len(surfaces) < target_size:
        pair_counts = Counter()
        for word, symbols in splits.items():
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] += word_counts[word]
        if len(pair_counts) == 0:
            break
        best_count = max(pair_counts.values())
        if best_count < min_frequency:
            break
        best = min(pair for pair, count in pair_counts.items() if count == best_count)
        merged = best[0] + _surface(best[1])
        for word, symbols in splits.items():
            if len(symbols) > 1:
                splits[word] = _merge(symbols, best, merged)
        if _surface(merged) not in surfaces:
            register(_surface(merged))
    logger.info("Built vocabulary of %i surfaces, %i pieces", len(surfaces), len(pieces))
    return Vocab(pieces)


def wrap_ids(
    piece_ids: Sequence[int],
    vocab: Vocab,
    max_len: int,
    cls_placement: str = "first",
    segment: int = 0,
) -> EncodedSeq:
    """
    Add [CLS]/[SEP], truncate and pad piece ids to ``max_len``

    Parameters
    ----------
    piece_ids : Sequence[int]
        Ids of real pieces
    vocab : Vocab
        Vocabulary providing the special ids
    max_len : int
        Output length, at least 2
    cls_placement : {'first', 'last'}, default 'first'
        * first: [CLS] pieces [SEP] (BERT convention)
        * last: pieces [SEP] [CLS], so [CLS] is the last real token (XLNet convention)
    segment : int
        Segment id of every real token
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2, got %i!" % max_len)
    if cls_placement not in CLS_PLACEMENTS:
        raise ValueError("Choose 'cls_placement' from values %s!" % CLS_PLACEMENTS)
    body = list(piece_ids)[: max_len - 2]
    if cls_placement == "first":
        real = [vocab.cls_id] + body + [vocab.sep_id]
    else:
        real = body + [vocab.sep_id, vocab.cls_id]
    true_length = len(real)
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[:true_length] = real
    keep = np.zeros(max_len, dtype=np.int64)
    keep[:true_length] = 1
    segments = np.zeros(max_len, dtype=np.int64)
    segments[:true_length] = segment
    return EncodedSeq(ids, keep, segments, true_length)


def encode(
    text: str, vocab: Vocab, max_len: int, cls_placement: str = "first"
) -> EncodedSeq:
    """
    Segment a text and wrap it into a fixed-length sequence

    Examples
    --------
    >>> vocab = Vocab(SPECIAL_TOKENS + ["c", "##a", "##t"])
    >>> seq = encode("Cat", vocab, max_len=6)
    >>> seq.ids.tolist(), seq.attention_keep.tolist(), seq.true_length
    ([2, 5, 6, 7, 3, 0], [1, 1, 1, 1, 1, 0], 5)
    >>> encode("", vocab, max_len=4).ids.tolist()
    [2, 3, 0, 0]
    """
    return wrap_ids(vocab.tokenize(text), vocab, max_len, cls_placement)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """
    Join pieces back into space-separated words, skipping padding and markers

    Examples
    --------
    >>> vocab = Vocab(SPECIAL_TOKENS + ["c", "##a", "##t", "!"])
    >>> decode(encode("Cat!", vocab, max_len=8).ids, vocab)
    'cat !'
    """
    skipped = {vocab.pad_id, vocab.cls_id, vocab.sep_id}
    words = []
    for i in ids:
        if int(i) in skipped:
            continue
        piece = vocab.pieces[int(i)]
        if piece.startswith(CONTINUATION) and words:
            words[-1] += piece[len(CONTINUATION) :]
        else:
            words.append(piece)
    return " ".join(words)


def mask_for_mlm(
    seq: EncodedSeq,
    vocab: Vocab,
    rate: float = 0.15,
    rng: Optional[np.random._generator.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Replace a random share of the real, non-special tokens by [MASK]

    Parameters
    ----------
    seq : EncodedSeq
        Sequence to corrupt
    vocab : Vocab
        Vocabulary providing the special ids
    rate : float
        Share of maskable tokens to mask; at least one is always masked
    rng : numpy.random.Generator (optional)
        Random generator

    Returns
    -------
    (masked_ids, target_positions, target_ids)

    Examples
    --------
    >>> vocab = Vocab(SPECIAL_TOKENS + ["a"])
    >>> seq = wrap_ids([5] * 20, vocab, max_len=24)
    >>> masked, positions, targets = mask_for_mlm(seq, vocab, 0.15, np.random.default_rng(0))
    >>> len(positions), targets.tolist(), int((masked == vocab.mask_id).sum())
    (3, [5, 5, 5], 3)
    """
    if not 0.0 < rate < 1.0:
        raise ValueError("Masking rate must be in (0, 1), got %s!" % rate)
    rng = rng if rng is not None else np.random.default_rng()
    special = np.isin(seq.ids, [vocab.cls_id, vocab.sep_id, vocab.pad_id])
    maskable = np.flatnonzero((seq.attention_keep == 1) & ~special)
    if maskable.size == 0:
        raise ValueError("Sequence has no maskable token!")
    num_targets = max(1, round_half_away(rate * maskable.size))
    positions = np.sort(rng.choice(maskable, size=num_targets, replace=False))
    masked = seq.ids.copy()
    targets = masked[positions].copy()
    masked[positions] = vocab.mask_id
    return masked, positions, targets
