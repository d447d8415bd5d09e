import logging
import numpy as np
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .numeric_core import (
    ParamStore,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    cross_entropy,
    dense,
    dropout,
    feature_norm,
    matmul,
    mul,
    normal_init,
    reshape,
    softmax,
    swap_last,
    take_rows,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

BLOCKED = -10000.0
VARIANTS = ["bert", "xlnet"]
STREAMS = ["content", "query"]

PRESETS = {
    "desk": dict(
        hidden=32, heads=4, n_layers=2, ffn_dim=64, vocab_size=2000, max_len=64, mem_len=16
    ),
    "base": dict(
        hidden=768,
        heads=12,
        n_layers=12,
        ffn_dim=3072,
        vocab_size=30522,
        max_len=512,
        mem_len=384,
    ),
}


@dataclass
class EncoderConfig:
    """
    Shape hyperparameters of a transformer encoder stack

    Parameters
    ----------
    hidden : int
        Representation size R
    heads : int
        Number of attention heads L, must divide ``hidden``
    n_layers : int
        Number of encoder layers
    ffn_dim : int
        Inner size R' of the feed-forward block
    vocab_size : int
        Rows of the word embedding table
    max_len : int
        Longest input sequence (rows of the positional table)
    mem_len : int
        Longest memory kept per layer (XLNet variant)
    dropout : float
        Dropout probability in train mode
    pos_denominator : float (optional)
        Denominator of the sinusoid frequency exponent, ``hidden`` by default
    init_std : float
        Standard deviation of the weight initialization

    Examples
    --------
    >>> config = EncoderConfig.preset("base")
    >>> config.hidden, config.heads, config.d_k
    (768, 12, 64)
    >>> EncoderConfig(hidden=30, heads=4)
    Traceback (most recent call last):
    ...
    ValueError: hidden=30 is not divisible by heads=4!
    """

    hidden: int = 32
    heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 64
    vocab_size: int = 2000
    max_len: int = 64
    mem_len: int = 16
    dropout: float = 0.1
    pos_denominator: Optional[float] = None
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads != 0:
            raise ValueError(
                "hidden=%i is not divisible by heads=%i!" % (self.hidden, self.heads)
            )
        if self.n_layers < 0 or self.ffn_dim < 1 or self.vocab_size < 1:
            raise ValueError("n_layers, ffn_dim and vocab_size must be positive!")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2, got %i!" % self.max_len)
        if self.mem_len < 0:
            raise ValueError("mem_len must be nonnegative, got %i!" % self.mem_len)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1), got %s!" % self.dropout)

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        if name not in PRESETS:
            raise ValueError("Choose 'preset' from values %s!" % list(PRESETS))
        values = dict(PRESETS[name])
        values.update(overrides)
        return cls(**values)

    @property
    def d_k(self) -> int:
        return self.hidden // self.heads

    @property
    def denominator(self) -> float:
        return float(self.pos_denominator or self.hidden)

    def to_dict(self) -> dict:
        return asdict(self)


class AttnMask:
    """
    Additive attention bias: 0 where a query may attend a key, -10,000 where it may not

    The trailing two axes are (query, key); leading axes broadcast over
    batch and heads, and the query axis may have size 1.

    Examples
    --------
    >>> mask = padding_mask([[1, 1, 0]])
    >>> mask.bias.shape, mask.allowed[0, 0, 0].tolist()
    ((1, 1, 1, 3), [True, True, False])
    """

    def __init__(self, bias):
        bias = np.asarray(bias, dtype=np.float64)
        if bias.ndim < 2:
            raise ShapeError("Attention mask needs (query, key) axes, got %s!" % (bias.shape,))
        if not np.all((bias == 0.0) | (bias == BLOCKED)):
            raise ValueError("Attention mask values must be 0 or %s!" % BLOCKED)
        self.bias = bias

    def __repr__(self):
        return "AttnMask(shape=%s, blocked=%i)" % (self.bias.shape, int(self.blocked.sum()))

    @property
    def shape(self) -> tuple:
        return self.bias.shape

    @property
    def allowed(self) -> np.ndarray:
        return self.bias == 0.0

    @property
    def blocked(self) -> np.ndarray:
        return self.bias == BLOCKED

    @classmethod
    def from_allowed(cls, allowed) -> "AttnMask":
        return cls(np.where(np.asarray(allowed, dtype=bool), 0.0, BLOCKED))

    def with_memory(self, mem_rows: int) -> "AttnMask":
        """Prepend ``mem_rows`` always-visible key columns"""
        if mem_rows == 0:
            return self
        front = np.zeros(self.bias.shape[:-1] + (mem_rows,))
        return AttnMask(np.concatenate([front, self.bias], axis=-1))


def padding_mask(keep) -> AttnMask:
    """Mask of shape (B, 1, 1, S) hiding the keys whose keep flag is 0"""
    keep = np.asarray(keep)
    if keep.ndim == 1:
        keep = keep[None, :]
    return AttnMask.from_allowed(keep[:, None, None, :] == 1)


def perm_mask(permutation: Sequence[int], seq_len: int, stream: str = "content") -> AttnMask:
    """
    Factorization-order mask of shape (S, S)

    With ``rank(i)`` the place of token ``i`` in the permutation, the content
    stream lets query ``q`` see key ``k`` iff rank(k) ≤ rank(q); the query
    stream iff rank(k) < rank(q).

    Examples
    --------
    >>> perm_mask([2, 0, 1], 3).allowed.astype(int).tolist()
    [[1, 0, 1], [1, 1, 1], [0, 0, 1]]
    >>> perm_mask([0, 1, 2], 3, "query").allowed.astype(int).tolist()
    [[0, 0, 0], [1, 0, 0], [1, 1, 0]]
    """
    if stream not in STREAMS:
        raise ValueError("Choose 'stream' from values %s!" % STREAMS)
    permutation = np.asarray(permutation, dtype=np.int64)
    if permutation.shape != (seq_len,) or not np.array_equal(
        np.sort(permutation), np.arange(seq_len)
    ):
        raise ValueError("Factorization order is not a permutation of range(%i)!" % seq_len)
    rank = np.empty(seq_len, dtype=np.int64)
    rank[permutation] = np.arange(seq_len)
    if stream == "content":
        allowed = rank[None, :] <= rank[:, None]
    else:
        allowed = rank[None, :] < rank[:, None]
    return AttnMask.from_allowed(allowed)


### attention ###


def _check_mask(mask: Optional[AttnMask], q: int, k: int):
    if mask is None:
        return
    rows, cols = mask.shape[-2:]
    if cols != k or rows not in [1, q]:
        raise ShapeError(
            "Mask of shape %s does not cover %i queries x %i keys!" % (mask.shape, q, k)
        )


def _attend(scores: Tensor, V: Tensor, mask: Optional[AttnMask], d_k: int):
    scaled = mul(scores, 1.0 / np.sqrt(d_k))
    if mask is not None:
        scaled = add(scaled, mask.bias)
    weights = softmax(scaled, axis=-1)
    if mask is not None:
        # a query without any visible key attends to nothing
        open_rows = ~mask.blocked.all(axis=-1, keepdims=True)
        if not open_rows.all():
            weights = mul(weights, Tensor(open_rows.astype(np.float64)))
    return matmul(weights, V), weights


def self_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[AttnMask] = None,
    d_k: Optional[int] = None,
    return_weights: bool = False,
):
    """
    Scaled dot-product attention softmax(Q·Kᵀ/√d_k + mask)·V

    Parameters
    ----------
    Q : Tensor
        Queries (..., q, d_k)
    K : Tensor
        Keys (..., r, d_k)
    V : Tensor
        Values (..., r, d_v)
    mask : AttnMask (optional)
        Additive bias over (q, r), broadcast over leading axes
    d_k : int (optional)
        Scaling dimension, the last axis of ``Q`` by default
    return_weights : bool
        Also return the attention weights

    Examples
    --------
    >>> Q = Tensor([[1.0, 0.0]])
    >>> K = Tensor([[1.0, 0.0], [1.0, 0.0]])
    >>> V = Tensor([[2.0, 0.0], [0.0, 4.0]])
    >>> self_attention(Q, K, V).data.tolist()
    [[1.0, 2.0]]
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError(
            "Attention operands do not conform: Q %s, K %s, V %s!" % (Q.shape, K.shape, V.shape)
        )
    _check_mask(mask, Q.shape[-2], K.shape[-2])
    out, weights = _attend(matmul(Q, swap_last(K)), V, mask, d_k or Q.shape[-1])
    return (out, weights) if return_weights else out


def _lift(x: Tensor) -> Tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError("Expected (S, R) or (B, S, R) input, got %s!" % (x.shape,))
    return x, False


def _drop(x: Tensor, lifted: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if lifted else x


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, S, R = x.shape
    return transpose(reshape(x, (B, S, heads, R // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, L, S, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, S, L * d))


def multi_head_bert(
    X: Tensor, store: ParamStore, layer: int, mask: Optional[AttnMask], heads: int
) -> Tensor:
    """
    Multi-head self-attention with full R×R projections split into ``heads`` blocks

    Parameters
    ----------
    X : Tensor
        Input rows (S, R) or (B, S, R)
    store : ParamStore
        Holds ``layer.{layer}.attention.query|key|value`` of shape (R, R)
    layer : int
        Layer index
    mask : AttnMask (optional)
        Shared by every head
    heads : int
        Number of heads L
    """
    X, lifted = _lift(X)
    R = X.shape[-1]
    if R % heads != 0:
        raise ValueError("hidden=%i is not divisible by heads=%i!" % (R, heads))
    name = "layer.%i.attention." % layer
    Q, K, V = [
        _split_heads(dense(X, store[name + part]), heads) for part in ["query", "key", "value"]
    ]
    _check_mask(mask, Q.shape[-2], K.shape[-2])
    out, _ = _attend(matmul(Q, swap_last(K)), V, mask, R // heads)
    return _drop(_merge_heads(out), lifted)


def _ffn_block(
    h: Tensor, store: ParamStore, layer: int, config: EncoderConfig, mode: str, rng
) -> Tensor:
    name = "layer.%i.ffn." % layer
    inner = dense(h, store[name + "inner.weight"], store[name + "inner.bias"], f="gelu")
    outer = dense(inner, store[name + "outer.weight"], store[name + "outer.bias"])
    return feature_norm(
        add(h, dropout(outer, config.dropout, mode, rng)),
        store[name + "norm.gamma"],
        store[name + "norm.beta"],
    )


def bert_layer(
    X: Tensor,
    store: ParamStore,
    layer: int,
    mask: Optional[AttnMask],
    config: EncoderConfig,
    mode: str = "eval",
    rng: Optional[np.random._generator.Generator] = None,
) -> Tensor:
    """
    Post-norm encoder layer: attention, output dense, dropout, residual, norm; then the feed-forward block likewise

    Examples
    --------
    >>> config = EncoderConfig(hidden=8, heads=2, n_layers=1, ffn_dim=16, vocab_size=10, max_len=8)
    >>> encoder = TransformerEncoder(config, "bert", seed=0)
    >>> bert_layer(Tensor(np.ones((3, 8))), encoder.store, 0, None, config).shape
    (3, 8)
    """
    X, lifted = _lift(X)
    name = "layer.%i.attention." % layer
    attended = dense(
        multi_head_bert(X, store, layer, mask, config.heads),
        store[name + "output.weight"],
        store[name + "output.bias"],
    )
    h1 = feature_norm(
        add(X, dropout(attended, config.dropout, mode, rng)),
        store[name + "norm.gamma"],
        store[name + "norm.beta"],
    )
    return _drop(_ffn_block(h1, store, layer, config, mode, rng), lifted)


def embed_input(
    ids, segment_ids, store: ParamStore, config: EncoderConfig
) -> Tensor:
    """
    Sum of word, position and segment embeddings, (B, S, R)

    Examples
    --------
    >>> config = EncoderConfig(hidden=4, heads=1, vocab_size=6, max_len=4)
    >>> store = ParamStore()
    >>> init_bert_params(store, config, np.random.default_rng(0))
    >>> out = embed_input([[1, 1]], [[0, 0]], store, config)
    >>> np.allclose(out.data[0, 1] - out.data[0, 0], store["embeddings.position"].data[1] - store["embeddings.position"].data[0])
    True
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    segment_ids = np.atleast_2d(np.asarray(segment_ids, dtype=np.int64))
    if ids.shape != segment_ids.shape:
        raise ShapeError("Token ids %s and segment ids %s differ in shape!" % (ids.shape, segment_ids.shape))
    if ids.shape[1] > config.max_len:
        raise ValueError(
            "Sequence of length %i exceeds max_len=%i!" % (ids.shape[1], config.max_len)
        )
    positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
    return add(
        add(
            take_rows(store["embeddings.word"], ids),
            take_rows(store["embeddings.position"], positions),
        ),
        take_rows(store["embeddings.segment"], segment_ids),
    )


def pooler(h_cls: Tensor, store: ParamStore) -> Tensor:
    """tanh(dense(h_cls)) of the representation at the [CLS] position"""
    return dense(h_cls, store["pooler.weight"], store["pooler.bias"], f="tanh")


def mlm_head(
    H: Tensor,
    word_table: Tensor,
    out_bias: Tensor,
    target_positions: Sequence[int],
    target_ids: Sequence[int],
) -> Tensor:
    """
    Masked-token loss with the decoder tied to the input word table

    Parameters
    ----------
    H : Tensor
        Final hidden rows (N, R); flatten batched outputs first
    word_table : Tensor
        The embedding table (V, R), used as decoder weight
    out_bias : Tensor
        Decoder bias (V,)
    target_positions : Sequence[int]
        Rows of ``H`` to predict
    target_ids : Sequence[int]
        True token ids at those rows

    Examples
    --------
    >>> table = Tensor(np.zeros((5, 3)))
    >>> loss = mlm_head(Tensor(np.ones((4, 3))), table, Tensor(np.zeros(5)), [1, 2], [0, 4])
    >>> bool(np.isclose(loss.item(), np.log(5)))
    True
    """
    target_positions = np.asarray(target_positions, dtype=np.int64)
    if target_positions.size == 0:
        raise ValueError("Masked-token loss needs at least one target!")
    if H.ndim != 2:
        raise ShapeError("Expected hidden rows of shape (N, R), got %s!" % (H.shape,))
    logits = dense(H[target_positions], word_table, out_bias)
    return cross_entropy(logits, target_ids)


def nsp_head(pooled: Tensor, store: ParamStore, labels) -> Tensor:
    """Two-class next-sentence loss on pooled representations (B, R)"""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("Next-sentence labels must be 0 or 1!")
    pooled = as_tensor(pooled)
    if pooled.ndim == 1:
        pooled = reshape(pooled, (1, -1))
    return cross_entropy(dense(pooled, store["nsp.weight"], store["nsp.bias"]), labels)


### relative positions and memory ###


def rel_pos_encoding(
    seq_len: int, mem_len: int, R: int, denominator: Optional[float] = None
) -> np.ndarray:
    """
    Fixed sinusoid table of relative distances, shape (2·seq_len + mem_len, R)

    Row ``t`` encodes the distance mem_len + seq_len - t as
    [sin(p·e_inv), cos(p·e_inv)] with e_inv = 10000^(-[0, 2, ..., R-2] / denominator).

    Examples
    --------
    >>> table = rel_pos_encoding(2, 1, 4)
    >>> table.shape
    (5, 4)
    >>> table[3].tolist()
    [0.0, 0.0, 1.0, 1.0]
    """
    if R % 2 != 0:
        raise ValueError("Positional encoding needs an even size, got %i!" % R)
    denominator = float(denominator or R)
    p_inds = np.arange(mem_len + seq_len, -seq_len, -1, dtype=np.float64)
    e_inv = 1.0 / (10000.0 ** (np.arange(0, R, 2, dtype=np.float64) / denominator))
    angles = np.outer(p_inds, e_inv)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def rel_shift(scores: Tensor) -> Tensor:
    """
    Align positional scores with relative distances by pad, reshape and slice

    Examples
    --------
    >>> rel_shift(Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])).data.tolist()
    [[2.0, 3.0, 0.0], [4.0, 5.0, 6.0]]
    """
    scores = as_tensor(scores)
    q, r = scores.shape[-2:]
    if r < q:
        raise ValueError("Relative shift needs at least as many columns as rows, got %i x %i!" % (q, r))
    lead = scores.shape[:-2]
    padded = concat([Tensor(np.zeros(lead + (q, 1))), scores], axis=-1)
    folded = reshape(padded, lead + (r + 1, q))
    return reshape(folded[..., 1:, :], lead + (q, r))


def relative_scores(pos_query: Tensor, pos_keys: Tensor, klen: int) -> Tensor:
    """
    Positional scores (..., S, klen) whose entry (i, j) reads the encoding of distance M + i - j

    ``pos_keys`` holds one row per distance of :func:`rel_pos_encoding`
    (M + S down to -S + 1) and M = klen - S.

    Examples
    --------
    >>> distances = Tensor(np.arange(3.0, -2.0, -1.0)[:, None])
    >>> relative_scores(Tensor(np.ones((2, 1))), distances, 3).data.tolist()
    [[1.0, 0.0, -1.0], [2.0, 1.0, 0.0]]
    """
    shifted = rel_shift(matmul(pos_query, swap_last(pos_keys)))
    # column 0 of the shifted rows holds distance M + i + 1
    return shifted[..., 1 : klen + 1]


def segment_onehot(segment_ids, mem_len: int = 0) -> np.ndarray:
    """
    (B, S, mem_len + S, 2) encoding of whether query and key share a segment; index 1 means same

    Memory rows come from the same essay and always count as the same segment.
    """
    segment_ids = np.atleast_2d(np.asarray(segment_ids, dtype=np.int64))
    B, S = segment_ids.shape
    same = np.concatenate(
        [
            np.ones((B, S, mem_len), dtype=bool),
            segment_ids[:, :, None] == segment_ids[:, None, :],
        ],
        axis=2,
    )
    return np.stack([~same, same], axis=-1).astype(np.float64)


class Memory:
    """
    Detached per-layer hidden states of previous segments, each (B, rows, R)

    Examples
    --------
    >>> memory = Memory.empty(2, batch_size=1, hidden=4)
    >>> memory.rows
    0
    """

    def __init__(self, layers: Sequence[np.ndarray]):
        self.layers = [np.array(layer, dtype=np.float64) for layer in layers]

    def __repr__(self):
        return "Memory(layers=%i, rows=%i)" % (len(self.layers), self.rows)

    @classmethod
    def empty(cls, n_layers: int, batch_size: int, hidden: int) -> "Memory":
        return cls([np.zeros((batch_size, 0, hidden)) for _ in range(n_layers)])

    @property
    def rows(self) -> int:
        return self.layers[0].shape[1] if self.layers else 0


def update_memory(
    layer_hiddens: Sequence, memory: Optional[Memory], mem_len: int
) -> Memory:
    """
    Keep the last ``mem_len`` rows of old memory followed by the new hidden states, per layer

    Examples
    --------
    >>> old = Memory([np.arange(8.0).reshape(1, 8, 1)])
    >>> new = update_memory([np.arange(8.0, 12.0).reshape(1, 4, 1)], old, 10)
    >>> new.layers[0][0, :, 0].tolist()
    [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]
    """
    if mem_len < 0:
        raise ValueError("mem_len must be nonnegative, got %i!" % mem_len)
    layers = []
    for i, hidden in enumerate(layer_hiddens):
        hidden = hidden.data if isinstance(hidden, Tensor) else np.asarray(hidden)
        if memory is not None and memory.rows > 0:
            hidden = np.concatenate([memory.layers[i], hidden], axis=1)
        layers.append(hidden[:, hidden.shape[1] - min(mem_len, hidden.shape[1]) :].copy())
    return Memory(layers)


def multi_head_xlnet(
    H: Tensor,
    memory: Optional[np.ndarray],
    pos_enc: np.ndarray,
    seg_onehot: np.ndarray,
    store: ParamStore,
    layer: int,
    mask: Optional[AttnMask],
    config: EncoderConfig,
    queries: Optional[Tensor] = None,
) -> Tensor:
    """
    Relative multi-head attention with per-head projections and memory

    Keys and values read the memory rows followed by ``H``; queries read
    ``H``, or the separate query-stream rows ``queries``. Content, relative
    position and segment scores are summed before scaling and masking.
    Head outputs are mapped back to R and summed.

    Parameters
    ----------
    H : Tensor
        Content rows (B, S, R)
    memory : numpy.ndarray (optional)
        Previous-segment rows (B, M, R), M ≤ mem_len
    pos_enc : numpy.ndarray
        Table of :func:`rel_pos_encoding` for S and M
    seg_onehot : numpy.ndarray
        Encoding of :func:`segment_onehot`, (B, S, M + S, 2)
    store : ParamStore
        Holds the ``layer.{layer}.attention.*`` tensors
    layer : int
        Layer index
    mask : AttnMask (optional)
        Bias over (S, M + S)
    config : EncoderConfig
        Shapes
    queries : Tensor (optional)
        Query-stream rows (B, S, R)
    """
    B, S, R = H.shape
    M = 0 if memory is None else memory.shape[1]
    if M > config.mem_len:
        raise ValueError("Memory of %i rows exceeds mem_len=%i!" % (M, config.mem_len))
    if pos_enc.shape != (2 * S + M, R) or seg_onehot.shape != (B, S, M + S, 2):
        raise ShapeError(
            "Positional %s or segment %s encoding does not fit %i rows with %i memory rows!"
            % (pos_enc.shape, seg_onehot.shape, S, M)
        )
    name = "layer.%i.attention." % layer
    source = H if M == 0 else concat([Tensor(memory), H], axis=1)
    q_in = H if queries is None else queries
    Q = matmul(reshape(q_in, (B, 1, S, R)), store[name + "query"])
    K = matmul(reshape(source, (B, 1, M + S, R)), store[name + "key"])
    V = matmul(reshape(source, (B, 1, M + S, R)), store[name + "value"])
    _check_mask(mask, S, M + S)
    content = matmul(Q, swap_last(K))
    pos_keys = matmul(Tensor(pos_enc), store[name + "position_key"])
    pos_query = add(Q, reshape(store[name + "position_bias"], (config.heads, 1, config.d_k)))
    positional = relative_scores(pos_query, pos_keys, M + S)
    seg_query = add(Q, reshape(store[name + "segment_bias"], (config.heads, 1, config.d_k)))
    seg_proj = matmul(seg_query, store[name + "segment"])
    segment = reshape(
        matmul(
            reshape(seg_proj, (B, config.heads, S, 1, 2)),
            np.swapaxes(seg_onehot, -1, -2)[:, None],
        ),
        (B, config.heads, S, M + S),
    )
    scores = add(add(content, positional), segment)
    heads_out, _ = _attend(scores, V, mask, config.d_k)
    return tensor_sum(matmul(heads_out, store[name + "output"]), axis=1)


def xlnet_layer(
    H: Tensor,
    memory: Optional[np.ndarray],
    pos_enc: np.ndarray,
    seg_onehot: np.ndarray,
    store: ParamStore,
    layer: int,
    mask: Optional[AttnMask],
    config: EncoderConfig,
    mode: str = "eval",
    rng: Optional[np.random._generator.Generator] = None,
    queries: Optional[Tensor] = None,
) -> Tensor:
    """
    Relative-attention layer without a post-attention dense; residual and norm, then the feed-forward block

    With ``queries`` the layer advances the query stream: the residual runs
    through the query rows while keys and values still come from ``H``.
    """
    name = "layer.%i.attention." % layer
    attended = multi_head_xlnet(
        H, memory, pos_enc, seg_onehot, store, layer, mask, config, queries
    )
    residual = H if queries is None else queries
    h1 = feature_norm(
        add(residual, dropout(attended, config.dropout, mode, rng)),
        store[name + "norm.gamma"],
        store[name + "norm.beta"],
    )
    return _ffn_block(h1, store, layer, config, mode, rng)


### parameters ###


def _add_ffn_params(store: ParamStore, layer: int, config: EncoderConfig, rng):
    R, F, std = config.hidden, config.ffn_dim, config.init_std
    name = "layer.%i." % layer
    store.add(name + "attention.norm.gamma", np.ones(R))
    store.add(name + "attention.norm.beta", np.zeros(R))
    store.add(name + "ffn.inner.weight", normal_init(rng, (F, R), std))
    store.add(name + "ffn.inner.bias", np.zeros(F))
    store.add(name + "ffn.outer.weight", normal_init(rng, (R, F), std))
    store.add(name + "ffn.outer.bias", np.zeros(R))
    store.add(name + "ffn.norm.gamma", np.ones(R))
    store.add(name + "ffn.norm.beta", np.zeros(R))


def _add_head_params(store: ParamStore, config: EncoderConfig, rng):
    R, std = config.hidden, config.init_std
    store.add("pooler.weight", normal_init(rng, (R, R), std))
    store.add("pooler.bias", np.zeros(R))
    store.add("lm.bias", np.zeros(config.vocab_size))


def init_bert_params(store: ParamStore, config: EncoderConfig, rng):
    R, std = config.hidden, config.init_std
    store.add("embeddings.word", normal_init(rng, (config.vocab_size, R), std))
    store.add("embeddings.position", normal_init(rng, (config.max_len, R), std))
    store.add("embeddings.segment", normal_init(rng, (2, R), std))
    for i in range(config.n_layers):
        name = "layer.%i.attention." % i
        for part in ["query", "key", "value"]:
            store.add(name + part, normal_init(rng, (R, R), std))
        store.add(name + "output.weight", normal_init(rng, (R, R), std))
        store.add(name + "output.bias", np.zeros(R))
        _add_ffn_params(store, i, config, rng)
    _add_head_params(store, config, rng)
    store.add("nsp.weight", normal_init(rng, (2, R), std))
    store.add("nsp.bias", np.zeros(2))


def init_xlnet_params(store: ParamStore, config: EncoderConfig, rng):
    R, L, d, std = config.hidden, config.heads, config.d_k, config.init_std
    store.add("embeddings.word", normal_init(rng, (config.vocab_size, R), std))
    store.add("embeddings.query_stream", normal_init(rng, (R,), std))
    for i in range(config.n_layers):
        name = "layer.%i.attention." % i
        for part in ["query", "key", "value", "position_key"]:
            store.add(name + part, normal_init(rng, (L, R, d), std))
        store.add(name + "output", normal_init(rng, (L, d, R), std))
        store.add(name + "position_bias", np.zeros((L, d)))
        store.add(name + "segment_bias", np.zeros((L, d)))
        store.add(name + "segment", normal_init(rng, (L, d, 2), std))
        _add_ffn_params(store, i, config, rng)
    _add_head_params(store, config, rng)


### stacks ###


def encode_stack(
    ids,
    segment_ids,
    keep,
    store: ParamStore,
    config: EncoderConfig,
    variant: str = "bert",
    memory: Optional[Memory] = None,
    mode: str = "eval",
    rng: Optional[np.random._generator.Generator] = None,
    layer_limit: Optional[int] = None,
) -> Tuple[Tensor, Tensor, Optional[Memory]]:
    """
    Run the embeddings and encoder layers and pool the [CLS] position

    Parameters
    ----------
    ids : array_like
        Token ids (B, S)
    segment_ids : array_like
        Segment ids (B, S)
    keep : array_like
        1 for real tokens, 0 for padding, (B, S)
    store : ParamStore
        Parameters of the variant
    config : EncoderConfig
        Shapes
    variant : {'bert', 'xlnet'}, default 'bert'
        * bert: summed word, position and segment embeddings, [CLS] first
        * xlnet: word embeddings only, relative positions and segments inside attention, [CLS] last
    memory : Memory (optional)
        XLNet memory of previous segments
    mode : {'train', 'eval'}
        Dropout mode
    rng : numpy.random.Generator (optional)
        Random generator for train-mode dropout
    layer_limit : int (optional)
        Use only the first ``layer_limit`` layers

    Returns
    -------
    (H, pooled, memory)
        Top-layer rows (B, S, R), pooled (B, R) and the updated XLNet memory
        (None for BERT)
    """
    if variant not in VARIANTS:
        raise ValueError("Choose 'variant' from values %s!" % VARIANTS)
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    segment_ids = np.atleast_2d(np.asarray(segment_ids, dtype=np.int64))
    keep = np.atleast_2d(np.asarray(keep, dtype=np.int64))
    if keep.shape != ids.shape:
        raise ShapeError("Keep mask %s does not match ids %s!" % (keep.shape, ids.shape))
    if np.any(keep.sum(axis=1) < 1):
        raise ValueError("Every sequence needs at least one real token!")
    n_use = config.n_layers if layer_limit is None else min(layer_limit, config.n_layers)
    B, S = ids.shape
    if variant == "bert":
        x = dropout(embed_input(ids, segment_ids, store, config), config.dropout, mode, rng)
        mask = padding_mask(keep)
        for i in range(n_use):
            x = bert_layer(x, store, i, mask, config, mode, rng)
        return x, pooler(x[:, 0, :], store), None
    if S > config.max_len:
        raise ValueError("Sequence of length %i exceeds max_len=%i!" % (S, config.max_len))
    M = 0 if memory is None else memory.rows
    pos_enc = rel_pos_encoding(S, M, config.hidden, config.denominator)
    seg = segment_onehot(segment_ids, M)
    mask = padding_mask(keep).with_memory(M)
    x = dropout(take_rows(store["embeddings.word"], ids), config.dropout, mode, rng)
    inputs = []
    for i in range(n_use):
        inputs.append(x)
        layer_memory = None if M == 0 else memory.layers[i]
        x = xlnet_layer(x, layer_memory, pos_enc, seg, store, i, mask, config, mode, rng)
    cls_rows = keep.sum(axis=1) - 1
    pooled = pooler(x[np.arange(B), cls_rows], store)
    new_memory = None
    if memory is not None:
        new_memory = update_memory(inputs, memory, config.mem_len)
    return x, pooled, new_memory


def two_stream_forward(
    ids,
    permutation: Sequence[int],
    store: ParamStore,
    config: EncoderConfig,
    mode: str = "eval",
    rng: Optional[np.random._generator.Generator] = None,
    return_query: bool = False,
):
    """
    Permutation language-model loss of one sequence with content and query streams

    The targets are the last ceil(S/6) tokens of the factorization order.
    The query stream starts from one shared learnable vector at every
    position and reads each layer's content-stream keys and values, never
    the content of its own token. Target predictions use the tied word
    table and ``lm.bias``.

    Parameters
    ----------
    ids : array_like
        Token ids (S,), S ≥ 6
    permutation : Sequence[int]
        Factorization order, a permutation of range(S)
    store : ParamStore
        XLNet parameters
    config : EncoderConfig
        Shapes
    return_query : bool
        Return (loss, final query-stream rows (S, R)) instead of the loss

    Examples
    --------
    >>> config = EncoderConfig(hidden=8, heads=2, n_layers=1, ffn_dim=8, vocab_size=12, max_len=8, mem_len=0, dropout=0.0)
    >>> encoder = TransformerEncoder(config, "xlnet", seed=0)
    >>> encoder.store.restore({name: np.zeros(encoder.store[name].shape) for name in encoder.store})
    >>> loss = two_stream_forward(np.arange(6), np.arange(6), encoder.store, config)
    >>> bool(np.isclose(loss.item(), np.log(12)))
    True
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    S = ids.size
    if S < 6:
        raise ValueError("Permutation language modeling needs at least 6 tokens, got %i!" % S)
    if S > config.max_len:
        raise ValueError("Sequence of length %i exceeds max_len=%i!" % (S, config.max_len))
    permutation = np.asarray(permutation, dtype=np.int64)
    content_mask = perm_mask(permutation, S, "content")
    query_mask = perm_mask(permutation, S, "query")
    targets = permutation[S - int(np.ceil(S / 6.0)) :]
    pos_enc = rel_pos_encoding(S, 0, config.hidden, config.denominator)
    seg = segment_onehot(np.zeros((1, S)), 0)
    h = dropout(take_rows(store["embeddings.word"], ids[None, :]), config.dropout, mode, rng)
    g = add(Tensor(np.zeros((1, S, config.hidden))), store["embeddings.query_stream"])
    for i in range(config.n_layers):
        g = xlnet_layer(h, None, pos_enc, seg, store, i, query_mask, config, mode, rng, queries=g)
        h = xlnet_layer(h, None, pos_enc, seg, store, i, content_mask, config, mode, rng)
    rows = reshape(g, (S, config.hidden))
    logits = dense(rows[targets], store["embeddings.word"], store["lm.bias"])
    loss = cross_entropy(logits, ids[targets])
    return (loss, rows) if return_query else loss


class TransformerEncoder:
    """
    Parameters and forward passes of a BERT-style or XLNet-style encoder

    Parameters
    ----------
    config : EncoderConfig
        Shapes
    variant : {'bert', 'xlnet'}
        Encoder flavor
    seed: int (optional)
        Random seed of the initialization (disabled by default)
    store : ParamStore (optional)
        Existing parameters, e.g. loaded from a checkpoint

    Examples
    --------
    >>> config = EncoderConfig(hidden=8, heads=2, n_layers=2, ffn_dim=16, vocab_size=20, max_len=10)
    >>> encoder = TransformerEncoder(config, "bert", seed=1)
    >>> H, pooled, _ = encoder.encode([[2, 7, 8, 3, 0]], keep=[[1, 1, 1, 1, 0]])
    >>> H.shape, pooled.shape
    ((1, 5, 8), (1, 8))
    >>> list(encoder.param_groups())
    ['embeddings', 'layer.0', 'layer.1', 'head']
    """

    def __init__(
        self,
        config: EncoderConfig,
        variant: str = "bert",
        seed: Optional[int] = None,
        store: Optional[ParamStore] = None,
    ):
        if variant not in VARIANTS:
            raise ValueError("Choose 'variant' from values %s!" % VARIANTS)
        self.config = config
        self.variant = variant
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            if variant == "bert":
                init_bert_params(store, config, rng)
            else:
                init_xlnet_params(store, config, rng)
        self.store = store

    def __repr__(self):
        return "TransformerEncoder(variant=%s, layers=%i, hidden=%i, parameters=%i)" % (
            self.variant,
            self.config.n_layers,
            self.config.hidden,
            self.store.num_parameters(),
        )

    @property
    def cls_placement(self) -> str:
        return "first" if self.variant == "bert" else "last"

    def encode(
        self,
        ids,
        segment_ids=None,
        keep=None,
        memory: Optional[Memory] = None,
        mode: str = "eval",
        rng: Optional[np.random._generator.Generator] = None,
        layer_limit: Optional[int] = None,
    ) -> Tuple[Tensor, Tensor, Optional[Memory]]:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        segment_ids = np.zeros_like(ids) if segment_ids is None else segment_ids
        keep = np.ones_like(ids) if keep is None else keep
        return encode_stack(
            ids, segment_ids, keep, self.store, self.config, self.variant, memory, mode, rng, layer_limit
        )

    def new_memory(self, batch_size: int = 1) -> Memory:
        return Memory.empty(self.config.n_layers, batch_size, self.config.hidden)

    def mlm_loss(
        self,
        masked_ids,
        keep,
        target_positions: Sequence[Sequence[int]],
        target_ids: Sequence[Sequence[int]],
        mode: str = "train",
        rng: Optional[np.random._generator.Generator] = None,
    ) -> Tensor:
        """
        Masked-token loss of a batch; positions and ids are given per sequence

        Only the BERT variant has this objective.
        """
        if self.variant != "bert":
            raise RuntimeError("Masked-token pre-training needs the bert variant!")
        masked_ids = np.atleast_2d(masked_ids)
        H, _, _ = self.encode(masked_ids, keep=keep, mode=mode, rng=rng)
        S = masked_ids.shape[1]
        rows = np.concatenate(
            [b * S + np.asarray(p, dtype=np.int64) for b, p in enumerate(target_positions)]
        )
        flat = reshape(H, (-1, self.config.hidden))
        return mlm_head(
            flat, self.store["embeddings.word"], self.store["lm.bias"], rows, np.concatenate(target_ids)
        )

    def plm_loss(
        self,
        ids,
        rng: np.random._generator.Generator,
        mode: str = "train",
    ) -> Tensor:
        """Permutation language-model loss of one sequence under a fresh random factorization order"""
        if self.variant != "xlnet":
            raise RuntimeError("Permutation pre-training needs the xlnet variant!")
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        return two_stream_forward(ids, rng.permutation(ids.size), self.store, self.config, mode, rng)

    def param_groups(self) -> Dict[str, List[str]]:
        """
        Parameter names per schedule group: 'embeddings', 'layer.0' ... and 'head' (the pooler)

        Pre-training-only tensors (language-model bias, next-sentence head)
        belong to no group.
        """
        groups = OrderedDict()
        groups["embeddings"] = [n for n in self.store.names if n.startswith("embeddings.")]
        for i in range(self.config.n_layers):
            prefix = "layer.%i." % i
            groups["layer.%i" % i] = [n for n in self.store.names if n.startswith(prefix)]
        groups["head"] = [n for n in self.store.names if n.startswith("pooler.")]
        return groups
