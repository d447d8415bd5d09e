import logging
import numpy as np
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

from .numeric_core import (
    ParamStore,
    ShapeError,
    Tensor,
    add,
    cross_entropy,
    dense,
    dropout,
    matmul,
    mul,
    normal_init,
    sigmoid,
    stack,
    take_rows,
    tanh,
    tensor_sum,
)

logger = logging.getLogger(__name__)

GATES = ["input", "forget", "output", "candidate"]
POOLINGS = ["last", "mean"]


@dataclass
class LstmConfig:
    """
    Shape and initialization of an LSTM essay scorer

    Parameters
    ----------
    vocab_size : int
        Rows of the word embedding table
    embed_dim : int
        Word embedding size E
    hidden : int
        Hidden and cell size H
    n_layers : int
        Number of cascaded LSTM layers
    pooling : {'last', 'mean'}, default 'last'
        * last: hidden state at the last real token
        * mean: average hidden state over the real tokens
    forget_bias : float
        Initial forget-gate bias, at least 1
    dropout : float
        Dropout on the embeddings and the pooled state in train mode
    freeze_embeddings : bool
        Keep the embedding table out of training
    init_std : float
        Standard deviation of the weight initialization
    """

    vocab_size: int = 2000
    embed_dim: int = 32
    hidden: int = 32
    n_layers: int = 1
    pooling: str = "last"
    forget_bias: float = 1.0
    dropout: float = 0.0
    freeze_embeddings: bool = False
    init_std: float = 0.1

    def __post_init__(self):
        for name in ["vocab_size", "embed_dim", "hidden", "n_layers"]:
            if getattr(self, name) < 1:
                raise ValueError("%s must be positive, got %s!" % (name, getattr(self, name)))
        if self.pooling not in POOLINGS:
            raise ValueError("Choose 'pooling' from values %s!" % POOLINGS)
        if self.forget_bias < 1.0:
            raise ValueError("forget_bias must be at least 1, got %s!" % self.forget_bias)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1), got %s!" % self.dropout)


class LstmState(NamedTuple):
    cell: Tensor
    hidden: Tensor
    t: int


def zero_state(batch_size: int, hidden: int) -> LstmState:
    return LstmState(
        Tensor(np.zeros((batch_size, hidden))), Tensor(np.zeros((batch_size, hidden))), 0
    )


def init_lstm_params(
    store: ParamStore,
    config: LstmConfig,
    rng: np.random._generator.Generator,
):
    """
    Register the embedding table and every layer of an LSTM stack

    Each layer ``i`` gets, per gate, ``layer.{i}.{gate}.input_weight`` (H, in),
    ``layer.{i}.{gate}.recurrent_weight`` (H, H) and ``layer.{i}.{gate}.bias``,
    plus the fixed identity ``layer.{i}.cec``.
    """
    store.add(
        "embeddings.word",
        normal_init(rng, (config.vocab_size, config.embed_dim), config.init_std),
        trainable=not config.freeze_embeddings,
    )
    H = config.hidden
    for i in range(config.n_layers):
        fan_in = config.embed_dim if i == 0 else H
        for gate in GATES:
            name = "layer.%i.%s" % (i, gate)
            store.add(name + ".input_weight", normal_init(rng, (H, fan_in), config.init_std))
            store.add(name + ".recurrent_weight", normal_init(rng, (H, H), config.init_std))
            bias = np.full(H, config.forget_bias) if gate == "forget" else np.zeros(H)
            store.add(name + ".bias", bias)
        store.add("layer.%i.cec" % i, np.eye(H), fixed=True)


def lstm_cell(
    x_t: Tensor, state: LstmState, store: ParamStore, layer: int = 0
) -> LstmState:
    """
    One time step of a CEC-gated LSTM layer

    Every gate reads the step input and the previous hidden state. The cell
    is carried through the fixed identity recurrence with a linear transfer:
    ``cell' = f ∘ (cell·CEC) + i ∘ tanh(candidate)`` and
    ``hidden' = o ∘ tanh(cell')``.

    Parameters
    ----------
    x_t : Tensor
        Step input of shape (B, in)
    state : LstmState
        Previous cell and hidden state, each (B, H)
    store : ParamStore
        Parameters registered by :func:`init_lstm_params`
    layer : int
        Index of the layer within the stack

    Examples
    --------
    >>> store = ParamStore()
    >>> init_lstm_params(store, LstmConfig(vocab_size=3, embed_dim=2, hidden=2), np.random.default_rng(0))
    >>> new = lstm_cell(Tensor(np.zeros((1, 2))), zero_state(1, 2), store)
    >>> new.hidden.data.tolist(), new.t
    ([[0.0, 0.0]], 1)
    """
    name = "layer.%i." % layer
    cec = store[name + "cec"]
    if x_t.ndim != 2 or state.hidden.shape != (x_t.shape[0], cec.shape[0]):
        raise ShapeError(
            "LSTM step input %s does not conform to state %s!"
            % (x_t.shape, state.hidden.shape)
        )
    nets = {}
    for gate in GATES:
        nets[gate] = add(
            dense(x_t, store[name + gate + ".input_weight"], store[name + gate + ".bias"]),
            dense(state.hidden, store[name + gate + ".recurrent_weight"]),
        )
    i, f, o = sigmoid(nets["input"]), sigmoid(nets["forget"]), sigmoid(nets["output"])
    cell = add(mul(f, matmul(state.cell, cec)), mul(i, tanh(nets["candidate"])))
    hidden = mul(o, tanh(cell))
    return LstmState(cell, hidden, state.t + 1)


def _as_batch(ids, lengths) -> Tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError("LSTM input must be a non-empty token sequence!")
    if lengths is None:
        lengths = np.full(ids.shape[0], ids.shape[1])
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    if lengths.shape != (ids.shape[0],) or lengths.min() < 1 or lengths.max() > ids.shape[1]:
        raise ValueError("Sequence lengths must be in [1, %i]!" % ids.shape[1])
    return ids, lengths


def lstm_encode(
    ids,
    store: ParamStore,
    config: LstmConfig,
    lengths: Optional[Sequence[int]] = None,
    mode: str = "eval",
    rng: Optional[np.random._generator.Generator] = None,
) -> Tensor:
    """
    Pooled top-layer representation (B, H) of token id sequences

    Positions at or beyond a sequence's length do not update its state, so
    trailing padding never changes the result.
    """
    ids, lengths = _as_batch(ids, lengths)
    B, T = ids.shape
    inputs = dropout(
        take_rows(store["embeddings.word"], ids), config.dropout, mode, rng
    )
    steps = [inputs[:, t, :] for t in range(T)]
    for layer in range(config.n_layers):
        state = zero_state(B, config.hidden)
        outputs = []
        for t in range(T):
            new = lstm_cell(steps[t], state, store, layer)
            keep = (t < lengths).astype(np.float64)[:, None]
            if keep.all():
                state = new
            else:
                state = LstmState(
                    add(mul(new.cell, keep), mul(state.cell, 1.0 - keep)),
                    add(mul(new.hidden, keep), mul(state.hidden, 1.0 - keep)),
                    new.t,
                )
            outputs.append(state.hidden)
        steps = outputs
    if config.pooling == "last":
        pooled = steps[-1]
    else:
        keep = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
        hiddens = stack(steps, axis=1)
        summed = tensor_sum(mul(hiddens, keep[:, :, None]), axis=1)
        pooled = mul(summed, 1.0 / lengths[:, None])
    return dropout(pooled, config.dropout, mode, rng)


def lstm_forward(
    ids,
    store: ParamStore,
    config: LstmConfig,
    lengths: Optional[Sequence[int]] = None,
    mode: str = "eval",
    rng: Optional[np.random._generator.Generator] = None,
) -> Tensor:
    """
    Class logits (B, k) of token id sequences

    Parameters
    ----------
    ids : array_like
        Token ids of shape (T,) or (B, T)
    store : ParamStore
        LSTM parameters plus ``classifier.weight`` (k, H) and ``classifier.bias``
    config : LstmConfig
        Stack configuration
    lengths : Sequence[int] (optional)
        Real length of every sequence, the full width by default
    mode : {'train', 'eval'}
        Dropout mode
    rng : numpy.random.Generator (optional)
        Random generator for train-mode dropout
    """
    pooled = lstm_encode(ids, store, config, lengths, mode, rng)
    return dense(pooled, store["classifier.weight"], store["classifier.bias"])


def lstm_bptt(
    ids,
    labels: Sequence[int],
    store: ParamStore,
    config: LstmConfig,
    lengths: Optional[Sequence[int]] = None,
) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """
    Mean cross-entropy of a batch and its gradients by backpropagation through the unrolled steps

    Frozen entries (the identity CEC, or a frozen embedding table) receive zero gradients.
    """
    loss = cross_entropy(lstm_forward(ids, store, config, lengths), labels)
    return loss, store.gradients(loss)


class LstmClassifier:
    """
    LSTM stack with a dense softmax head, for essay scoring

    Parameters
    ----------
    config : LstmConfig
        Stack configuration
    k : int
        Number of score classes
    seed: int (optional)
        Random seed of the initialization (disabled by default)

    Examples
    --------
    >>> model = LstmClassifier(LstmConfig(vocab_size=10, embed_dim=4, hidden=3), k=2, seed=0)
    >>> model.logits([[5, 6, 7, 0]], lengths=[3]).shape
    (1, 2)
    >>> "layer.0.cec" in model.store.trainable_names
    False
    """

    def __init__(self, config: LstmConfig, k: int, seed: Optional[int] = None):
        if k < 2:
            raise ValueError("A classifier needs at least 2 classes, got %i!" % k)
        rng = np.random.default_rng(seed)
        self.config = config
        self.k = k
        self.store = ParamStore()
        init_lstm_params(self.store, config, rng)
        self.store.add("classifier.weight", normal_init(rng, (k, config.hidden), config.init_std))
        self.store.add("classifier.bias", np.zeros(k))

    def __repr__(self):
        return "LstmClassifier(%s, k=%i)" % (self.config, self.k)

    def logits(
        self,
        ids,
        lengths: Optional[Sequence[int]] = None,
        mode: str = "eval",
        rng: Optional[np.random._generator.Generator] = None,
    ) -> Tensor:
        return lstm_forward(ids, self.store, self.config, lengths, mode, rng)

    def predict(self, ids, lengths: Optional[Sequence[int]] = None) -> np.ndarray:
        return np.argmax(self.logits(ids, lengths).data, axis=1)
