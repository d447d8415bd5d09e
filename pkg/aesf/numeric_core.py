import json
import logging
import numpy as np
from collections import OrderedDict
from scipy.special import erf, expit, logsumexp
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AESF1"


class ShapeError(ValueError):
    """Operand shapes do not conform"""


class ConsistencyError(RuntimeError):
    """Gradients and parameters disagree"""


def round_half_away(x):
    """
    Round to the nearest integer with halves going away from zero

    Examples
    --------
    >>> round_half_away(2.5), round_half_away(-2.5), round_half_away(2.4)
    (3, -3, 2)
    """
    value = np.sign(x) * np.floor(np.abs(x) + 0.5)
    if np.ndim(value) == 0:
        return int(value)
    return value.astype(np.int64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum over the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(item, (slice, int, np.integer)) or item is Ellipsis
        for item in items
    )


class Tensor:
    """
    Dense float64 array that records how it was computed

    Tensors built by the differentiable operations of this module remember
    their inputs and a vector-Jacobian product, which :class:`GradTape` replays
    in reverse. Leaf tensors with ``requires_grad=True`` are the parameters.

    Parameters
    ----------
    data : array_like
        Values, stored as a C-ordered float64 array
    requires_grad : bool
        Mark a leaf tensor as differentiable

    Examples
    --------
    >>> a = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> b = Tensor([[3.0], [4.0]])
    >>> c = a @ b
    >>> c.data
    array([[11.]])
    >>> grads = GradTape(c).backward()
    >>> grads[id(a)]
    array([[3., 4.]])
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    def __repr__(self):
        return "Tensor(shape=%s, op=%s, requires_grad=%s)" % (
            self.shape,
            self.op,
            self.requires_grad,
        )

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


class GradTape:
    """
    Reverse-mode replay of the operations that produced ``output``

    The tape is the topological order of every recorded application that
    leads to ``output``; :meth:`backward` visits each of them exactly once,
    in reverse.

    Parameters
    ----------
    output : Tensor
        The (usually scalar) result to differentiate

    Examples
    --------
    >>> x = Tensor([1.0, -2.0], requires_grad=True)
    >>> y = (x * x).sum()
    >>> tape = GradTape(y)
    >>> len(tape.records)
    2
    >>> tape.backward()[id(x)]
    array([ 2., -4.])
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.records = self._record(output)

    @staticmethod
    def _record(output: Tensor) -> List[Tensor]:
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if node._backward is not None:
                    order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, seed: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """Return gradients of the output keyed by ``id()`` of each leaf tensor"""
        if seed is None:
            if self.output.size != 1:
                raise ShapeError(
                    "Provide a seed gradient for non-scalar output of shape %s!"
                    % (self.output.shape,)
                )
            seed = np.ones_like(self.output.data)
        grads = {id(self.output): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad
        return grads


def gradient(loss: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to the given leaf tensors"""
    grads = GradTape(loss).backward() if loss.requires_grad else {}
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


### elementwise and structural primitives ###


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("Cannot %s tensors of shape %s and %s!" % (op, a.shape, b.shape))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "subtract")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "multiply")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "divide")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """
    Exact Gaussian error linear unit, 0.5·x·(1 + erf(x/√2))

    Examples
    --------
    >>> [round(v, 5) for v in gelu(Tensor([0.0, 3.0, -3.0])).data.tolist()]
    [0.0, 2.99595, -0.00405]
    """
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward, "gelu")


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {
    "identity": identity,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "gelu": gelu,
}


def matmul(a, b) -> Tensor:
    """
    Matrix product over the last two axes, with numpy batch broadcasting

    Examples
    --------
    >>> matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]])).data
    array([[1., 2.],
           [3., 4.]])
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("Dimension mismatch in matmul: %s x %s" % (a.shape, b.shape))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("Dimension mismatch in matmul: %s x %s" % (a.shape, b.shape))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _make(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape"
    )


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def swap_last(x: Tensor) -> Tensor:
    """Swap the two trailing axes"""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[idx] += g
        else:
            np.add.at(grad, idx, g)
        return (grad,)

    return _make(x.data[idx], (x,), backward, "getitem")


def take_rows(table: Tensor, ids) -> Tensor:
    """
    Look up rows of a table, the differentiable embedding lookup

    Examples
    --------
    >>> table = Tensor(np.arange(6.0).reshape(3, 2))
    >>> take_rows(table, [2, 0]).data
    array([[4., 5.],
           [0., 1.]])
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            "Row id out of range [0, %i): %i" % (table.shape[0], int(ids.max()))
        )

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _make(table.data[ids], (table,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "Cannot concatenate shapes %s along axis %i!"
            % ([t.shape for t in tensors], axis)
        )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


### neural network building blocks ###


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Numerically stable softmax along ``axis``

    Examples
    --------
    >>> [round(v, 5) for v in softmax(Tensor([1.0, 2.0])).data.tolist()]
    [0.26894, 0.73106]
    """
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ValueError("Axis %i is out of range for shape %s!" % (axis, x.shape))
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def dense(x, w: Tensor, b: Optional[Tensor] = None, f: str = "identity") -> Tensor:
    """
    Fully connected layer f(x·wᵀ + b), with ``w`` of shape (out, in)

    Parameters
    ----------
    x : Tensor
        Inputs, last axis of size ``in``; a 1-d input is treated as one row
    w : Tensor
        Weight matrix of shape (out, in)
    b : Tensor (optional)
        Bias of shape (out,), broadcast over rows
    f : {'identity', 'tanh', 'sigmoid', 'gelu'}, default 'identity'
        Transfer function

    Examples
    --------
    >>> dense(Tensor([1.0]), Tensor([[2.0]]), Tensor([1.0])).data
    array([3.])
    """
    if f not in ACTIVATIONS:
        raise ValueError("Choose 'f' from values %s!" % list(ACTIVATIONS))
    x = as_tensor(x)
    if x.ndim == 1:
        return reshape(dense(reshape(x, (1, -1)), w, b, f), (w.shape[0],))
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError("Dimension mismatch in dense: %s x %s" % (x.shape, w.shape))
    out = matmul(x, swap_last(w))
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(
                "Bias shape %s does not match weight shape %s!" % (b.shape, w.shape)
            )
        out = add(out, b)
    return ACTIVATIONS[f](out)


def feature_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """
    Normalize every row over its last axis, then scale by ``gamma`` and shift by ``beta``

    Examples
    --------
    >>> feature_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=0.0).data
    array([[-1.,  1.]])
    """
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            "Norm parameters %s / %s do not match features of %s!"
            % (gamma.shape, beta.shape, x.shape)
        )
    n = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data

    def backward(g):
        g_hat = g * gamma.data
        gx = (
            inv_std
            / n
            * (
                n * g_hat
                - g_hat.sum(axis=-1, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
            )
        )
        return (
            gx,
            _unbroadcast(g * x_hat, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _make(out, (x, gamma, beta), backward, "feature_norm")


def dropout(
    x: Tensor,
    p: float,
    mode: str = "eval",
    rng: Optional[np.random._generator.Generator] = None,
) -> Tensor:
    """
    Inverted dropout: in train mode zero elements with probability ``p`` and scale survivors by 1/(1-p)

    Examples
    --------
    >>> x = Tensor(np.ones(3))
    >>> dropout(x, 0.5, mode="eval") is x
    True
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("Dropout probability must be in [0, 1), got %s!" % p)
    if mode not in ["train", "eval"]:
        raise ValueError("Choose 'mode' from values ['train', 'eval']!")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("Provide a random generator for train-mode dropout!")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """
    Mean softmax cross-entropy of integer ``targets`` under (N, k) ``logits``

    Examples
    --------
    >>> round(cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item(), 6) == round(np.log(4), 6)
    True
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            "Cross-entropy needs (N, k) logits and N targets, got %s and %s!"
            % (logits.shape, targets.shape)
        )
    if logits.shape[0] == 0:
        raise ValueError("Cross-entropy over an empty batch is undefined!")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError("Target label out of range [0, %i)!" % logits.shape[1])
    rows = np.arange(len(targets))
    log_z = logsumexp(logits.data, axis=1)
    loss = np.mean(log_z - logits.data[rows, targets])

    def backward(g):
        proba = np.exp(logits.data - log_z[:, None])
        proba[rows, targets] -= 1.0
        return (g * proba / len(targets),)

    return _make(loss, (logits,), backward, "cross_entropy")


def normal_init(
    rng: np.random._generator.Generator, shape: tuple, std: float = 0.02
) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


### parameters and optimization ###


class ParamEntry:
    """One named parameter with its trainable flag and Adam state"""

    def __init__(self, tensor: Tensor, trainable: bool, fixed: bool):
        self.tensor = tensor
        self.trainable = trainable
        self.fixed = fixed
        self.m = np.zeros_like(tensor.data)
        self.v = np.zeros_like(tensor.data)
        self.step = 0

    def __repr__(self):
        return "ParamEntry(shape=%s, trainable=%s, fixed=%s, step=%i)" % (
            self.tensor.shape,
            self.trainable,
            self.fixed,
            self.step,
        )


class ParamStore:
    """
    Ordered registry of named parameter tensors

    Parameters flagged ``fixed`` (e.g. a constant identity recurrence) never
    become trainable, whatever :meth:`set_trainable` is asked to do.

    Examples
    --------
    >>> store = ParamStore()
    >>> w = store.add("w", np.ones((2, 2)))
    >>> _ = store.add("cec", np.eye(2), fixed=True)
    >>> store.trainable_names
    ['w']
    >>> store.set_trainable(store.names, True)
    >>> store.trainable_names
    ['w']
    >>> store.num_parameters()
    8
    """

    def __init__(self):
        self._entries = OrderedDict()

    def __repr__(self):
        return "ParamStore(entries=%i, trainable=%i)" % (
            len(self._entries),
            len(self.trainable_names),
        )

    def __len__(self):
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def add(
        self, name: str, data, trainable: bool = True, fixed: bool = False
    ) -> Tensor:
        if name in self._entries:
            raise ValueError("Parameter '%s' is already registered!" % name)
        trainable = trainable and not fixed
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self._entries[name] = ParamEntry(tensor, trainable, fixed)
        return tensor

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    @property
    def names(self) -> List[str]:
        return list(self._entries)

    @property
    def trainable_names(self) -> List[str]:
        return [name for name, e in self._entries.items() if e.trainable]

    def set_trainable(self, names: Iterable[str], trainable: bool):
        for name in names:
            entry = self._entries[name]
            if entry.fixed:
                continue
            entry.trainable = trainable
            entry.tensor.requires_grad = trainable

    def num_parameters(self) -> int:
        return int(sum(e.tensor.size for e in self._entries.values()))

    def gradients(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """Gradient of ``loss`` for every entry; zeros for frozen or unreached ones"""
        grads = GradTape(loss).backward() if loss.requires_grad else {}
        return {
            name: grads.get(id(e.tensor), np.zeros_like(e.tensor.data))
            if e.trainable
            else np.zeros_like(e.tensor.data)
            for name, e in self._entries.items()
        }

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: e.tensor.data.copy() for name, e in self._entries.items()}

    def restore(self, snapshot: Mapping[str, np.ndarray]):
        for name, values in snapshot.items():
            # in place, so tied references stay tied
            self._entries[name].tensor.data[...] = values

    def save(self, path: str, config: Optional[dict] = None):
        """Write a self-describing ``AESF1`` checkpoint"""
        header = {
            "config": config or {},
            "tensors": [
                {
                    "name": name,
                    "shape": list(e.tensor.shape),
                    "trainable": e.trainable,
                    "fixed": e.fixed,
                }
                for name, e in self._entries.items()
            ],
        }
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC + b"\n")
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for e in self._entries.values():
                f.write(np.ascontiguousarray(e.tensor.data, dtype="<f8").tobytes())
        logger.info("Saved %i tensors to %s", len(self._entries), path)

    @classmethod
    def load(cls, path: str) -> Tuple["ParamStore", dict]:
        """Read a checkpoint written by :meth:`save`; returns (store, config)"""
        with open(path, "rb") as f:
            magic = f.readline().rstrip(b"\n")
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(
                    "Not an aesf checkpoint: magic header %r instead of %r!"
                    % (magic, CHECKPOINT_MAGIC)
                )
            header = json.loads(f.readline().decode("utf-8"))
            payload = f.read()
        store, offset = cls(), 0
        for spec in header["tensors"]:
            count = int(np.prod(spec["shape"], dtype=np.int64))
            values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            store.add(
                spec["name"],
                values.reshape(spec["shape"]).astype(np.float64),
                trainable=spec["trainable"],
                fixed=spec["fixed"],
            )
        if offset != len(payload):
            raise ValueError("Checkpoint payload size does not match its header!")
        return store, header["config"]


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: Union[float, Mapping[str, float]],
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    """
    One bias-corrected Adam update of every trainable entry, in place

    Parameters
    ----------
    store : ParamStore
        Parameters to update; frozen entries are left untouched
    grads : Mapping[str, numpy.ndarray]
        Gradient per parameter name; every trainable entry needs one
    lr : float or Mapping[str, float]
        Global learning rate, or one learning rate per parameter name
    betas : Tuple[float, float]
        Exponential decay of the first and second moment estimates
    eps : float
        Denominator offset

    Examples
    --------
    >>> store = ParamStore()
    >>> _ = store.add("w", [0.0])
    >>> adam_step(store, {"w": np.array([1.0])}, lr=0.1)
    >>> np.round(store["w"].data, 6)
    array([-0.1])
    """
    beta1, beta2 = betas
    for name in store.trainable_names:
        if name not in grads:
            raise ConsistencyError("Missing gradient for trainable parameter '%s'!" % name)
        step_lr = lr if np.isscalar(lr) else lr.get(name)
        if step_lr is None:
            raise ConsistencyError("Missing learning rate for parameter '%s'!" % name)
        entry = store.entry(name)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != entry.tensor.shape:
            raise ShapeError(
                "Gradient shape %s does not match parameter '%s' of shape %s!"
                % (g.shape, name, entry.tensor.shape)
            )
        entry.step += 1
        entry.m = beta1 * entry.m + (1.0 - beta1) * g
        entry.v = beta2 * entry.v + (1.0 - beta2) * g * g
        m_hat = entry.m / (1.0 - beta1**entry.step)
        v_hat = entry.v / (1.0 - beta2**entry.step)
        entry.tensor.data -= step_lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    max_coords: Optional[int] = None,
    rng: Optional[np.random._generator.Generator] = None,
) -> dict:
    """
    Compare reverse-mode gradients with central differences

    The relative error of a coordinate is |a - n| / max(|a|, |n|, floor)
    with ``a`` the analytic and ``n`` the numeric derivative.

    Parameters
    ----------
    f : Callable
        Scalar function of the store, evaluated deterministically
    store : ParamStore
        The point of evaluation; perturbed in place and restored
    h : float
        Finite-difference step
    tol : float
        Maximum tolerated relative error
    floor : float
        Lower bound of the error denominator
    names : Sequence[str] (optional)
        Entries to check, all trainable ones by default
    max_coords : int (optional)
        Check at most this many random coordinates per entry

    Examples
    --------
    >>> store = ParamStore()
    >>> _ = store.add("theta", [0.5, -1.5, 2.0])
    >>> report = grad_check(lambda s: (s["theta"] * s["theta"]).sum() * 0.5, store, h=1e-3)
    >>> report["passed"], report["num_checked"]
    (True, 3)
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else store.trainable_names
    analytic = store.gradients(f(store))
    max_rel, max_abs, failures, num_checked = 0.0, 0.0, [], 0
    for name in names:
        data = store[name].data
        flat = data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            f_plus = f(store).item()
            flat[i] = original - h
            f_minus = f(store).item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), floor)
            max_rel, max_abs = max(max_rel, rel_err), max(max_abs, abs_err)
            num_checked += 1
            if rel_err > tol:
                failures.append((name, int(i), float(a), float(numeric)))
    if failures:
        logger.warning("Gradient check failed on %i coordinates", len(failures))
    return {
        "max_rel_error": max_rel,
        "max_abs_error": max_abs,
        "num_checked": num_checked,
        "failures": failures,
        "passed": len(failures) == 0,
    }
