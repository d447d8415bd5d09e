import logging
import numpy as np
import pandas as pd
from collections import Counter
from dataclasses import asdict, dataclass, replace
from tqdm.auto import tqdm
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Union

from .metrics import UndefinedKappaError, confusion, qwk
from .numeric_core import (
    ParamStore,
    Tensor,
    adam_step,
    cross_entropy,
    dense,
    round_half_away,
)

logger = logging.getLogger(__name__)

LR_VARIANTS = ["fixed", "discriminative"]
UNFREEZE_MODES = ["off", "gradual"]
WINDOW_MODES = ["label-mean", "proba-mean"]
ENSEMBLE_MODES = ["mean-round", "majority"]
LR_PRESETS = {"desk": 1e-3, "base-1e-5": 1e-5, "base-5e-6": 5e-6}


def resolve_lr(value: Union[str, float]) -> float:
    """
    Learning rate from a number or a preset name

    Examples
    --------
    >>> resolve_lr("base-5e-6"), resolve_lr("0.01")
    (5e-06, 0.01)
    """
    if isinstance(value, str) and value in LR_PRESETS:
        return LR_PRESETS[value]
    try:
        return float(value)
    except ValueError:
        raise ValueError(
            "Learning rate must be a number or one of %s, got %r!" % (list(LR_PRESETS), value)
        )


@dataclass
class TrainPlan:
    """
    Fine-tuning schedule and its study variants

    Parameters
    ----------
    epochs : int
        Passes over the training windows
    base_lr : float
        Adam learning rate of the top layer and the head
    lr_variant : {'fixed', 'discriminative'}, default 'fixed'
        * fixed: every layer trains with ``base_lr``
        * discriminative: each layer below trains with ``xi`` times the rate of the layer above
    xi : float
        Layer-to-layer learning-rate ratio in (0, 1]
    unfreeze : {'off', 'gradual'}, default 'off'
        * off: everything trains from the first epoch
        * gradual: the head first, then one more layer per epoch from the top
    dropout : float (optional)
        Dropout override of the model configuration
    layer_limit : int (optional)
        Use only the first ``layer_limit`` encoder layers
    remove_stopwords : bool
        Strip stop words from essays before tokenization
    batch_size : int
        Windows per Adam step
    seed: int (optional)
        Random seed (disabled by default)
    warmup_steps : int
        Linear learning-rate warm-up length, 0 disables it
    window_mode : {'label-mean', 'proba-mean'}, default 'label-mean'
        * label-mean: round the mean of the per-window labels
        * proba-mean: arg max of the mean per-window probabilities
    target : {'resolved', 'rater1'}, default 'resolved'
        Score column to learn
    pretrain_steps : int
        Language-model steps over the training texts before fine-tuning
    mlm_rate : float
        Masking rate of the masked-token objective
    carry_memory : bool
        Feed the memory of one window into the next when scoring (XLNet variant)
    """

    epochs: int = 10
    base_lr: float = 1e-3
    lr_variant: str = "fixed"
    xi: float = 0.95
    unfreeze: str = "off"
    dropout: Optional[float] = None
    layer_limit: Optional[int] = None
    remove_stopwords: bool = False
    batch_size: int = 8
    seed: Optional[int] = None
    warmup_steps: int = 0
    window_mode: str = "label-mean"
    target: str = "resolved"
    pretrain_steps: int = 0
    mlm_rate: float = 0.15
    carry_memory: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive, got %i!" % self.epochs)
        if not self.base_lr > 0.0:
            raise ValueError("base_lr must be positive, got %s!" % self.base_lr)
        if not 0.0 < self.xi <= 1.0:
            raise ValueError("xi must be in (0, 1], got %s!" % self.xi)
        if self.lr_variant not in LR_VARIANTS:
            raise ValueError("Choose 'lr_variant' from values %s!" % LR_VARIANTS)
        if self.unfreeze not in UNFREEZE_MODES:
            raise ValueError("Choose 'unfreeze' from values %s!" % UNFREEZE_MODES)
        if self.window_mode not in WINDOW_MODES:
            raise ValueError("Choose 'window_mode' from values %s!" % WINDOW_MODES)
        if self.target not in ["resolved", "rater1"]:
            raise ValueError("Choose 'target' from values ['resolved', 'rater1']!")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1), got %s!" % self.dropout)
        if self.layer_limit is not None and self.layer_limit < 1:
            raise ValueError("layer_limit must be positive, got %i!" % self.layer_limit)
        if self.batch_size < 1 or self.warmup_steps < 0 or self.pretrain_steps < 0:
            raise ValueError("batch_size must be positive, warm-up and pre-training steps nonnegative!")

    def replace(self, **changes) -> "TrainPlan":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnsembleSpec:
    """
    Members of one item's ensemble and how their labels are combined

    Parameters
    ----------
    members : list
        Trained scorers with ``k`` and ``predict(texts)``
    mode : {'mean-round', 'majority'}, default 'mean-round'
        * mean-round: the rounded mean of the member labels
        * majority: the modal label, ties go to the best member
    best : int
        Index of the best member (highest dev agreement)
    """

    members: list
    mode: str = "mean-round"
    best: int = 0

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("An ensemble needs at least 2 members, got %i!" % len(self.members))
        if self.mode not in ENSEMBLE_MODES:
            raise ValueError("Choose 'mode' from values %s!" % ENSEMBLE_MODES)
        if not 0 <= self.best < len(self.members):
            raise ValueError("Best member index %i is out of range!" % self.best)


class FinetuneResult(NamedTuple):
    snapshot: Dict[str, np.ndarray]
    history: pd.DataFrame
    best_epoch: int
    best_qwk: float


def classification_head(pooled: Tensor, k: int, store: ParamStore) -> Tensor:
    """
    Class logits dense(pooled) with ``classifier.weight`` (k, R) and ``classifier.bias``

    Examples
    --------
    >>> store = ParamStore()
    >>> _ = store.add("classifier.weight", np.zeros((3, 4)))
    >>> _ = store.add("classifier.bias", np.zeros(3))
    >>> classification_head(Tensor(np.ones((2, 4))), 3, store).data.tolist()
    [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    """
    if k < 2:
        raise ValueError("A classifier needs at least 2 classes, got %i!" % k)
    if store["classifier.weight"].shape[0] != k:
        raise ValueError(
            "Classifier has %i outputs, expected %i!" % (store["classifier.weight"].shape[0], k)
        )
    return dense(pooled, store["classifier.weight"], store["classifier.bias"])


def discriminative_lrs(base_lr: float, xi: float, layer_count: int) -> List[float]:
    """
    Per-layer learning rates, bottom to top; the top layer gets ``base_lr``

    Examples
    --------
    >>> [round(lr, 12) for lr in discriminative_lrs(1e-5, 0.95, 3)]
    [9.025e-06, 9.5e-06, 1e-05]
    """
    if not base_lr > 0.0 or not 0.0 < xi <= 1.0:
        raise ValueError("Need base_lr > 0 and xi in (0, 1], got %s and %s!" % (base_lr, xi))
    return [base_lr * xi ** (layer_count - 1 - i) for i in range(layer_count)]


def gradual_unfreeze(epoch: int, n_layers: int) -> Set[str]:
    """
    Trainable groups in a given epoch: the head, then one more layer per epoch from the top, the embeddings last

    Examples
    --------
    >>> sorted(gradual_unfreeze(1, 12))
    ['head']
    >>> sorted(gradual_unfreeze(3, 12))
    ['head', 'layer.10', 'layer.11']
    >>> "embeddings" in gradual_unfreeze(4, 2)
    True
    """
    if epoch < 1:
        raise ValueError("Epochs count from 1, got %i!" % epoch)
    groups = {"head"}
    for j in range(min(epoch - 1, n_layers)):
        groups.add("layer.%i" % (n_layers - 1 - j))
    if epoch >= n_layers + 2:
        groups.add("embeddings")
    return groups


def group_lrs(
    groups: Dict[str, List[str]], plan: TrainPlan
) -> Dict[str, float]:
    """Learning rate of every parameter name in ``groups`` under the plan's lr variant"""
    layers = [g for g in groups if g.startswith("layer.")]
    if plan.lr_variant == "discriminative" and layers:
        layer_lrs = discriminative_lrs(plan.base_lr, plan.xi, len(layers))
    else:
        layer_lrs = [plan.base_lr] * len(layers)
    lrs = {}
    for group, names in groups.items():
        if group.startswith("layer."):
            lr = layer_lrs[int(group.split(".")[1])]
        elif group == "embeddings" and layers:
            lr = layer_lrs[0]
        else:
            lr = plan.base_lr
        for name in names:
            lrs[name] = lr
    return lrs


def sliding_windows(token_count: int, window: int = 510) -> List[tuple]:
    """
    Full-length token windows covering an essay; the last one is shifted back to overlap its predecessor

    Examples
    --------
    >>> sliding_windows(600)
    [(0, 510), (90, 600)]
    >>> sliding_windows(1200)
    [(0, 510), (510, 1020), (690, 1200)]
    >>> sliding_windows(7)
    [(0, 7)]
    """
    if token_count < 1 or window < 1:
        raise ValueError(
            "Need token_count >= 1 and window >= 1, got %i and %i!" % (token_count, window)
        )
    if token_count <= window:
        return [(0, token_count)]
    windows = [(start, min(start + window, token_count)) for start in range(0, token_count, window)]
    if windows[-1][1] - windows[-1][0] < window:
        windows[-1] = (token_count - window, token_count)
    return windows


def combine_window_labels(labels: Sequence[int], k: int) -> int:
    """
    Round the mean window label half away from zero and clamp it to [0, k)

    Examples
    --------
    >>> combine_window_labels([2, 3], 5), combine_window_labels([3, 3, 3], 5)
    (3, 3)
    """
    if len(labels) == 0:
        raise ValueError("No window labels to combine!")
    label = round_half_away(float(np.mean(labels)))
    return int(min(max(label, 0), k - 1))


def predict_essay(scorer, text: str, window_mode: str = "label-mean") -> int:
    """
    Score label of one essay from the predictions of its sliding windows

    Parameters
    ----------
    scorer : Scorer
        Trained model; ``window_probabilities(text)`` gives one row per window
    text : str
        Essay text
    window_mode : {'label-mean', 'proba-mean'}, default 'label-mean'
        * label-mean: round the mean of the window arg max labels
        * proba-mean: arg max of the mean window probabilities
    """
    if window_mode not in WINDOW_MODES:
        raise ValueError("Choose 'window_mode' from values %s!" % WINDOW_MODES)
    proba = scorer.window_probabilities(text)
    if window_mode == "proba-mean":
        return int(np.argmax(proba.mean(axis=0)))
    return combine_window_labels(np.argmax(proba, axis=1), proba.shape[1])


def dev_qwk(predicted: Sequence[int], labels: Sequence[int], k: int) -> float:
    """Quadratic weighted kappa, NaN (with a warning) when it is undefined"""
    try:
        return qwk(confusion(predicted, labels, k))
    except UndefinedKappaError as err:
        logger.warning("Dev agreement undefined: %s", err)
        return float("nan")


def _set_groups(store: ParamStore, groups: Dict[str, List[str]], active: Set[str]):
    store.set_trainable(store.names, False)
    for group in active:
        store.set_trainable(groups[group], True)


def finetune(
    scorer,
    train_texts: Sequence[str],
    train_labels: Sequence[int],
    dev_texts: Optional[Sequence[str]] = None,
    dev_labels: Optional[Sequence[int]] = None,
    plan: Optional[TrainPlan] = None,
    verbose: bool = False,
) -> FinetuneResult:
    """
    Mini-batch Adam fine-tuning with the plan's schedules, keeping the best dev epoch

    Every training essay is expanded into its sliding windows, each labeled
    with the essay label. After every epoch the dev essays are scored with
    :func:`predict_essay`; the parameters of the epoch with the highest dev
    quadratic weighted kappa are restored into ``scorer`` at the end.

    Parameters
    ----------
    scorer : Scorer
        Model to train in place
    train_texts : Sequence[str]
        Training essays
    train_labels : Sequence[int]
        Their labels in [0, k)
    dev_texts : Sequence[str] (optional)
        Development essays
    dev_labels : Sequence[int] (optional)
        Their labels
    plan : TrainPlan (optional)
        Schedule, the defaults otherwise
    verbose : bool
        Show progress and per-epoch summaries

    Returns
    -------
    FinetuneResult
        Best snapshot, per-epoch history (epoch, loss, train_accuracy,
        dev_qwk), best epoch and its dev agreement
    """
    plan = plan or TrainPlan()
    units, unit_labels = scorer.prepare(train_texts, train_labels)
    if len(units) == 0:
        raise ValueError("Cannot fine-tune on an empty training set!")
    rng = np.random.default_rng(plan.seed)
    store = scorer.store
    groups = scorer.param_groups()
    n_layers = len([g for g in groups if g.startswith("layer.")])
    lrs = group_lrs(groups, plan)
    has_dev = dev_texts is not None and len(dev_texts) > 0
    rows = []
    best_epoch, best_qwk, snapshot = 0, float("nan"), None
    step = 0
    for epoch in tqdm(range(1, plan.epochs + 1), disable=not verbose):
        active = gradual_unfreeze(epoch, n_layers) if plan.unfreeze == "gradual" else set(groups)
        _set_groups(store, groups, active & set(groups))
        order = rng.permutation(len(units))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), plan.batch_size):
            batch = order[start : start + plan.batch_size]
            logits = scorer.batch_logits([units[j] for j in batch], mode="train", rng=rng)
            loss = cross_entropy(logits, unit_labels[batch])
            step += 1
            scale = min(1.0, step / plan.warmup_steps) if plan.warmup_steps > 0 else 1.0
            step_lrs = {name: lrs.get(name, plan.base_lr) * scale for name in store.trainable_names}
            adam_step(store, store.gradients(loss), step_lrs)
            total_loss += loss.item() * len(batch)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == unit_labels[batch]))
        qwk_value = float("nan")
        if has_dev:
            qwk_value = dev_qwk(scorer.predict(dev_texts), dev_labels, scorer.k)
        rows.append(
            {
                "epoch": epoch,
                "loss": total_loss / len(order),
                "train_accuracy": correct / len(order),
                "dev_qwk": qwk_value,
            }
        )
        if verbose:
            logger.info(
                "epoch %i: loss %.4f, train accuracy %.3f, dev qwk %.4f",
                epoch,
                rows[-1]["loss"],
                rows[-1]["train_accuracy"],
                qwk_value,
            )
        if not has_dev or (not np.isnan(qwk_value) and not qwk_value <= best_qwk):
            best_epoch, best_qwk, snapshot = epoch, qwk_value, store.snapshot()
        elif np.isnan(best_qwk):
            # the latest epoch stands in until some dev agreement is defined
            best_epoch, snapshot = epoch, store.snapshot()
    _set_groups(store, groups, set(groups))
    store.restore(snapshot)
    return FinetuneResult(
        snapshot,
        pd.DataFrame(rows, columns=["epoch", "loss", "train_accuracy", "dev_qwk"]),
        best_epoch,
        float(best_qwk),
    )


def pretrain(
    scorer, texts: Sequence[str], plan: TrainPlan, verbose: bool = False
) -> List[float]:
    """
    Language-model warm start on training texts before fine-tuning

    The BERT variant trains the masked-token objective, the XLNet variant the
    permutation objective; one randomly drawn window per step.
    """
    if plan.pretrain_steps == 0:
        return []
    units, _ = scorer.prepare(texts, np.zeros(len(texts), dtype=np.int64))
    units = scorer.pretrain_units(units)
    if len(units) == 0:
        logger.warning("No window is long enough for language-model pre-training")
        return []
    rng = np.random.default_rng(plan.seed)
    store = scorer.store
    store.set_trainable(store.names, True)
    losses = []
    for _ in tqdm(range(plan.pretrain_steps), disable=not verbose):
        unit = units[int(rng.integers(len(units)))]
        loss = scorer.pretrain_loss(unit, rng, rate=plan.mlm_rate)
        adam_step(store, store.gradients(loss), plan.base_lr)
        losses.append(loss.item())
    logger.info("Pre-trained %i steps, last loss %.4f", plan.pretrain_steps, losses[-1])
    return losses


def combine_labels(labels: Sequence[int], mode: str = "mean-round", best: int = 0) -> int:
    """
    One ensemble label from the member labels of one essay

    Examples
    --------
    >>> combine_labels([2, 3, 3]), combine_labels([2, 3, 3], "majority")
    (3, 3)
    >>> combine_labels([2, 2, 3, 3], "majority", best=3)
    3
    >>> combine_labels([2, 2, 3, 3, 1], "majority", best=4)
    2
    """
    labels = [int(label) for label in labels]
    if mode not in ENSEMBLE_MODES:
        raise ValueError("Choose 'mode' from values %s!" % ENSEMBLE_MODES)
    if mode == "mean-round":
        return round_half_away(float(np.mean(labels)))
    counts = Counter(labels)
    top = max(counts.values())
    modes = [label for label, count in counts.items() if count == top]
    if len(modes) == 1:
        return modes[0]
    # ties go to the best member, else to the first member voting for a mode
    if labels[best] in modes:
        return labels[best]
    return next(label for label in labels if label in modes)


def ensemble_predict(spec: EnsembleSpec, texts: Sequence[str]) -> np.ndarray:
    """Ensemble labels of several essays; all members must share one label space"""
    ks = {member.k for member in spec.members}
    if len(ks) != 1:
        raise ValueError("Ensemble members disagree on the number of classes: %s!" % sorted(ks))
    member_labels = np.array([member.predict(texts) for member in spec.members])
    return np.array(
        [combine_labels(member_labels[:, j], spec.mode, spec.best) for j in range(len(texts))],
        dtype=np.int64,
    )
