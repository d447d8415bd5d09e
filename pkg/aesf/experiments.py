import logging
import numpy as np
import pandas as pd
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from tqdm.auto import tqdm
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from .corpus import (
    ENGLISH_STOPWORDS,
    ItemSpec,
    ScoredEssay,
    kfold_splits,
    remove_stopwords,
    select_item,
    to_labels,
)
from .lstm import LstmConfig
from .metrics import (
    UndefinedKappaError,
    compare_engine_to_human,
    confusion,
    exact_agreement,
)
from .scorers import SCORER_VARIANTS, BowScorer, LstmScorer, Scorer, TransformerScorer
from .tokenizer import Vocab, build_vocab
from .training import (
    ENSEMBLE_MODES,
    EnsembleSpec,
    TrainPlan,
    dev_qwk,
    ensemble_predict,
    finetune,
    pretrain,
)
from .transformer import EncoderConfig

logger = logging.getLogger(__name__)

# single study variants: label and plan changes
GRID_STEPS = OrderedDict(
    [
        ("1", ("(1) Gradual Unfreezing", {"unfreeze": "gradual"})),
        (
            "2",
            (
                "(2) Discriminative Finetuning (xi=0.95)",
                {"lr_variant": "discriminative", "xi": 0.95},
            ),
        ),
        ("3", ("(3) Dropout (0.2)", {"dropout": 0.2})),
        ("4", ("(4) Remove Stop-Words", {"remove_stopwords": True})),
        ("5", ("(5) 3 Layers", {"layer_limit": 3})),
    ]
)
GRID_ROWS = ["1", "2", "1+2", "3", "1+3", "2+3", "1+2+3", "4", "5", "4+5"]
ENSEMBLE_ROWS = ["base", "1", "2", "3", "4", "5"]


@dataclass
class ModelSettings:
    """
    Everything needed to build a fresh scorer of one model family

    Parameters
    ----------
    variant : {'bow', 'lstm', 'bert', 'xlnet'}, default 'bert'
        Model family
    encoder : EncoderConfig
        Transformer shapes (bert and xlnet)
    lstm : LstmConfig
        LSTM shapes
    lstm_max_len : int
        LSTM window length in word pieces
    vocab_size : int
        Target word-piece vocabulary size, built per training split
    min_frequency : int
        Least pair frequency of a vocabulary merge
    bow_cutoff : float
        Document-frequency cutoff of the bag-of-words model
    bow_epochs : int
        Bag-of-words training epochs
    bow_lr : float
        Bag-of-words learning rate
    stoplist : frozenset (optional)
        Stop words, the built-in English list by default
    """

    variant: str = "bert"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    lstm_max_len: int = 64
    vocab_size: int = 2000
    min_frequency: int = 1
    bow_cutoff: float = 0.9
    bow_epochs: int = 100
    bow_lr: float = 0.1
    stoplist: Optional[frozenset] = None

    def __post_init__(self):
        if self.variant not in SCORER_VARIANTS:
            raise ValueError("Choose 'variant' from values %s!" % SCORER_VARIANTS)

    @property
    def n_layers(self) -> int:
        if self.variant in ["bert", "xlnet"]:
            return self.encoder.n_layers
        return self.lstm.n_layers if self.variant == "lstm" else 0


class TrainedModel(NamedTuple):
    scorer: Scorer
    history: pd.DataFrame
    best_epoch: int
    dev_qwk: float


class KfoldResult(NamedTuple):
    metrics: pd.DataFrame
    predictions: pd.DataFrame
    models: pd.DataFrame


def grid_plans(plan: TrainPlan, n_layers: int, rows: Sequence[str] = GRID_ROWS) -> Dict[str, TrainPlan]:
    """
    Training plans of the study variants, keyed by their table labels; 'base' comes first

    A combination "a+b" applies the changes of both single variants. The
    layer limit is capped at the encoder depth.

    Examples
    --------
    >>> plans = grid_plans(TrainPlan(seed=43), n_layers=2)
    >>> list(plans)[:4]
    ['base', '(1) Gradual Unfreezing', '(2) Discriminative Finetuning (xi=0.95)', '1+2']
    >>> plans["4+5"].remove_stopwords, plans["4+5"].layer_limit
    (True, 2)
    """
    plans = OrderedDict(base=plan)
    for row in rows:
        if row == "base":
            continue
        changes = {}
        for step in row.split("+"):
            if step not in GRID_STEPS:
                raise ValueError("Choose grid steps from values %s!" % list(GRID_STEPS))
            changes.update(GRID_STEPS[step][1])
        if "layer_limit" in changes:
            changes["layer_limit"] = min(changes["layer_limit"], n_layers)
        label = GRID_STEPS[row][0] if row in GRID_STEPS else row
        plans[label] = plan.replace(**changes)
    return plans


def _preprocessor(settings: ModelSettings, plan: TrainPlan) -> Callable[[str], str]:
    stoplist = settings.stoplist or ENGLISH_STOPWORDS
    if plan.remove_stopwords:
        return lambda text: remove_stopwords(text, stoplist)
    return lambda text: text


def build_scorer(
    settings: ModelSettings,
    plan: TrainPlan,
    train_texts: Sequence[str],
    k: int,
    spec: Optional[ItemSpec] = None,
    vocab: Optional[Vocab] = None,
) -> Scorer:
    """
    Fresh scorer of the settings' family, with the plan's dropout, stop-word and layer options

    Parameters
    ----------
    settings : ModelSettings
        Model family and shapes
    plan : TrainPlan
        Training options that shape the model
    train_texts : Sequence[str]
        Training essays; the vocabulary (or TF-IDF weighting) is fitted on them
    k : int
        Number of score classes
    spec : ItemSpec (optional)
        Score range of the item
    vocab : Vocab (optional)
        Fixed word-piece vocabulary instead of one built from ``train_texts``
    """
    common = dict(
        spec=spec,
        remove_stopwords=plan.remove_stopwords,
        stoplist=settings.stoplist,
        window_mode=plan.window_mode,
    )
    if plan.layer_limit is not None and settings.variant not in ["bert", "xlnet"]:
        raise ValueError("A layer limit applies to the bert and xlnet variants only!")
    if settings.variant == "bow":
        return BowScorer.build(train_texts, k, settings.bow_cutoff, plan.seed, **common)
    if vocab is None:
        preprocess = _preprocessor(settings, plan)
        vocab = build_vocab(
            [preprocess(text) for text in train_texts],
            settings.vocab_size,
            settings.min_frequency,
        )
    if settings.variant == "lstm":
        lstm = settings.lstm
        if plan.dropout is not None:
            lstm = replace(lstm, dropout=plan.dropout)
        return LstmScorer(vocab, lstm, k, settings.lstm_max_len, plan.seed, **common)
    encoder = settings.encoder
    if plan.dropout is not None:
        encoder = replace(encoder, dropout=plan.dropout)
    return TransformerScorer(
        vocab,
        encoder,
        settings.variant,
        k,
        plan.seed,
        layer_limit=plan.layer_limit,
        carry_memory=plan.carry_memory and settings.variant == "xlnet",
        **common
    )


def train_scorer(
    settings: ModelSettings,
    plan: TrainPlan,
    train_texts: Sequence[str],
    train_labels: Sequence[int],
    dev_texts: Optional[Sequence[str]] = None,
    dev_labels: Optional[Sequence[int]] = None,
    k: Optional[int] = None,
    spec: Optional[ItemSpec] = None,
    vocab: Optional[Vocab] = None,
    verbose: bool = False,
) -> TrainedModel:
    """
    Build and train one scorer, keeping its best dev epoch

    The bag-of-words family is fitted in one go; the neural families are
    (optionally pre-trained and) fine-tuned with :func:`training.finetune`.
    """
    k = k or (spec.k if spec is not None else int(np.max(train_labels)) + 1)
    if len(train_texts) == 0:
        raise ValueError("Cannot train on an empty training set!")
    scorer = build_scorer(settings, plan, train_texts, k, spec, vocab)
    if settings.variant == "bow":
        losses = scorer.fit(
            train_texts, train_labels, settings.bow_epochs, settings.bow_lr, verbose=verbose
        )
        accuracy = float(np.mean(scorer.predict(train_texts) == np.asarray(train_labels)))
        qwk_value = float("nan")
        if dev_texts is not None and len(dev_texts) > 0:
            qwk_value = dev_qwk(scorer.predict(dev_texts), dev_labels, k)
        history = pd.DataFrame(
            {
                "epoch": np.arange(1, len(losses) + 1),
                "loss": losses,
                "train_accuracy": [np.nan] * (len(losses) - 1) + [accuracy],
                "dev_qwk": [np.nan] * (len(losses) - 1) + [qwk_value],
            }
        )
        return TrainedModel(scorer, history, len(losses), qwk_value)
    if plan.pretrain_steps > 0 and settings.variant in ["bert", "xlnet"]:
        pretrain(scorer, train_texts, plan, verbose)
    result = finetune(scorer, train_texts, train_labels, dev_texts, dev_labels, plan, verbose)
    return TrainedModel(scorer, result.history, result.best_epoch, result.best_qwk)


def _split_data(
    essays: List[ScoredEssay], ids: Iterable[int], spec: ItemSpec, target: str
) -> Tuple[List[ScoredEssay], List[str], np.ndarray]:
    wanted = set(ids)
    chosen = [e for e in essays if e.essay_id in wanted]
    return chosen, [e.text for e in chosen], to_labels(chosen, spec, target)


def agreement_row(
    essays: Sequence[ScoredEssay],
    predicted: Sequence[int],
    spec: ItemSpec,
    target: str = "resolved",
    variant: str = "standard",
) -> dict:
    """
    Agreement of predicted labels with the target scores, and engine against human

    Undefined kappas become NaN (with a warning).
    """
    target_labels = to_labels(essays, spec, target)
    initial = to_labels(essays, spec, "rater1")
    reliability = np.array([spec.to_label(e.rater2) for e in essays], dtype=np.int64)
    row = {"n": len(essays), "qwk": dev_qwk(predicted, target_labels, spec.k)}
    try:
        row.update(compare_engine_to_human(initial, reliability, predicted, spec.k, variant))
    except UndefinedKappaError as err:
        logger.warning("Engine-vs-human agreement undefined: %s", err)
        row.update(
            {
                "qwk_engine": dev_qwk(predicted, initial, spec.k),
                "qwk_human": dev_qwk(reliability, initial, spec.k),
                "acc_engine": exact_agreement(confusion(predicted, initial, spec.k)),
                "acc_human": exact_agreement(confusion(reliability, initial, spec.k)),
            }
        )
    row.pop("engine_ge_human", None)
    return row


def prediction_frame(
    essays: Sequence[ScoredEssay], labels: Sequence[int], spec: ItemSpec
) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "essay_id": [e.essay_id for e in essays],
            "item": [e.item for e in essays],
            "predicted_score": [spec.to_score(int(label)) for label in labels],
        }
    )


def run_experiment(
    func: Callable, queries: List[dict], max_workers: int = 1, verbose: bool = False
) -> pd.DataFrame:
    """
    Train and score one model per query, on a thread pool when max_workers > 1, and stack the result rows

    Parameters
    ----------
    func: Callable
        Job to execute for every query; returns a list of result rows (dicts)
    queries: List[dict]
        One fold, item or study variant per entry
    max_workers: int
        Thread count; 1 runs the queries in order on the calling thread
    verbose : bool
        Show a progress bar over the jobs

    Examples
    --------
    >>> def square(config: dict):
    ...     return [{"x": config["x"], "square": config["x"] ** 2}]
    >>> results = run_experiment(square, [{"x": x} for x in range(4)], max_workers=2)
    >>> results["square"].tolist()
    [0, 1, 4, 9]
    """
    results = []
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            # map keeps the query order
            for rows in tqdm(executor.map(func, queries), total=len(queries), disable=not verbose):
                results += rows
    else:
        for query in tqdm(queries, disable=not verbose):
            results += func(query)
    return pd.DataFrame(results)


def run_fold_job(query: dict) -> List[dict]:
    """
    Train one model family on one fold of one item and evaluate it on the validation chunk

    The query holds ``essays``, ``spec``, ``split`` (a FoldSplit),
    ``settings``, ``plan`` and optionally ``label`` (the study variant) and
    ``vocab``.
    """
    spec, split, plan = query["spec"], query["split"], query["plan"]
    settings = query["settings"]
    essays = query["essays"]
    train, train_texts, train_labels = _split_data(essays, split.train, spec, plan.target)
    dev, dev_texts, dev_labels = _split_data(essays, split.test, spec, plan.target)
    validation, validation_texts, _ = _split_data(essays, split.validation, spec, plan.target)
    trained = train_scorer(
        settings,
        plan,
        train_texts,
        train_labels,
        dev_texts,
        dev_labels,
        spec=spec,
        vocab=query.get("vocab"),
        verbose=query.get("verbose", False),
    )
    predicted = trained.scorer.predict(validation_texts) if validation else np.array([], dtype=np.int64)
    row = {
        "item": spec.item,
        "variant": settings.variant,
        "label": query.get("label", "base"),
        "fold": split.fold,
        "n_train": len(train),
        "n_dev": len(dev),
        "best_epoch": trained.best_epoch,
        "dev_qwk": trained.dev_qwk,
    }
    if validation:
        row.update(agreement_row(validation, predicted, spec, plan.target))
    predictions = prediction_frame(validation, predicted, spec)
    predictions["fold"] = split.fold
    predictions["variant"] = settings.variant
    row.update(
        {
            "scorer": trained.scorer,
            "history": trained.history,
            "predictions": predictions,
            "validation_labels": predicted,
        }
    )
    logger.info(
        "item %i fold %i %s (%s): dev qwk %.4f, validation qwk %.4f",
        spec.item,
        split.fold,
        settings.variant,
        row["label"],
        trained.dev_qwk,
        row.get("qwk", np.nan),
    )
    return [row]


METRIC_COLUMNS = [
    "item",
    "variant",
    "fold",
    "n_train",
    "n_dev",
    "n",
    "best_epoch",
    "dev_qwk",
    "qwk",
    "qwk_engine",
    "qwk_human",
    "acc_engine",
    "acc_human",
]
OBJECT_COLUMNS = ["scorer", "history", "predictions", "validation_labels"]


def _fold_plan(plan: TrainPlan, fold: int) -> TrainPlan:
    return plan if plan.seed is None else plan.replace(seed=plan.seed + fold)


def run_kfold(
    essays: List[ScoredEssay],
    specs: Dict[int, ItemSpec],
    settings: ModelSettings,
    plan: TrainPlan,
    items: Optional[Sequence[int]] = None,
    num_folds: int = 5,
    folds: Optional[Sequence[int]] = None,
    vocab: Optional[Vocab] = None,
    max_workers: int = 1,
    verbose: bool = False,
) -> KfoldResult:
    """
    Five-fold cross-validation of one model family over the chosen items

    Every fold trains on three chunks, selects its epoch on the fourth and
    reports agreement on the fifth (see :func:`corpus.kfold_splits`). Fold
    seeds are ``plan.seed + fold``.

    Returns
    -------
    KfoldResult
        ``metrics``: one row per (item, fold) plus a 'mean' row per item;
        ``predictions``: validation predictions of every fold;
        ``models``: the trained scorers with their histories
    """
    items = sorted(specs) if items is None else list(items)
    splits = kfold_splits(essays, plan.seed, num_folds)
    folds = range(num_folds) if folds is None else folds
    queries = []
    for item in items:
        if item not in specs:
            raise ValueError("Unknown item %i, choose from %s!" % (item, sorted(specs)))
        item_essays = select_item(essays, item)
        for fold in folds:
            queries.append(
                {
                    "essays": item_essays,
                    "spec": specs[item],
                    "split": splits[fold],
                    "settings": settings,
                    "plan": _fold_plan(plan, fold),
                    "vocab": vocab,
                }
            )
    results = run_experiment(run_fold_job, queries, max_workers, verbose)
    metrics = results.reindex(columns=METRIC_COLUMNS)
    means = metrics.drop(columns=["fold"]).groupby(["item", "variant"], as_index=False).mean()
    means["fold"] = "mean"
    metrics = pd.concat([metrics, means[METRIC_COLUMNS]], ignore_index=True)
    predictions = pd.concat(list(results["predictions"]), ignore_index=True)
    models = results[["item", "fold"] + OBJECT_COLUMNS[:2]]
    return KfoldResult(metrics, predictions, models)


def delta_table(qwks: pd.DataFrame) -> pd.DataFrame:
    """
    Percentage difference of every variant's dev QWK from the base run, per item and on average

    Parameters
    ----------
    qwks : pandas.DataFrame
        Dev QWK with one row per variant label (including 'base') and one column per item

    Examples
    --------
    >>> qwks = pd.DataFrame({1: [0.8, 0.84], 2: [0.5, 0.45]}, index=["base", "(1) Gradual Unfreezing"])
    >>> delta_table(qwks).round(6).values.tolist()
    [[5.0, -10.0, -2.5]]
    """
    base = qwks.loc["base"]
    variants = qwks.drop(index="base")
    with np.errstate(divide="ignore", invalid="ignore"):
        deltas = 100.0 * (variants - base) / base
    deltas = deltas.replace([np.inf, -np.inf], np.nan)
    deltas.columns = ["delta_%s" % item for item in qwks.columns]
    deltas["mean_delta"] = deltas.mean(axis=1)
    deltas.index.name = "experiment"
    return deltas


def experiment_grid(
    essays: List[ScoredEssay],
    specs: Dict[int, ItemSpec],
    settings: ModelSettings,
    plan: TrainPlan,
    items: Optional[Sequence[int]] = None,
    fold: int = 0,
    rows: Sequence[str] = GRID_ROWS,
    max_workers: int = 1,
    verbose: bool = False,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Run the base plan and every study variant on one fold and tabulate the dev QWK differences

    All variants of one item share the base seed, so a variant without
    changes reproduces the base run.

    Returns
    -------
    (table, runs)
        The Δ% table (one row per variant, one column per item plus the
        mean) and the per-run results
    """
    if settings.variant not in ["bert", "xlnet"]:
        raise ValueError("The experiment grid needs the bert or xlnet variant!")
    items = sorted(specs) if items is None else list(items)
    splits = kfold_splits(essays, plan.seed)
    plans = grid_plans(plan, settings.encoder.n_layers, rows)
    queries = []
    for item in items:
        if item not in specs:
            raise ValueError("Unknown item %i, choose from %s!" % (item, sorted(specs)))
        for label, variant_plan in plans.items():
            queries.append(
                {
                    "essays": select_item(essays, item),
                    "spec": specs[item],
                    "split": splits[fold],
                    "settings": settings,
                    "plan": variant_plan,
                    "label": label,
                }
            )
    runs = run_experiment(run_fold_job, queries, max_workers, verbose)
    qwks = runs.pivot(index="label", columns="item", values="dev_qwk").reindex(list(plans))
    return delta_table(qwks), runs.drop(columns=OBJECT_COLUMNS)


def comparison_table(rows: Iterable[dict]) -> pd.DataFrame:
    """
    Per-item QWK of every model (rows) with an average column

    Examples
    --------
    >>> rows = [{"model": "bow", "item": 1, "qwk": 0.5}, {"model": "bow", "item": 2, "qwk": 0.7}]
    >>> comparison_table(rows).loc["bow"].round(6).tolist()
    [0.5, 0.7, 0.6]
    """
    frame = pd.DataFrame(list(rows))
    order = list(OrderedDict.fromkeys(frame["model"]))
    table = frame.pivot_table(index="model", columns="item", values="qwk", aggfunc="mean")
    table = table.reindex(order)
    table.columns = ["qwk_%s" % item for item in table.columns]
    table["mean_qwk"] = table.mean(axis=1)
    return table


def run_ensemble(
    essays: List[ScoredEssay],
    specs: Dict[int, ItemSpec],
    families: Sequence[ModelSettings],
    plan: TrainPlan,
    items: Optional[Sequence[int]] = None,
    fold: int = 0,
    rows: Sequence[str] = ENSEMBLE_ROWS,
    max_workers: int = 1,
    verbose: bool = False,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Train the study variants of every model family on one fold and compare members, ensembles and humans

    Per item, each family contributes one member per variant in ``rows``.
    The ensembles are every family alone and all families together, each
    in mean-round and majority mode; ties of the majority vote go to the
    member with the highest dev QWK.

    Returns
    -------
    (table, predictions)
        The model-comparison table (QWK on the validation chunk per item)
        and the ensemble predictions
    """
    items = sorted(specs) if items is None else list(items)
    splits = kfold_splits(essays, plan.seed)
    queries = []
    for item in items:
        for settings in families:
            n_layers = settings.n_layers
            for label, variant_plan in grid_plans(plan, max(n_layers, 1), rows).items():
                if variant_plan.layer_limit is not None and settings.variant not in ["bert", "xlnet"]:
                    variant_plan = variant_plan.replace(layer_limit=None)
                queries.append(
                    {
                        "essays": select_item(essays, item),
                        "spec": specs[item],
                        "split": splits[fold],
                        "settings": settings,
                        "plan": variant_plan,
                        "label": label,
                    }
                )
    runs = run_experiment(run_fold_job, queries, max_workers, verbose)
    table_rows, predictions = [], []
    for item in items:
        spec = specs[item]
        validation, texts, labels = _split_data(
            select_item(essays, item), splits[fold].validation, spec, plan.target
        )
        item_runs = runs[runs["item"] == item]
        for _, run in item_runs[item_runs["label"] == "base"].iterrows():
            table_rows.append({"model": run["variant"], "item": item, "qwk": run["qwk"]})
        groups = [[s.variant] for s in families]
        if len(families) > 1:
            groups.append([s.variant for s in families])
        for group in groups:
            members = item_runs[item_runs["variant"].isin(group)]
            if len(members) < 2:
                continue
            best = int(np.argmax(members["dev_qwk"].fillna(-np.inf).values))
            for mode in ENSEMBLE_MODES:
                spec_ensemble = EnsembleSpec(list(members["scorer"]), mode, best)
                predicted = ensemble_predict(spec_ensemble, texts)
                name = "%s ensemble (%s)" % ("+".join(group), mode)
                table_rows.append(
                    {"model": name, "item": item, "qwk": dev_qwk(predicted, labels, spec.k)}
                )
                frame = prediction_frame(validation, predicted, spec)
                frame["model"] = name
                predictions.append(frame)
        human = [spec.to_label(e.rater2) for e in validation]
        table_rows.append(
            {"model": "human", "item": item, "qwk": dev_qwk(human, to_labels(validation, spec, "rater1"), spec.k)}
        )
    predictions = pd.concat(predictions, ignore_index=True) if predictions else pd.DataFrame()
    return comparison_table(table_rows), predictions
