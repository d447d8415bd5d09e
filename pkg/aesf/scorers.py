import logging
import numpy as np
from collections import OrderedDict
from dataclasses import asdict, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .bow import TfidfModel, BowClassifier, fit_tfidf, train_bow_classifier
from .corpus import ENGLISH_STOPWORDS, ItemSpec, remove_stopwords
from .lstm import LstmClassifier, LstmConfig
from .numeric_core import ParamStore, Tensor, normal_init, softmax
from .tokenizer import Vocab, mask_for_mlm, wrap_ids
from .training import classification_head, predict_essay, sliding_windows
from .transformer import EncoderConfig, TransformerEncoder

logger = logging.getLogger(__name__)

SCORER_VARIANTS = ["bow", "lstm", "bert", "xlnet"]


class Scorer:
    """
    Trainable essay scorer of one item: text preparation, a model and its label space

    Subclasses turn an essay into one or more model inputs ("units", one per
    sliding window) and compute class logits for a batch of units.

    Parameters
    ----------
    k : int
        Number of score classes
    spec : ItemSpec (optional)
        Score range, needed to map labels back to scores
    remove_stopwords : bool
        Strip stop words before tokenization
    stoplist : Iterable[str] (optional)
        Stop words, the built-in English list by default
    window_mode : {'label-mean', 'proba-mean'}, default 'label-mean'
        How window predictions are combined, see :func:`training.predict_essay`
    """

    variant = None

    def __init__(
        self,
        k: int,
        spec: Optional[ItemSpec] = None,
        remove_stopwords: bool = False,
        stoplist: Optional[Iterable[str]] = None,
        window_mode: str = "label-mean",
    ):
        if k < 2:
            raise ValueError("A scorer needs at least 2 classes, got %i!" % k)
        if spec is not None and spec.k != k:
            raise ValueError("Item %i has %i classes, not %i!" % (spec.item, spec.k, k))
        self.k = k
        self.spec = spec
        self.remove_stopwords = remove_stopwords
        self.stoplist = frozenset(stoplist) if stoplist is not None else ENGLISH_STOPWORDS
        self.window_mode = window_mode
        self.store = ParamStore()

    def __repr__(self):
        return "%s(k=%i, parameters=%i)" % (
            self.__class__.__name__,
            self.k,
            self.store.num_parameters(),
        )

    @property
    def n_layers(self) -> int:
        return 0

    def preprocess(self, text: str) -> str:
        return remove_stopwords(text, self.stoplist) if self.remove_stopwords else text

    def essay_units(self, text: str) -> list:
        raise NotImplementedError()

    def batch_logits(
        self,
        units: list,
        mode: str = "eval",
        rng: Optional[np.random._generator.Generator] = None,
    ) -> Tensor:
        raise NotImplementedError()

    def param_groups(self) -> Dict[str, List[str]]:
        return OrderedDict(head=self.store.names)

    def prepare(self, texts: Sequence[str], labels: Sequence[int]) -> Tuple[list, np.ndarray]:
        """Training units of several essays, every window labeled with its essay's label"""
        units, unit_labels = [], []
        for text, label in zip(texts, labels):
            essay_units = self.essay_units(text)
            units.extend(essay_units)
            unit_labels.extend([int(label)] * len(essay_units))
        return units, np.asarray(unit_labels, dtype=np.int64)

    def window_probabilities(self, text: str) -> np.ndarray:
        """Class probabilities (windows, k) of one essay"""
        return softmax(self.batch_logits(self.essay_units(text))).data

    def predict(self, texts: Sequence[str]) -> np.ndarray:
        return np.array(
            [predict_essay(self, text, self.window_mode) for text in texts], dtype=np.int64
        )

    def predict_scores(self, texts: Sequence[str]) -> np.ndarray:
        if self.spec is None:
            raise RuntimeError("Set an item spec before predicting scores!")
        return np.array([self.spec.to_score(label) for label in self.predict(texts)], dtype=np.int64)

    def to_config(self) -> dict:
        config = {
            "variant": self.variant,
            "k": self.k,
            "item_spec": list(self.spec) if self.spec is not None else None,
            "remove_stopwords": self.remove_stopwords,
            "window_mode": self.window_mode,
        }
        if self.remove_stopwords:
            config["stoplist"] = sorted(self.stoplist)
        return config

    def save(self, path: str):
        self.store.save(path, config=self.to_config())


def _common_kwargs(config: dict) -> dict:
    spec = config.get("item_spec")
    return dict(
        spec=ItemSpec(*spec) if spec is not None else None,
        remove_stopwords=config["remove_stopwords"],
        stoplist=config.get("stoplist"),
        window_mode=config["window_mode"],
    )


class BowScorer(Scorer):
    """
    TF-IDF features with multinomial logistic regression; one unit per essay

    Examples
    --------
    >>> texts = ["good clear essay", "bad vague essay", "good solid text", "bad weak text"]
    >>> scorer = BowScorer.build(texts, k=2, cutoff=1.0, seed=0)
    >>> _ = scorer.fit(texts, [1, 0, 1, 0], epochs=100, lr=0.1)
    >>> scorer.predict(["good essay", "bad essay"]).tolist()
    [1, 0]
    """

    variant = "bow"

    def __init__(self, tfidf: TfidfModel, k: int, seed: Optional[int] = None, **kwargs):
        super().__init__(k, **kwargs)
        self.tfidf = tfidf
        self.classifier = BowClassifier(tfidf.num_features, k, seed)
        self.store = self.classifier.store
        self.seed = seed

    @classmethod
    def build(
        cls,
        texts: Sequence[str],
        k: int,
        cutoff: float = 0.9,
        seed: Optional[int] = None,
        **kwargs
    ) -> "BowScorer":
        """Fit the TF-IDF weighting on the (preprocessed) training texts"""
        template = Scorer(k, **kwargs)
        tfidf = fit_tfidf([template.preprocess(t) for t in texts], cutoff)
        return cls(tfidf, k, seed, **kwargs)

    def features(self, texts: Sequence[str]) -> np.ndarray:
        return self.tfidf.transform([self.preprocess(t) for t in texts])

    def essay_units(self, text: str) -> list:
        return [self.features([text])[0]]

    def batch_logits(self, units, mode="eval", rng=None) -> Tensor:
        return self.classifier.logits(np.stack(units))

    def fit(
        self,
        texts: Sequence[str],
        labels: Sequence[int],
        epochs: int = 100,
        lr: float = 0.1,
        batch_size: Optional[int] = None,
        verbose: bool = False,
    ) -> List[float]:
        """Train the classifier from scratch; returns the per-epoch losses"""
        self.classifier, losses = train_bow_classifier(
            self.features(texts),
            labels,
            self.k,
            epochs=epochs,
            lr=lr,
            rng=np.random.default_rng(self.seed),
            batch_size=batch_size,
            verbose=verbose,
        )
        self.store = self.classifier.store
        return losses

    def to_config(self) -> dict:
        config = super().to_config()
        config["tfidf"] = self.tfidf.to_config()
        return config

    @classmethod
    def from_checkpoint(cls, store: ParamStore, config: dict) -> "BowScorer":
        scorer = cls(TfidfModel.from_config(config["tfidf"]), config["k"], **_common_kwargs(config))
        scorer.classifier.store = store
        scorer.store = store
        return scorer


class LstmScorer(Scorer):
    """
    Word-piece LSTM classifier; essays longer than ``max_len`` pieces are scored in windows

    Examples
    --------
    >>> vocab = Vocab(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b"])
    >>> scorer = LstmScorer(vocab, LstmConfig(embed_dim=4, hidden=4), k=2, max_len=3, seed=0)
    >>> [unit.tolist() for unit in scorer.essay_units("a b a b")]
    [[5, 6, 5], [6, 5, 6]]
    >>> list(scorer.param_groups())
    ['embeddings', 'layer.0', 'head']
    """

    variant = "lstm"

    def __init__(
        self,
        vocab: Vocab,
        config: LstmConfig,
        k: int,
        max_len: int = 64,
        seed: Optional[int] = None,
        **kwargs
    ):
        super().__init__(k, **kwargs)
        if max_len < 1:
            raise ValueError("max_len must be positive, got %i!" % max_len)
        self.vocab = vocab
        self.config = replace(config, vocab_size=len(vocab))
        self.max_len = max_len
        self.classifier = LstmClassifier(self.config, k, seed)
        self.store = self.classifier.store

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def essay_units(self, text: str) -> list:
        ids = np.asarray(self.vocab.tokenize(self.preprocess(text)), dtype=np.int64)
        if ids.size == 0:
            return [np.array([self.vocab.unk_id])]
        return [ids[start:end] for start, end in sliding_windows(ids.size, self.max_len)]

    def batch_logits(self, units, mode="eval", rng=None) -> Tensor:
        lengths = np.array([unit.size for unit in units])
        ids = np.full((len(units), lengths.max()), self.vocab.pad_id, dtype=np.int64)
        for row, unit in enumerate(units):
            ids[row, : unit.size] = unit
        return self.classifier.logits(ids, lengths, mode, rng)

    def param_groups(self) -> Dict[str, List[str]]:
        groups = OrderedDict()
        if not self.config.freeze_embeddings:
            groups["embeddings"] = ["embeddings.word"]
        for i in range(self.config.n_layers):
            groups["layer.%i" % i] = [n for n in self.store.names if n.startswith("layer.%i." % i)]
        groups["head"] = ["classifier.weight", "classifier.bias"]
        return groups

    def to_config(self) -> dict:
        config = super().to_config()
        config.update(
            vocab=self.vocab.pieces, lstm=asdict(self.config), max_len=self.max_len
        )
        return config

    @classmethod
    def from_checkpoint(cls, store: ParamStore, config: dict) -> "LstmScorer":
        scorer = cls(
            Vocab(config["vocab"]),
            LstmConfig(**config["lstm"]),
            config["k"],
            config["max_len"],
            **_common_kwargs(config)
        )
        scorer.classifier.store = store
        scorer.store = store
        return scorer


class TransformerScorer(Scorer):
    """
    BERT-style or XLNet-style encoder with a classification head on the pooled [CLS] row

    Parameters
    ----------
    vocab : Vocab
        Word-piece vocabulary; it fixes the embedding table size
    config : EncoderConfig
        Encoder shapes
    variant : {'bert', 'xlnet'}
        Encoder flavor
    k : int
        Number of score classes
    seed: int (optional)
        Random seed of the initialization (disabled by default)
    layer_limit : int (optional)
        Use only the first ``layer_limit`` encoder layers
    carry_memory : bool
        Score the windows of one essay in order, each reading the memory of
        the previous ones (XLNet variant only)

    Examples
    --------
    >>> vocab = Vocab(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b"])
    >>> config = EncoderConfig(hidden=8, heads=2, n_layers=2, ffn_dim=8, max_len=6)
    >>> scorer = TransformerScorer(vocab, config, "xlnet", k=3, seed=0)
    >>> [unit.true_length for unit in scorer.essay_units("a b a b a b")]
    [6, 6]
    >>> scorer.window_probabilities("a b").shape
    (1, 3)
    >>> scorer.param_groups()["head"]
    ['pooler.weight', 'pooler.bias', 'classifier.weight', 'classifier.bias']
    """

    def __init__(
        self,
        vocab: Vocab,
        config: EncoderConfig,
        variant: str,
        k: int,
        seed: Optional[int] = None,
        layer_limit: Optional[int] = None,
        carry_memory: bool = False,
        **kwargs
    ):
        super().__init__(k, **kwargs)
        if variant not in ["bert", "xlnet"]:
            raise ValueError("Choose 'variant' from values ['bert', 'xlnet']!")
        if layer_limit is not None and not 1 <= layer_limit <= config.n_layers:
            raise ValueError(
                "layer_limit must be in [1, %i], got %i!" % (config.n_layers, layer_limit)
            )
        if carry_memory and variant != "xlnet":
            raise ValueError("Only the xlnet variant carries memory across windows!")
        self.variant = variant
        self.vocab = vocab
        self.config = replace(config, vocab_size=len(vocab))
        self.layer_limit = layer_limit
        self.carry_memory = carry_memory
        self.encoder = TransformerEncoder(self.config, variant, seed)
        self.store = self.encoder.store
        rng = np.random.default_rng(None if seed is None else seed + 1)
        self.store.add(
            "classifier.weight", normal_init(rng, (k, self.config.hidden), self.config.init_std)
        )
        self.store.add("classifier.bias", np.zeros(k))

    @property
    def n_layers(self) -> int:
        return self.config.n_layers if self.layer_limit is None else self.layer_limit

    def essay_units(self, text: str) -> list:
        ids = self.vocab.tokenize(self.preprocess(text))
        placement = self.encoder.cls_placement
        if len(ids) == 0:
            return [wrap_ids([], self.vocab, self.config.max_len, placement)]
        return [
            wrap_ids(ids[start:end], self.vocab, self.config.max_len, placement)
            for start, end in sliding_windows(len(ids), self.config.max_len - 2)
        ]

    def _stack(self, units) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        # real tokens are a prefix, so trailing padding columns can go
        width = max(unit.true_length for unit in units)
        ids = np.stack([unit.ids[:width] for unit in units])
        keep = np.stack([unit.attention_keep[:width] for unit in units])
        segments = np.stack([unit.segment_ids[:width] for unit in units])
        return ids, keep, segments

    def batch_logits(self, units, mode="eval", rng=None) -> Tensor:
        ids, keep, segments = self._stack(units)
        _, pooled, _ = self.encoder.encode(
            ids, segments, keep, mode=mode, rng=rng, layer_limit=self.layer_limit
        )
        return classification_head(pooled, self.k, self.store)

    def window_probabilities(self, text: str) -> np.ndarray:
        if not self.carry_memory:
            return super().window_probabilities(text)
        memory = self.encoder.new_memory(1)
        rows = []
        for unit in self.essay_units(text):
            ids, keep, segments = self._stack([unit])
            _, pooled, memory = self.encoder.encode(
                ids, segments, keep, memory=memory, layer_limit=self.layer_limit
            )
            rows.append(softmax(classification_head(pooled, self.k, self.store)).data[0])
        return np.array(rows)

    def param_groups(self) -> Dict[str, List[str]]:
        groups = OrderedDict()
        for name, names in self.encoder.param_groups().items():
            if name.startswith("layer.") and int(name.split(".")[1]) >= self.n_layers:
                continue
            groups[name] = names
        groups["head"] = groups["head"] + ["classifier.weight", "classifier.bias"]
        return groups

    def pretrain_units(self, units: list) -> list:
        """Windows long enough for the variant's language-model objective"""
        # [CLS] and [SEP] plus at least one maskable token, or 6 tokens to permute
        shortest = 3 if self.variant == "bert" else 6
        return [unit for unit in units if unit.true_length >= shortest]

    def pretrain_loss(
        self, unit, rng: np.random._generator.Generator, rate: float = 0.15
    ) -> Tensor:
        width = unit.true_length
        if self.variant == "xlnet":
            return self.encoder.plm_loss(unit.ids[:width], rng)
        masked, positions, targets = mask_for_mlm(unit, self.vocab, rate, rng)
        return self.encoder.mlm_loss(
            masked[None, :width],
            unit.attention_keep[None, :width],
            [positions],
            [targets],
            rng=rng,
        )

    def to_config(self) -> dict:
        config = super().to_config()
        config.update(
            vocab=self.vocab.pieces,
            encoder=self.config.to_dict(),
            layer_limit=self.layer_limit,
            carry_memory=self.carry_memory,
        )
        return config

    @classmethod
    def from_checkpoint(cls, store: ParamStore, config: dict) -> "TransformerScorer":
        scorer = cls(
            Vocab(config["vocab"]),
            EncoderConfig(**config["encoder"]),
            config["variant"],
            config["k"],
            layer_limit=config["layer_limit"],
            carry_memory=config["carry_memory"],
            **_common_kwargs(config)
        )
        scorer.encoder.store = store
        scorer.store = store
        return scorer


def load_scorer(path: str) -> Scorer:
    """
    Rebuild a trained scorer from a checkpoint written by :meth:`Scorer.save`

    Examples
    --------
    >>> import os, tempfile
    >>> vocab = Vocab(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b"])
    >>> scorer = LstmScorer(vocab, LstmConfig(embed_dim=4, hidden=4), k=2, seed=0)
    >>> path = os.path.join(tempfile.mkdtemp(), "checkpoint.aesf")
    >>> scorer.save(path)
    >>> restored = load_scorer(path)
    >>> bool(np.array_equal(restored.window_probabilities("a b"), scorer.window_probabilities("a b")))
    True
    """
    store, config = ParamStore.load(path)
    variant = config.get("variant")
    if variant == "bow":
        scorer = BowScorer.from_checkpoint(store, config)
    elif variant == "lstm":
        scorer = LstmScorer.from_checkpoint(store, config)
    elif variant in ["bert", "xlnet"]:
        scorer = TransformerScorer.from_checkpoint(store, config)
    else:
        raise ValueError("Checkpoint %s holds an unknown scorer variant %r!" % (path, variant))
    logger.info("Loaded %r from %s", scorer, path)
    return scorer
