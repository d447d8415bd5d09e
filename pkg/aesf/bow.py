import logging
import numpy as np
from sklearn.feature_extraction.text import CountVectorizer
from tqdm.auto import tqdm
from typing import Dict, List, Optional, Sequence, Tuple

from .numeric_core import (
    ParamStore,
    Tensor,
    ShapeError,
    adam_step,
    cross_entropy,
    dense,
    normal_init,
)

logger = logging.getLogger(__name__)

# lowercase alphanumeric runs; single letters count as words
WORD_PATTERN = r"[^\W_]+"


def _vectorizer(
    cutoff: float = 1.0, vocabulary: Optional[Dict[str, int]] = None
) -> CountVectorizer:
    return CountVectorizer(
        lowercase=True,
        token_pattern=WORD_PATTERN,
        max_df=float(cutoff),
        vocabulary=vocabulary,
    )


class TfidfModel:
    """
    Fitted bag-of-words weighting: vocabulary, per-word idf and the frequency cutoff

    Use :func:`fit_tfidf` to build one.

    Parameters
    ----------
    vocabulary : Dict[str, int]
        Word to column index, columns in lexicographic word order
    idf : numpy.ndarray
        Inverse document frequency per column, finite and positive
    cutoff : float
        Document-frequency fraction above which words were dropped
    smoothed : bool
        Whether the smoothed idf ln((1+N)/(1+df))+1 was used
    num_docs : int
        Size of the fitting corpus
    """

    def __init__(
        self,
        vocabulary: Dict[str, int],
        idf: np.ndarray,
        cutoff: float,
        smoothed: bool,
        num_docs: int,
    ):
        self.vocabulary = dict(vocabulary)
        self.idf = np.asarray(idf, dtype=np.float64)
        self.cutoff = cutoff
        self.smoothed = smoothed
        self.num_docs = num_docs
        self._counter = _vectorizer(cutoff, self.vocabulary)

    def __repr__(self):
        return "TfidfModel(words=%i, cutoff=%s, smoothed=%s)" % (
            len(self.vocabulary),
            self.cutoff,
            self.smoothed,
        )

    @property
    def num_features(self) -> int:
        return len(self.vocabulary)

    @property
    def words(self) -> List[str]:
        return sorted(self.vocabulary, key=self.vocabulary.get)

    def counts(self, docs: Sequence[str]) -> np.ndarray:
        """Raw counts of the retained words, one row per document"""
        return self._counter.transform(list(docs)).toarray().astype(np.float64)

    def transform(self, docs: Sequence[str]) -> np.ndarray:
        """
        TF-IDF matrix of several documents, one L2-normalized row each

        Examples
        --------
        >>> model = fit_tfidf(["a b a", "a c", "b b b c"], cutoff=1.0)
        >>> np.round(model.transform(["a b a", "zzz"]), 4).tolist()
        [[0.8944, 0.4472, 0.0], [0.0, 0.0, 0.0]]
        """
        counts = self.counts(docs)
        peak = counts.max(axis=1, keepdims=True)
        tf = np.divide(counts, peak, out=np.zeros_like(counts), where=peak > 0)
        weighted = tf * self.idf
        norm = np.linalg.norm(weighted, axis=1, keepdims=True)
        return np.divide(weighted, norm, out=weighted.copy(), where=norm > 0)

    def to_config(self) -> dict:
        return {
            "words": self.words,
            "idf": self.idf.tolist(),
            "cutoff": self.cutoff,
            "smoothed": self.smoothed,
            "num_docs": self.num_docs,
        }

    @classmethod
    def from_config(cls, config: dict) -> "TfidfModel":
        vocabulary = {word: i for i, word in enumerate(config["words"])}
        return cls(
            vocabulary,
            np.asarray(config["idf"]),
            config["cutoff"],
            config["smoothed"],
            config["num_docs"],
        )


def fit_tfidf(docs: Sequence[str], cutoff: float = 0.9) -> TfidfModel:
    """
    Count document frequencies, drop very frequent words and compute idf weights

    Words whose document frequency exceeds ``cutoff·N`` are dropped. The idf
    of a retained word is ln(N/df); if some retained word occurs in every
    document the smoothed form ln((1+N)/(1+df))+1 is used for all words.

    Parameters
    ----------
    docs : Sequence[str]
        Fitting corpus
    cutoff : float
        Document-frequency fraction in (0, 1]

    Examples
    --------
    >>> model = fit_tfidf(["a b a", "a c", "b b b c"], cutoff=1.0)
    >>> model.words
    ['a', 'b', 'c']
    >>> np.allclose(model.idf, np.log(1.5)), model.smoothed
    (True, False)
    >>> fit_tfidf(["one doc"], cutoff=1.0).smoothed
    True
    """
    docs = list(docs)
    if len(docs) == 0:
        raise ValueError("Cannot fit TF-IDF weights on an empty corpus!")
    if not 0.0 < cutoff <= 1.0:
        raise ValueError("cutoff must be in (0, 1], got %s!" % cutoff)
    counter = _vectorizer(cutoff)
    try:
        counts = counter.fit_transform(docs)
    except ValueError as err:
        raise ValueError(
            "Empty vocabulary: no word survives the document-frequency cutoff %s (%s)!"
            % (cutoff, err)
        )
    vocabulary = {word: int(i) for word, i in counter.vocabulary_.items()}
    df = np.asarray((counts > 0).sum(axis=0)).reshape(-1).astype(np.float64)
    n = float(len(docs))
    smoothed = bool(np.any(df == n))
    if smoothed:
        idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    else:
        idf = np.log(n / df)
    logger.info(
        "Fitted TF-IDF on %i documents: %i words, smoothed=%s",
        len(docs),
        len(vocabulary),
        smoothed,
    )
    return TfidfModel(vocabulary, idf, cutoff, smoothed, len(docs))


def vectorize(doc: str, model: TfidfModel) -> np.ndarray:
    """
    TF-IDF vector of one document

    ``tf`` is the count divided by the largest count of a retained word in the
    document. The vector is L2-normalized unless no vocabulary word occurs.

    Examples
    --------
    >>> model = fit_tfidf(["a b a", "a c", "b b b c"], cutoff=1.0)
    >>> np.round(vectorize("a b a", model), 4).tolist()
    [0.8944, 0.4472, 0.0]
    """
    return model.transform([doc])[0]


class BowClassifier:
    """
    Multinomial logistic regression over TF-IDF features

    Parameters
    ----------
    num_features : int
        Input dimension
    k : int
        Number of classes
    seed: int (optional)
        Random seed of the weight initialization (disabled by default)
    """

    def __init__(self, num_features: int, k: int, seed: Optional[int] = None):
        if k < 2:
            raise ValueError("A classifier needs at least 2 classes, got %i!" % k)
        rng = np.random.default_rng(seed)
        self.num_features = num_features
        self.k = k
        self.store = ParamStore()
        self.store.add("bow.weight", normal_init(rng, (k, num_features), std=0.01))
        self.store.add("bow.bias", np.zeros(k))

    def __repr__(self):
        return "BowClassifier(features=%i, k=%i)" % (self.num_features, self.k)

    def logits(self, X) -> Tensor:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise ShapeError(
                "Expected features of shape (N, %i), got %s!"
                % (self.num_features, X.shape)
            )
        return dense(Tensor(X), self.store["bow.weight"], self.store["bow.bias"])

    def predict_proba(self, X) -> np.ndarray:
        logits = self.logits(X).data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X).data, axis=1)


def train_bow_classifier(
    X,
    labels: Sequence[int],
    k: int,
    epochs: int = 100,
    lr: float = 0.1,
    rng: Optional[np.random._generator.Generator] = None,
    batch_size: Optional[int] = None,
    verbose: bool = False,
) -> Tuple[BowClassifier, List[float]]:
    """
    Fit a :class:`BowClassifier` with Adam on softmax cross-entropy

    Parameters
    ----------
    X : array_like
        Feature matrix of shape (N, V)
    labels : Sequence[int]
        Class labels in [0, k)
    k : int
        Number of classes
    epochs : int
        Passes over the data
    lr : float
        Adam learning rate
    rng : numpy.random.Generator (optional)
        Random generator for initialization and shuffling
    batch_size : int (optional)
        Mini-batch size, full batch by default
    verbose : bool
        Show a progress bar

    Returns
    -------
    (classifier, losses)
        The trained classifier and the mean loss of every epoch

    Examples
    --------
    >>> X = np.eye(2)[[0, 1, 0, 1]]
    >>> clf, losses = train_bow_classifier(X, [0, 1, 0, 1], k=2, epochs=50, rng=np.random.default_rng(0))
    >>> clf.predict(X).tolist(), losses[-1] < losses[0]
    ([0, 1, 0, 1], True)
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or labels.shape != (X.shape[0],):
        raise ShapeError(
            "Features %s and labels %s do not conform!" % (X.shape, labels.shape)
        )
    if X.shape[0] == 0:
        raise ValueError("Cannot train on an empty set!")
    rng = rng if rng is not None else np.random.default_rng()
    classifier = BowClassifier(X.shape[1], k, seed=int(rng.integers(2**31)))
    batch_size = batch_size or X.shape[0]
    losses = []
    for _ in tqdm(range(epochs), disable=not verbose):
        order = rng.permutation(X.shape[0])
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            loss = cross_entropy(classifier.logits(X[batch]), labels[batch])
            adam_step(classifier.store, classifier.store.gradients(loss), lr)
            epoch_loss += loss.item() * len(batch)
        losses.append(epoch_loss / len(order))
    if losses:
        logger.info("Trained bag-of-words classifier, final loss %.4f", losses[-1])
    return classifier, losses
