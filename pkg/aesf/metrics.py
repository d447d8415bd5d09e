import numpy as np
import pandas as pd
from typing import Iterable, List, Optional, Sequence

QWK_VARIANTS = ["standard", "paper-literal"]


class UndefinedKappaError(ValueError):
    """Kappa has a zero denominator for the given confusion matrix"""


class ConfusionMatrix:
    """
    Agreement table between two raters over ``k`` score classes

    ``counts[i][j]`` is the number of essays rater A scored ``i`` and rater B
    scored ``j``.

    Parameters
    ----------
    counts : array_like
        Square table of nonnegative integers

    Examples
    --------
    >>> m = ConfusionMatrix([[2, 1], [1, 2]])
    >>> m.k, m.total
    (2, 6)
    >>> m.row_marginals
    array([0.5, 0.5])
    """

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(
                "Confusion matrix must be square, got shape %s!" % (counts.shape,)
            )
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ValueError("Confusion matrix counts must be nonnegative integers!")
        self.counts = counts.astype(np.int64)

    def __repr__(self):
        return "ConfusionMatrix(k=%i, total=%i)" % (self.k, self.total)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def proportions(self) -> np.ndarray:
        if self.total == 0:
            raise ValueError("Confusion matrix is empty!")
        return self.counts / self.total

    @property
    def row_marginals(self) -> np.ndarray:
        return self.proportions.sum(axis=1)

    @property
    def col_marginals(self) -> np.ndarray:
        return self.proportions.sum(axis=0)

    def transpose(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts.T)


def confusion(a: Sequence[int], b: Sequence[int], k: int) -> ConfusionMatrix:
    """
    Tabulate paired scores (already mapped to labels 0..k-1)

    Examples
    --------
    >>> confusion([0, 0, 1, 1, 0, 1], [0, 1, 1, 0, 0, 1], 2).counts
    array([[2, 1],
           [1, 2]])
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(
            "Score sequences must have equal length, got %i and %i!" % (a.size, b.size)
        )
    if a.size == 0:
        raise ValueError("Score sequences are empty!")
    for seq in [a, b]:
        if np.any(seq != np.round(seq)) or seq.min() < 0 or seq.max() >= k:
            raise ValueError("Scores must be integers in [0, %i)!" % k)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (a.astype(np.int64), b.astype(np.int64)), 1)
    return ConfusionMatrix(counts)


def exact_agreement(m: ConfusionMatrix) -> float:
    """Fraction of essays on which the two raters agree exactly"""
    return float(np.trace(m.proportions))


def cohen_kappa(m: ConfusionMatrix) -> float:
    """
    Chance-corrected exact agreement (p_o - p_e) / (1 - p_e)

    Examples
    --------
    >>> round(cohen_kappa(ConfusionMatrix([[2, 1], [1, 2]])), 12)
    0.333333333333
    """
    p_o = exact_agreement(m)
    p_e = float(np.dot(m.row_marginals, m.col_marginals))
    if p_e >= 1.0:
        raise UndefinedKappaError(
            "Kappa is undefined: both raters use a single identical class!"
        )
    return (p_o - p_e) / (1.0 - p_e)


def quadratic_weights(k: int) -> np.ndarray:
    """Disagreement weights (i-j)²/(k-1)²"""
    i, j = np.indices((k, k))
    return (i - j) ** 2 / float((k - 1) ** 2)


def qwk(m: ConfusionMatrix, variant: str = "standard") -> float:
    """
    Quadratic weighted kappa

    Parameters
    ----------
    m : ConfusionMatrix
        Agreement table with at least two classes
    variant : {'standard', 'paper-literal'}, default 'standard'
        * standard: 1 - Σ w·O / Σ w·E with disagreement weights w = (i-j)²/(k-1)²,
          observed proportions O and expected proportions E (outer product of
          the marginals).
        * paper-literal: NONSTANDARD study variant 1 - Σ w'·x / Σ m·x with
          agreement weights w' = 1 - (i-j)²/(k-1)² and m = x(1-x). It does not
          equal 1 under complete agreement.

    Examples
    --------
    >>> qwk(ConfusionMatrix(np.diag([3, 1, 2])))
    1.0
    >>> round(qwk(ConfusionMatrix([[2, 1], [1, 2]])), 12)
    0.333333333333
    """
    if variant not in QWK_VARIANTS:
        raise ValueError("Choose 'variant' from values %s!" % QWK_VARIANTS)
    if m.k < 2:
        raise ValueError("Quadratic weighted kappa needs at least 2 classes!")
    x = m.proportions
    if variant == "standard":
        w = quadratic_weights(m.k)
        observed = float(np.sum(w * x))
        expected = float(np.sum(w * np.outer(x.sum(axis=1), x.sum(axis=0))))
        if expected <= 0.0:
            raise UndefinedKappaError(
                "Quadratic weighted kappa is undefined: zero expected disagreement!"
            )
        return 1.0 - observed / expected
    agreement = 1.0 - quadratic_weights(m.k)
    denominator = float(np.sum(x * (1.0 - x) * x))
    if denominator <= 0.0:
        raise UndefinedKappaError(
            "Literal weighted kappa is undefined: zero denominator!"
        )
    return 1.0 - float(np.sum(agreement * x)) / denominator


def compare_engine_to_human(
    initial: Sequence[int],
    reliability: Sequence[int],
    predicted: Sequence[int],
    k: int,
    variant: str = "standard",
) -> dict:
    """
    Engine-vs-human agreement, both measured against the initial human scores

    Parameters
    ----------
    initial : Sequence[int]
        Labels of the first human rater
    reliability : Sequence[int]
        Labels of the second human rater
    predicted : Sequence[int]
        Labels predicted by the engine
    k : int
        Number of score classes
    variant : {'standard', 'paper-literal'}, default 'standard'
        Kappa variant, see :func:`qwk`

    Examples
    --------
    >>> report = compare_engine_to_human([0, 1, 2, 1], [0, 1, 1, 1], [0, 1, 2, 1], k=3)
    >>> report["qwk_engine"], report["engine_ge_human"]
    (1.0, True)
    """
    engine = confusion(predicted, initial, k)
    human = confusion(reliability, initial, k)
    qwk_engine = qwk(engine, variant)
    qwk_human = qwk(human, variant)
    return {
        "n": engine.total,
        "qwk_engine": qwk_engine,
        "qwk_human": qwk_human,
        "acc_engine": exact_agreement(engine),
        "acc_human": exact_agreement(human),
        "engine_ge_human": bool(qwk_engine >= qwk_human),
    }


def agreement_report(rows: Iterable[dict]) -> pd.DataFrame:
    """
    Per-item agreement table with the columns item, n, qwk_engine, qwk_human, acc_engine, acc_human

    Parameters
    ----------
    rows : Iterable[dict]
        Reports of :func:`compare_engine_to_human`, each extended with an ``item`` key
    """
    columns = ["item", "n", "qwk_engine", "qwk_human", "acc_engine", "acc_human"]
    return pd.DataFrame(list(rows))[columns]
