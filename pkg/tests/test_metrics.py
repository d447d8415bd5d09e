import pytest
import numpy as np
from hypothesis import given, settings, strategies as st
from sklearn.metrics import cohen_kappa_score

from aesf.metrics import (
    ConfusionMatrix,
    UndefinedKappaError,
    agreement_report,
    cohen_kappa,
    compare_engine_to_human,
    confusion,
    exact_agreement,
    qwk,
)

SEED = 43


def random_ratings(rng, n, k):
    a = rng.integers(0, k, size=n)
    noise = rng.integers(-1, 2, size=n)
    return a, np.clip(a + noise, 0, k - 1)


def test_qwk_matches_sklearn():
    rng = np.random.default_rng(SEED)
    for k in [2, 3, 4, 6, 12]:
        a, b = random_ratings(rng, 200, k)
        expected = cohen_kappa_score(a, b, weights="quadratic", labels=list(range(k)))
        assert abs(qwk(confusion(a, b, k)) - expected) < 1e-9


def test_cohen_kappa_matches_sklearn():
    rng = np.random.default_rng(SEED)
    a, b = random_ratings(rng, 150, 5)
    expected = cohen_kappa_score(a, b, labels=list(range(5)))
    assert abs(cohen_kappa(confusion(a, b, 5)) - expected) < 1e-9


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.lists(st.integers(0, 20), min_size=4, max_size=4), min_size=4, max_size=4)
)
def test_qwk_is_symmetric_and_bounded(rows):
    m = ConfusionMatrix(rows)
    try:
        value = qwk(m)
    except (UndefinedKappaError, ValueError):
        return
    assert abs(value - qwk(m.transpose())) < 1e-9
    assert -1.0 - 1e-9 <= value <= 1.0 + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=2, max_size=6))
def test_qwk_of_complete_agreement(diagonal):
    assert abs(qwk(ConfusionMatrix(np.diag(diagonal))) - 1.0) < 1e-12


def test_qwk_undefined_for_single_shared_class():
    m = confusion([1, 1, 1], [1, 1, 1], 3)
    with pytest.raises(UndefinedKappaError):
        qwk(m)
    with pytest.raises(UndefinedKappaError):
        cohen_kappa(m)


def test_undefined_kappa_is_value_error():
    assert issubclass(UndefinedKappaError, ValueError)


def test_qwk_needs_two_classes():
    with pytest.raises(ValueError):
        qwk(ConfusionMatrix([[5]]))


def test_qwk_invalid_variant():
    with pytest.raises(ValueError):
        qwk(ConfusionMatrix(np.eye(2, dtype=int)), variant="linear")


def test_literal_variant_is_not_one_under_agreement():
    value = qwk(ConfusionMatrix(np.diag([2, 2])), variant="paper-literal")
    # proportions 0.5 on the diagonal: 1 - 1.0 / 0.25
    assert abs(value - (-3.0)) < 1e-12


def test_confusion_rejects_out_of_range():
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1], 3)


def test_confusion_rejects_length_mismatch():
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 2)


def test_confusion_rejects_empty():
    with pytest.raises(ValueError):
        confusion([], [], 2)


def test_confusion_matrix_validation():
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, 2, 3]])
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, -1], [0, 1]])


def test_exact_agreement():
    assert exact_agreement(confusion([0, 1, 2, 2], [0, 1, 1, 2], 3)) == 0.75


def test_engine_to_human_comparison():
    initial = [0, 1, 2, 3, 3, 2]
    reliability = [0, 1, 1, 3, 2, 2]
    report = compare_engine_to_human(initial, reliability, initial, k=4)
    assert report["n"] == 6
    assert report["qwk_engine"] == 1.0
    assert report["acc_engine"] == pytest.approx(1.0)
    assert report["acc_human"] == pytest.approx(4 / 6)
    assert report["engine_ge_human"]


def test_agreement_report_columns():
    rows = []
    for item in [1, 2]:
        row = compare_engine_to_human([0, 1, 2], [0, 1, 1], [0, 2, 2], k=3)
        row["item"] = item
        rows.append(row)
    report = agreement_report(rows)
    assert list(report.columns) == ["item", "n", "qwk_engine", "qwk_human", "acc_engine", "acc_human"]
    assert report["item"].tolist() == [1, 2]
