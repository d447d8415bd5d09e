import pytest
import numpy as np
from collections import OrderedDict
from hypothesis import given, strategies as st

from aesf.data import separable_toy_set
from aesf.lstm import LstmConfig
from aesf.numeric_core import Tensor, add
from aesf.scorers import BowScorer, LstmScorer, Scorer, TransformerScorer
from aesf.tokenizer import SPECIAL_TOKENS, Vocab, build_vocab
from aesf.training import (
    EnsembleSpec,
    TrainPlan,
    combine_labels,
    combine_window_labels,
    discriminative_lrs,
    dev_qwk,
    ensemble_predict,
    finetune,
    gradual_unfreeze,
    group_lrs,
    predict_essay,
    pretrain,
    resolve_lr,
    sliding_windows,
)
from aesf.transformer import EncoderConfig

SEED = 43


class ConstantScorer(Scorer):
    """Predicts the same class for every essay from a trainable bias"""

    variant = "constant"

    def __init__(self, k):
        super().__init__(k)
        self.store.add("classifier.bias", np.zeros(k))

    def essay_units(self, text):
        return [np.zeros(1)]

    def batch_logits(self, units, mode="eval", rng=None):
        return add(Tensor(np.zeros((len(units), self.k))), self.store["classifier.bias"])


class FixedScorer:
    def __init__(self, labels, k=4):
        self.labels = np.asarray(labels)
        self.k = k

    def predict(self, texts):
        return self.labels[: len(texts)]


class WindowScorer:
    def __init__(self, proba):
        self.proba = np.asarray(proba)

    def window_probabilities(self, text):
        return self.proba


def test_resolve_lr():
    assert resolve_lr("desk") == 1e-3
    assert resolve_lr("base-1e-5") == 1e-5
    assert resolve_lr(0.5) == 0.5
    with pytest.raises(ValueError):
        resolve_lr("fast")


def test_invalid_train_plan():
    with pytest.raises(ValueError):
        TrainPlan(epochs=0)
    with pytest.raises(ValueError):
        TrainPlan(xi=0.0)
    with pytest.raises(ValueError):
        TrainPlan(unfreeze="all")
    with pytest.raises(ValueError):
        TrainPlan(target="rater2")
    with pytest.raises(ValueError):
        TrainPlan(window_mode="max")
    with pytest.raises(ValueError):
        TrainPlan(layer_limit=0)


def test_train_plan_replace_keeps_original():
    plan = TrainPlan(seed=SEED)
    changed = plan.replace(unfreeze="gradual")
    assert plan.unfreeze == "off"
    assert changed.unfreeze == "gradual" and changed.seed == SEED


def test_discriminative_lrs_are_geometric():
    lrs = np.array(discriminative_lrs(1e-5, 0.95, 12))
    assert lrs[-1] == 1e-5
    assert np.allclose(lrs[:-1] / lrs[1:], 0.95)
    assert discriminative_lrs(0.1, 1.0, 3) == [0.1, 0.1, 0.1]
    with pytest.raises(ValueError):
        discriminative_lrs(0.1, 1.5, 3)


def test_gradual_unfreeze_schedule():
    assert gradual_unfreeze(1, 2) == {"head"}
    assert gradual_unfreeze(2, 2) == {"head", "layer.1"}
    assert gradual_unfreeze(3, 2) == {"head", "layer.1", "layer.0"}
    assert gradual_unfreeze(4, 2) == {"head", "layer.1", "layer.0", "embeddings"}
    assert gradual_unfreeze(2, 0) == {"head", "embeddings"}
    with pytest.raises(ValueError):
        gradual_unfreeze(0, 2)


def test_group_lrs():
    groups = OrderedDict(
        [("embeddings", ["e"]), ("layer.0", ["a"]), ("layer.1", ["b"]), ("head", ["h"])]
    )
    fixed = group_lrs(groups, TrainPlan(base_lr=1.0))
    assert fixed == {"e": 1.0, "a": 1.0, "b": 1.0, "h": 1.0}
    discriminative = group_lrs(groups, TrainPlan(base_lr=1.0, lr_variant="discriminative", xi=0.5))
    assert discriminative == {"e": 0.5, "a": 0.5, "b": 1.0, "h": 1.0}


def test_sliding_windows():
    assert sliding_windows(1) == [(0, 1)]
    assert sliding_windows(510) == [(0, 510)]
    assert sliding_windows(511) == [(0, 510), (1, 511)]
    assert sliding_windows(1020) == [(0, 510), (510, 1020)]
    assert sliding_windows(7, 4) == [(0, 4), (3, 7)]
    with pytest.raises(ValueError):
        sliding_windows(0)


@given(st.integers(1, 3000), st.integers(1, 600))
def test_sliding_windows_cover_every_token(token_count, window):
    windows = sliding_windows(token_count, window)
    assert windows[0][0] == 0 and windows[-1][1] == token_count
    for (start, end), (next_start, _) in zip(windows, windows[1:]):
        assert end - start == window
        assert start < next_start <= end
    assert windows[-1][1] - windows[-1][0] == min(window, token_count)


def test_combine_window_labels_rounds_half_away():
    assert combine_window_labels([0, 1], 5) == 1
    assert combine_window_labels([1, 2, 2, 2], 5) == 2
    assert combine_window_labels([4], 5) == 4
    with pytest.raises(ValueError):
        combine_window_labels([], 5)


def test_predict_essay_window_modes():
    scorer = WindowScorer([[0.9, 0.1, 0.0], [0.0, 0.45, 0.55]])
    assert predict_essay(scorer, "text") == 1
    assert predict_essay(scorer, "text", "proba-mean") == 0
    with pytest.raises(ValueError):
        predict_essay(scorer, "text", "vote")


def test_dev_qwk_is_nan_when_undefined():
    assert np.isnan(dev_qwk([1, 1, 1], [1, 1, 1], 3))
    assert dev_qwk([0, 1, 2], [0, 1, 2], 3) == 1.0


def test_finetune_keeps_best_dev_epoch():
    texts, labels = separable_toy_set(num_essays=24, num_classes=3, seed=SEED)
    scorer = BowScorer.build(texts, k=3, cutoff=0.9, seed=SEED)
    plan = TrainPlan(epochs=6, base_lr=0.05, batch_size=4, seed=SEED)
    result = finetune(scorer, texts, labels, texts, labels, plan)
    assert result.history["epoch"].tolist() == [1, 2, 3, 4, 5, 6]
    assert list(result.history.columns) == ["epoch", "loss", "train_accuracy", "dev_qwk"]
    assert result.best_qwk == np.nanmax(result.history["dev_qwk"].values)
    assert result.history["dev_qwk"].iloc[result.best_epoch - 1] == result.best_qwk
    for name in scorer.store.names:
        assert np.array_equal(scorer.store[name].data, result.snapshot[name])


def test_finetune_without_dev_keeps_last_epoch():
    texts, labels = separable_toy_set(num_essays=12, num_classes=2, seed=SEED)
    scorer = BowScorer.build(texts, k=2, cutoff=0.9, seed=SEED)
    result = finetune(scorer, texts, labels, plan=TrainPlan(epochs=3, seed=SEED))
    assert result.best_epoch == 3
    assert np.isnan(result.best_qwk)
    assert result.history["dev_qwk"].isna().all()


def test_finetune_with_undefined_dev_agreement():
    scorer = ConstantScorer(2)
    texts = ["one", "two", "three", "four"]
    result = finetune(scorer, texts, [0, 0, 0, 0], texts, [0, 0, 0, 0], TrainPlan(epochs=3, seed=SEED))
    assert result.history["dev_qwk"].isna().all()
    assert result.best_epoch == 3
    assert np.isnan(result.best_qwk)
    assert scorer.predict(texts).tolist() == [0, 0, 0, 0]


def test_finetune_empty_training_set():
    with pytest.raises(ValueError):
        finetune(ConstantScorer(2), [], [])


def test_gradual_unfreeze_trains_only_the_head_first():
    texts, labels = separable_toy_set(num_essays=8, num_classes=2, seed=SEED)
    vocab = build_vocab(texts, 100)
    scorer = LstmScorer(vocab, LstmConfig(embed_dim=4, hidden=4), k=2, max_len=16, seed=SEED)
    before = scorer.store.snapshot()
    plan = TrainPlan(epochs=1, unfreeze="gradual", seed=SEED)
    finetune(scorer, texts, labels, plan=plan)
    groups = scorer.param_groups()
    for group, names in groups.items():
        for name in names:
            moved = not np.array_equal(before[name], scorer.store[name].data)
            assert moved == (group == "head"), name
    fixed = [name for name in scorer.store.names if scorer.store.entry(name).fixed]
    assert sorted(scorer.store.trainable_names + fixed) == sorted(scorer.store.names)


def test_pretrain_runs_language_model_steps():
    texts, _ = separable_toy_set(num_essays=6, num_classes=2, seed=SEED)
    vocab = build_vocab(texts, 100)
    config = EncoderConfig(hidden=8, heads=2, n_layers=1, ffn_dim=8, max_len=16, dropout=0.0)
    plan = TrainPlan(pretrain_steps=3, seed=SEED)
    for variant in ["bert", "xlnet"]:
        scorer = TransformerScorer(vocab, config, variant, k=2, seed=SEED)
        losses = pretrain(scorer, texts, plan)
        assert len(losses) == 3
        assert np.all(np.isfinite(losses))
    assert pretrain(scorer, texts, TrainPlan()) == []


def test_pretrain_skips_short_windows():
    vocab = Vocab(SPECIAL_TOKENS + ["a"])
    config = EncoderConfig(hidden=8, heads=2, n_layers=1, ffn_dim=8, max_len=16)
    scorer = TransformerScorer(vocab, config, "xlnet", k=2, seed=SEED)
    assert pretrain(scorer, ["a", "a a"], TrainPlan(pretrain_steps=2)) == []


def test_combine_labels():
    assert combine_labels([1, 2]) == 2
    assert combine_labels([0, 0, 1]) == 0
    assert combine_labels([1, 1, 3], "majority") == 1
    # tie between 1 and 3 goes to the best member
    assert combine_labels([1, 3, 1, 3], "majority", best=1) == 3
    # the best member votes for neither tied label
    assert combine_labels([1, 3, 1, 3, 0], "majority", best=4) == 1
    assert combine_labels([3, 1, 1, 3, 0], "majority", best=4) == 3
    with pytest.raises(ValueError):
        combine_labels([1], "median")


def test_ensemble_spec_validation():
    members = [FixedScorer([0]), FixedScorer([1])]
    with pytest.raises(ValueError):
        EnsembleSpec(members[:1])
    with pytest.raises(ValueError):
        EnsembleSpec(members, mode="vote")
    with pytest.raises(ValueError):
        EnsembleSpec(members, best=2)


def test_ensemble_predict():
    members = [FixedScorer([0, 2, 3]), FixedScorer([1, 2, 1]), FixedScorer([1, 3, 0])]
    texts = ["a", "b", "c"]
    assert ensemble_predict(EnsembleSpec(members), texts).tolist() == [1, 2, 1]
    majority = EnsembleSpec(members, "majority", best=2)
    assert ensemble_predict(majority, texts).tolist() == [1, 2, 0]
    with pytest.raises(ValueError):
        ensemble_predict(EnsembleSpec([FixedScorer([0], k=2), FixedScorer([0], k=3)]), ["a"])
