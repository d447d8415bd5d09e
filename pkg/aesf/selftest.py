import logging
import time
import numpy as np
import pandas as pd
from collections import OrderedDict
from typing import Optional, Sequence

from .bow import fit_tfidf, vectorize
from .corpus import select_item, to_labels, kfold_splits
from .data import SyntheticEssayCorpus, separable_toy_set
from .experiments import ModelSettings, run_kfold
from .lstm import LstmConfig, LstmClassifier, LstmState, lstm_bptt, lstm_cell
from .metrics import UndefinedKappaError, cohen_kappa, confusion, qwk
from .numeric_core import (
    ParamStore,
    Tensor,
    adam_step,
    cross_entropy,
    dense,
    exp,
    feature_norm,
    gelu,
    grad_check,
    log,
    sigmoid,
    softmax,
    take_rows,
    tanh,
)
from .scorers import LstmScorer, TransformerScorer
from .tokenizer import build_vocab
from .training import (
    EnsembleSpec,
    TrainPlan,
    classification_head,
    combine_window_labels,
    dev_qwk,
    discriminative_lrs,
    ensemble_predict,
    finetune,
    sliding_windows,
)
from .transformer import (
    AttnMask,
    EncoderConfig,
    TransformerEncoder,
    perm_mask,
    rel_shift,
    self_attention,
    two_stream_forward,
)

logger = logging.getLogger(__name__)

# encoder of the gradient and contract checks
CHECK_CONFIG = dict(hidden=32, heads=4, n_layers=2, ffn_dim=64, vocab_size=30, max_len=12, mem_len=4, dropout=0.0)


def brute_force_qwk(counts: np.ndarray) -> float:
    """Quadratic weighted kappa by explicit loops over the definition"""
    k = counts.shape[0]
    n = counts.sum()
    rows = [sum(counts[i, j] for j in range(k)) for i in range(k)]
    cols = [sum(counts[i, j] for i in range(k)) for j in range(k)]
    observed, expected = 0.0, 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / (k - 1) ** 2
            observed += w * counts[i, j] / n
            expected += w * rows[i] * cols[j] / n**2
    return 1.0 - observed / expected


def brute_force_kappa(counts: np.ndarray) -> float:
    k = counts.shape[0]
    n = counts.sum()
    p_o = sum(counts[i, i] for i in range(k)) / n
    p_e = sum(counts[i, :].sum() * counts[:, i].sum() for i in range(k)) / n**2
    return (p_o - p_e) / (1.0 - p_e)


def check_metrics(seed: Optional[int] = None, num_matrices: int = 1000) -> dict:
    rng = np.random.default_rng(seed)
    max_diff, checked = 0.0, 0
    for _ in range(num_matrices):
        k = int(rng.integers(2, 7))
        counts = rng.integers(0, 20, size=(k, k))
        m = confusion(*_pairs(counts), k)
        try:
            value, kappa = qwk(m), cohen_kappa(m)
        except UndefinedKappaError:
            continue
        max_diff = max(
            max_diff,
            abs(value - brute_force_qwk(counts)),
            abs(kappa - brute_force_kappa(counts)),
        )
        if k == 2:
            max_diff = max(max_diff, abs(value - kappa))
        checked += 1
    identity = qwk(confusion(np.arange(5), np.arange(5), 5))
    return {
        "passed": max_diff <= 1e-12 and identity == 1.0,
        "detail": "%i matrices, max difference %.2e, identity %s" % (checked, max_diff, identity),
    }


def _pairs(counts: np.ndarray):
    a, b = [], []
    for i, j in np.ndindex(*counts.shape):
        a += [i] * int(counts[i, j])
        b += [j] * int(counts[i, j])
    return a, b


def _bert_check_loss(encoder: TransformerEncoder, ids, keep, labels, mlm_rows, mlm_ids):
    def f(store: ParamStore) -> Tensor:
        H, pooled, _ = encoder.encode(ids, keep=keep)
        logits = classification_head(pooled, 3, store)
        flat = H.reshape(-1, encoder.config.hidden)
        lm = dense(flat[mlm_rows], store["embeddings.word"], store["lm.bias"])
        return cross_entropy(logits, labels) + cross_entropy(lm, mlm_ids)

    return f


def _xlnet_check_loss(encoder: TransformerEncoder, ids, keep, labels, previous):
    def f(store: ParamStore) -> Tensor:
        memory = encoder.new_memory(ids.shape[0])
        _, _, memory = encoder.encode(previous, keep=np.ones_like(previous), memory=memory)
        _, pooled, _ = encoder.encode(ids, keep=keep, memory=memory)
        return cross_entropy(classification_head(pooled, 3, store), labels)

    return f


def check_gradients(seed: Optional[int] = None, max_coords: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    reports = OrderedDict()
    store = ParamStore()
    store.add("x", rng.normal(size=(3, 4)))
    store.add("y", rng.uniform(0.5, 2.0, size=(3, 4)))
    store.add("w", rng.normal(size=(5, 4)))
    store.add("b", rng.normal(size=5))
    store.add("gamma", rng.normal(size=4))
    store.add("beta", rng.normal(size=4))
    ops = OrderedDict(
        arithmetic=lambda s: ((s["x"] + s["y"]) * s["x"] / s["y"] - s["y"]).sum(),
        transcendental=lambda s: (exp(s["x"] * 0.5) + log(s["y"]) + tanh(s["x"]) + sigmoid(s["x"])).sum()
        + (softmax(s["x"]) * s["y"]).sum(),
        gelu=lambda s: gelu(s["x"]).sum(),
        dense_tanh=lambda s: dense(s["x"], s["w"], s["b"], "tanh").sum(),
        dense_sigmoid=lambda s: dense(s["x"], s["w"], s["b"], "sigmoid").sum(),
        feature_norm=lambda s: (feature_norm(s["x"], s["gamma"], s["beta"]) * s["y"]).sum(),
        cross_entropy=lambda s: cross_entropy(dense(s["x"], s["w"], s["b"]), [0, 3, 4]),
        take_rows=lambda s: (take_rows(s["w"], [[0, 2], [2, 4]]) * 2.0).sum(),
    )
    for name, f in ops.items():
        reports[name] = grad_check(f, store, tol=1e-4)
    for variant in ["bert", "xlnet"]:
        config = EncoderConfig(**CHECK_CONFIG)
        encoder = TransformerEncoder(config, variant, seed=seed)
        encoder.store.add("classifier.weight", rng.normal(0.0, 0.1, size=(3, config.hidden)))
        encoder.store.add("classifier.bias", np.zeros(3))
        ids = rng.integers(5, config.vocab_size, size=(2, 6))
        keep = np.array([[1] * 6, [1] * 4 + [0] * 2])
        labels = [0, 2]
        if variant == "bert":
            f = _bert_check_loss(encoder, ids, keep, labels, [1, 3, 7], ids.reshape(-1)[[1, 3, 7]])
        else:
            previous = rng.integers(5, config.vocab_size, size=(2, 4))
            f = _xlnet_check_loss(encoder, ids, keep, labels, previous)
        reports[variant] = grad_check(f, encoder.store, tol=1e-4, max_coords=max_coords, rng=rng)
    worst = max(r["max_rel_error"] for r in reports.values())
    failed = [name for name, r in reports.items() if not r["passed"]]
    return {
        "passed": len(failed) == 0,
        "detail": "max relative error %.2e%s" % (worst, ", failed: %s" % failed if failed else ""),
    }


def check_attention(seed: Optional[int] = None, num_essays: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    Q, K, V = [Tensor(rng.normal(size=(6, 8))) for _ in range(3)]
    allowed = rng.random((6, 6)) < 0.6
    allowed[np.arange(6), np.arange(6)] = True
    _, weights = self_attention(Q, K, V, AttnMask.from_allowed(allowed), return_weights=True)
    row_error = float(np.max(np.abs(weights.data.sum(axis=-1) - 1.0)))
    blocked_weight = float(np.max(weights.data[~allowed]))
    encoder = TransformerEncoder(EncoderConfig(**CHECK_CONFIG), "bert", seed=seed)
    worst = 0.0
    for _ in range(num_essays):
        length = int(rng.integers(2, 9))
        ids = rng.integers(5, 30, size=length)
        padded = np.concatenate([ids, np.zeros(12 - length, dtype=np.int64)])
        keep = (np.arange(12) < length).astype(np.int64)
        _, short, _ = encoder.encode(ids[None, :])
        _, long, _ = encoder.encode(padded[None, :], keep=keep[None, :])
        worst = max(worst, float(np.max(np.abs(short.data - long.data))))
    passed = row_error <= 1e-12 and blocked_weight < 1e-12 and worst <= 1e-9
    return {
        "passed": passed,
        "detail": "row sums %.1e, blocked weight %.1e, padding %.1e" % (row_error, blocked_weight, worst),
    }


def rel_shift_oracle(scores: np.ndarray) -> np.ndarray:
    """Index gather equivalent of the pad-reshape-slice relative shift"""
    q, r = scores.shape
    out = np.empty((q, r))
    for i in range(q):
        for j in range(r):
            p = q + i * r + j
            row, col = divmod(p, r + 1)
            out[i, j] = 0.0 if col == 0 else scores[row, col - 1]
    return out


def check_rel_shift(seed: Optional[int] = None) -> dict:
    rng = np.random.default_rng(seed)
    shapes, mismatches = 0, 0
    for q in range(1, 9):
        for r in range(q, 13):
            scores = rng.normal(size=(q, r))
            shapes += 1
            if not np.array_equal(rel_shift(Tensor(scores)).data, rel_shift_oracle(scores)):
                mismatches += 1
    return {"passed": mismatches == 0, "detail": "%i shapes, %i mismatches" % (shapes, mismatches)}


def check_permutation(seed: Optional[int] = None, steps: int = 500) -> dict:
    rng = np.random.default_rng(seed)
    causal = np.tril(np.ones((8, 8), dtype=bool))
    content_ok = np.array_equal(perm_mask(np.arange(8), 8).allowed, causal)
    query_ok = np.array_equal(perm_mask(np.arange(8), 8, "query").allowed, np.tril(causal, -1))
    config = EncoderConfig(**dict(CHECK_CONFIG, vocab_size=12, mem_len=0))
    encoder = TransformerEncoder(config, "xlnet", seed=seed)
    ids = rng.integers(5, 12, size=8)
    permutation = rng.permutation(8)
    changed = ids.copy()
    last = permutation[-1]
    changed[last] = 5 if ids[last] != 5 else 6
    _, rows = two_stream_forward(ids, permutation, encoder.store, config, return_query=True)
    _, rows_changed = two_stream_forward(changed, permutation, encoder.store, config, return_query=True)
    invisible = np.array_equal(rows.data, rows_changed.data)
    detail = "causal %s, content invisible %s" % (content_ok and query_ok, invisible)
    passed = content_ok and query_ok and invisible
    if steps > 0:
        toy = np.array([5, 6, 7, 8, 5, 6, 7, 8])
        loss = None
        for _ in range(steps):
            loss = encoder.plm_loss(toy, rng)
            adam_step(encoder.store, encoder.store.gradients(loss), 1e-3)
        detail += ", final loss %.4f" % loss.item()
        passed = passed and loss.item() < 0.1
    return {"passed": passed, "detail": detail}


def check_schedules(seed: Optional[int] = None) -> dict:
    texts, labels = separable_toy_set(num_essays=8, num_classes=2, seed=seed)
    vocab = build_vocab(texts, 200)
    scorer = TransformerScorer(vocab, EncoderConfig(**CHECK_CONFIG), "bert", k=2, seed=seed)
    before = scorer.store.snapshot()
    finetune(scorer, texts, labels, plan=TrainPlan(epochs=1, unfreeze="gradual", seed=seed))
    frozen = [n for g, names in scorer.param_groups().items() if g != "head" for n in names]
    unchanged = all(np.array_equal(before[n], scorer.store[n].data) for n in frozen)
    head_moved = not np.array_equal(before["classifier.weight"], scorer.store["classifier.weight"].data)
    lrs = np.array(discriminative_lrs(1e-5, 0.95, 12))
    ratios = lrs[:-1] / lrs[1:]
    geometric = bool(np.allclose(ratios, 0.95, rtol=0.0, atol=1e-12)) and lrs[-1] == 1e-5
    return {
        "passed": unchanged and head_moved and geometric,
        "detail": "frozen unchanged %s, head trained %s, geometric %s" % (unchanged, head_moved, geometric),
    }


def check_windows(seed: Optional[int] = None) -> dict:
    expected = {
        1: [(0, 1)],
        510: [(0, 510)],
        511: [(0, 510), (1, 511)],
        600: [(0, 510), (90, 600)],
        1020: [(0, 510), (510, 1020)],
        1200: [(0, 510), (510, 1020), (690, 1200)],
    }
    wrong = [n for n, windows in expected.items() if sliding_windows(n) != windows]
    rounding = combine_window_labels([2, 3], 5) == 3 and combine_window_labels([1, 2, 2, 2], 5) == 2
    return {
        "passed": not wrong and rounding,
        "detail": "wrong counts %s, rounding %s" % (wrong, rounding),
    }


def check_tfidf(seed: Optional[int] = None) -> dict:
    model = fit_tfidf(["a b a", "a c", "b b b c"], cutoff=1.0)
    vector = vectorize("a b a", model)
    error = float(np.max(np.abs(vector - np.array([0.8944, 0.4472, 0.0]))))
    return {"passed": error <= 1e-4, "detail": "max deviation %.1e" % error}


def check_lstm(seed: Optional[int] = None, steps: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    config = LstmConfig(vocab_size=10, embed_dim=4, hidden=5)
    model = LstmClassifier(config, k=2, seed=seed)
    store = model.store
    for gate, bias in [("input", -1e3), ("forget", 1e3)]:
        store["layer.0.%s.input_weight" % gate].data[...] = 0.0
        store["layer.0.%s.recurrent_weight" % gate].data[...] = 0.0
        store["layer.0.%s.bias" % gate].data[...] = bias
    cell = rng.normal(size=(1, 5))
    state = LstmState(Tensor(cell), Tensor(np.zeros((1, 5))), 0)
    for _ in range(steps):
        state = lstm_cell(Tensor(rng.normal(size=(1, 4))), state, store)
    drift = float(np.max(np.abs(state.cell.data - cell)))
    model = LstmClassifier(config, k=2, seed=seed)
    ids = rng.integers(5, 10, size=(4, 6))
    for _ in range(5):
        _, grads = lstm_bptt(ids, [0, 1, 0, 1], model.store, config)
        adam_step(model.store, grads, 0.01)
    constant = np.array_equal(model.store["layer.0.cec"].data, np.eye(5))
    return {
        "passed": drift < 1e-12 and constant,
        "detail": "cell drift %.1e, identity carousel constant %s" % (drift, constant),
    }


def overfit_epochs(scorer, texts: Sequence[str], labels, max_epochs: int, seed: Optional[int] = None, chunk: int = 10) -> Optional[int]:
    """Epochs until every training essay is predicted correctly, None if ``max_epochs`` do not suffice"""
    labels = np.asarray(labels)
    epochs = 0
    while epochs < max_epochs:
        finetune(scorer, texts, labels, plan=TrainPlan(epochs=chunk, seed=None if seed is None else seed + epochs))
        epochs += chunk
        if np.array_equal(scorer.predict(texts), labels):
            return epochs
    return None


def check_overfit(seed: Optional[int] = None) -> dict:
    texts, labels = separable_toy_set(num_essays=32, num_classes=3, seed=seed)
    vocab = build_vocab(texts, 500)
    config = EncoderConfig.preset("desk", dropout=0.0)
    results = OrderedDict()
    for variant in ["bert", "xlnet"]:
        scorer = TransformerScorer(vocab, config, variant, k=3, seed=seed)
        results[variant] = overfit_epochs(scorer, texts, labels, 200, seed)
    scorer = LstmScorer(vocab, LstmConfig(), k=3, seed=seed)
    results["lstm"] = overfit_epochs(scorer, texts, labels, 400, seed)
    return {
        "passed": all(epochs is not None for epochs in results.values()),
        "detail": ", ".join("%s %s epochs" % (name, epochs) for name, epochs in results.items()),
    }


def check_learnability(seed: Optional[int] = None, max_workers: int = 1) -> dict:
    seed = 43 if seed is None else seed
    corpus = SyntheticEssayCorpus(num_essays=200, seed=seed)
    plan = TrainPlan(epochs=20, seed=seed)
    spec = corpus.specs[1]
    qwks, models = OrderedDict(), {}
    for variant in ["bow", "lstm", "bert", "xlnet"]:
        result = run_kfold(corpus.essays, corpus.specs, ModelSettings(variant=variant), plan, max_workers=max_workers)
        mean = result.metrics[result.metrics["fold"] == "mean"]
        qwks[variant] = float(mean["qwk"].iloc[0])
        models[variant] = result.models
    splits = kfold_splits(corpus.essays, plan.seed)
    ensemble_ok = True
    for fold, split in enumerate(splits):
        validation = [e for e in select_item(corpus.essays, 1) if e.essay_id in set(split.validation)]
        texts, labels = [e.text for e in validation], to_labels(validation, spec)
        members = [models[v][models[v]["fold"] == fold]["scorer"].iloc[0] for v in ["bert", "xlnet"]]
        member_qwks = [dev_qwk(m.predict(texts), labels, spec.k) for m in members]
        ensemble = dev_qwk(ensemble_predict(EnsembleSpec(members), texts), labels, spec.k)
        ensemble_ok = ensemble_ok and ensemble >= max(member_qwks) - 0.02
    return {
        "passed": all(value >= 0.7 for value in qwks.values()) and ensemble_ok,
        "detail": ", ".join("%s %.3f" % item for item in qwks.items()) + ", ensemble ok %s" % ensemble_ok,
    }


SUITES = OrderedDict(
    [
        ("metrics", check_metrics),
        ("gradients", check_gradients),
        ("attention", check_attention),
        ("rel_shift", check_rel_shift),
        ("permutation", check_permutation),
        ("schedules", check_schedules),
        ("windows", check_windows),
        ("tfidf", check_tfidf),
        ("lstm", check_lstm),
        ("overfit", check_overfit),
        ("learnability", check_learnability),
    ]
)
# suites that train models for minutes
SLOW_SUITES = ["overfit", "learnability"]


def run_selftest(
    suites: Optional[Sequence[str]] = None,
    seed: Optional[int] = None,
    quick: bool = False,
    verbose: bool = False,
) -> pd.DataFrame:
    """
    Run the oracle and property suites; one row (suite, passed, seconds, detail) each

    Parameters
    ----------
    suites : Sequence[str] (optional)
        Suite names, all of them by default
    seed: int (optional)
        Random seed (disabled by default)
    quick : bool
        Skip the model-training suites and the permutation-LM training run
    verbose : bool
        Log every suite result
    """
    names = list(SUITES) if not suites else list(suites)
    for name in names:
        if name not in SUITES:
            raise ValueError("Choose suites from values %s!" % list(SUITES))
    if quick:
        names = [name for name in names if name not in SLOW_SUITES]
    rows = []
    for name in names:
        start = time.time()
        if name == "permutation" and quick:
            outcome = check_permutation(seed, steps=0)
        else:
            outcome = SUITES[name](seed)
        rows.append(
            {
                "suite": name,
                "passed": bool(outcome["passed"]),
                "seconds": round(time.time() - start, 3),
                "detail": outcome["detail"],
            }
        )
        log = logger.info if outcome["passed"] else logger.warning
        if verbose or not outcome["passed"]:
            log("%s: %s (%s)", name, "passed" if outcome["passed"] else "FAILED", outcome["detail"])
    return pd.DataFrame(rows, columns=["suite", "passed", "seconds", "detail"])
