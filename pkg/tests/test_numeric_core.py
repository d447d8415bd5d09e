import os, pytest
import numpy as np

from aesf.numeric_core import (
    CHECKPOINT_MAGIC,
    ConsistencyError,
    GradTape,
    ParamStore,
    ShapeError,
    Tensor,
    adam_step,
    concat,
    cross_entropy,
    dense,
    dropout,
    feature_norm,
    gelu,
    grad_check,
    matmul,
    round_half_away,
    softmax,
    stack,
    take_rows,
)

SEED = 43


def random_store(shapes, seed=SEED):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(name, rng.normal(size=shape))
    return store


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_shape_error_is_value_error():
    assert issubclass(ShapeError, ValueError)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(SEED).normal(size=(4, 5)) * 50)
    out = softmax(x).data
    assert np.allclose(out.sum(axis=-1), 1.0)
    assert np.all(out >= 0.0)


def test_softmax_invalid_axis():
    with pytest.raises(ValueError):
        softmax(Tensor(np.ones((2, 2))), axis=2)


def test_softmax_is_shift_invariant():
    x = np.random.default_rng(SEED).normal(size=(3, 4))
    assert np.allclose(softmax(Tensor(x)).data, softmax(Tensor(x + 1000.0)).data)


def test_dense_invalid_activation():
    with pytest.raises(ValueError):
        dense(Tensor(np.ones((1, 2))), Tensor(np.ones((3, 2))), f="relu")


def test_dense_bias_shape_error():
    with pytest.raises(ShapeError):
        dense(Tensor(np.ones((1, 2))), Tensor(np.ones((3, 2))), Tensor(np.ones(2)))


def test_feature_norm_statistics():
    x = Tensor(np.random.default_rng(SEED).normal(3.0, 5.0, size=(6, 8)))
    out = feature_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0).data
    assert np.allclose(out.mean(axis=-1), 0.0)
    assert np.allclose(out.std(axis=-1), 1.0)


def test_dropout_needs_rng_in_train_mode():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(4)), 0.5, mode="train")


def test_dropout_keeps_expectation():
    rng = np.random.default_rng(SEED)
    out = dropout(Tensor(np.ones(20000)), 0.2, mode="train", rng=rng).data
    assert len(np.unique(out)) == 2
    assert np.isclose(out.max(), 1.25)
    assert abs(out.mean() - 1.0) < 0.05


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_empty_batch():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((0, 3))), [])


def test_take_rows_out_of_range():
    with pytest.raises(ValueError):
        take_rows(Tensor(np.ones((3, 2))), [3])


def test_take_rows_accumulates_repeated_ids():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    loss = take_rows(table, [1, 1, 2]).sum()
    grad = GradTape(loss).backward()[id(table)]
    assert np.array_equal(grad, np.array([[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]]))


def test_shared_subexpression_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    z = (y + y).sum()
    tape = GradTape(z)
    assert len(tape.records) == 3
    assert np.allclose(tape.backward()[id(x)], [8.0])


def test_non_scalar_output_needs_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        GradTape(x * 2.0).backward()


def test_gradient_check_of_composite_ops():
    store = random_store({"w": (3, 4), "b": (3,), "gamma": (3,), "beta": (3,), "x": (2, 4)})

    def f(s):
        h = dense(s["x"], s["w"], s["b"], "tanh")
        h = feature_norm(h, s["gamma"], s["beta"])
        h = gelu(h) + softmax(h)
        return cross_entropy(concat([h, h * 0.5], axis=0), [0, 2, 1, 1])

    report = grad_check(f, store)
    assert report["passed"], report["failures"]
    assert report["num_checked"] == store.num_parameters()


def test_gradient_check_of_stack_and_indexing():
    store = random_store({"a": (2, 3), "b": (2, 3)})

    def f(s):
        stacked = stack([s["a"], s["b"]], axis=1)
        return (stacked[:, 1, :2] * stacked[:, 0, 1:]).sum() + s["a"].T.mean()

    assert grad_check(f, store)["passed"]


def test_gradient_check_reports_failure():
    store = random_store({"w": (2,)})
    # a gradient-free constant makes the analytic derivative zero
    report = grad_check(lambda s: Tensor((s["w"].data ** 2).sum()), store)
    assert not report["passed"]
    assert len(report["failures"]) == 2


def test_frozen_parameters_get_zero_gradients():
    store = random_store({"w": (2,), "v": (2,)})
    store.set_trainable(["v"], False)
    grads = store.gradients((store["w"] * store["v"]).sum())
    assert np.array_equal(grads["v"], np.zeros(2))
    assert np.allclose(grads["w"], store["v"].data)


def test_fixed_parameter_never_trainable():
    store = ParamStore()
    store.add("cec", np.eye(2), fixed=True)
    store.set_trainable(["cec"], True)
    assert store.trainable_names == []
    assert not store["cec"].requires_grad


def test_duplicate_parameter_name():
    store = ParamStore()
    store.add("w", [1.0])
    with pytest.raises(ValueError):
        store.add("w", [2.0])


def test_adam_missing_gradient():
    store = random_store({"w": (2,), "v": (2,)})
    with pytest.raises(ConsistencyError):
        adam_step(store, {"w": np.ones(2)}, lr=0.1)


def test_adam_missing_learning_rate():
    store = random_store({"w": (2,), "v": (2,)})
    with pytest.raises(ConsistencyError):
        adam_step(store, {"w": np.ones(2), "v": np.ones(2)}, lr={"w": 0.1})


def test_adam_skips_frozen_parameters():
    store = random_store({"w": (2,), "v": (2,)})
    before = store["v"].data.copy()
    store.set_trainable(["v"], False)
    adam_step(store, {"w": np.ones(2)}, lr=0.1)
    assert np.array_equal(store["v"].data, before)
    assert store.entry("w").step == 1


def test_adam_minimizes_quadratic():
    store = ParamStore()
    store.add("theta", [3.0, -2.0])
    for _ in range(500):
        loss = (store["theta"] * store["theta"]).sum()
        adam_step(store, store.gradients(loss), lr=0.05)
    assert np.all(np.abs(store["theta"].data) < 0.1)


def test_snapshot_restore_in_place():
    store = random_store({"w": (2, 2)})
    alias = store["w"]
    snapshot = store.snapshot()
    store["w"].data += 1.0
    store.restore(snapshot)
    assert alias is store["w"]
    assert np.array_equal(alias.data, snapshot["w"])


def test_checkpoint_round_trip(tmp_path):
    store = random_store({"w": (2, 3), "b": (3,)})
    store.add("cec", np.eye(2), fixed=True)
    store.set_trainable(["b"], False)
    path = os.path.join(tmp_path, "checkpoint.aesf")
    store.save(path, {"variant": "bow", "k": 4})
    with open(path, "rb") as f:
        assert f.read(len(CHECKPOINT_MAGIC)) == CHECKPOINT_MAGIC
    restored, config = ParamStore.load(path)
    assert config == {"variant": "bow", "k": 4}
    assert restored.names == store.names
    assert restored.trainable_names == ["w"]
    assert restored.entry("cec").fixed
    for name in store.names:
        assert np.array_equal(restored[name].data, store[name].data)


def test_checkpoint_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "broken.aesf")
    with open(path, "wb") as f:
        f.write(b"NOPE\n{}\n")
    with pytest.raises(ValueError):
        ParamStore.load(path)


def test_round_half_away_arrays():
    assert round_half_away(np.array([0.5, 1.5, -0.5, 2.49])).tolist() == [1, 2, -1, 2]
