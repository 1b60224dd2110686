import numpy as np
import pytest

import kbvqa


@pytest.fixture(scope='function')
def store():
    store = kbvqa.ParameterStore(np.random.RandomState(0))
    store.add("layer.w", (3, 2))
    store.add("layer.b", (2,), init="zeros")
    store.add_buffer("layer.running", np.ones(2))
    return store


def test_add_duplicate(store):
    with pytest.raises(ValueError):
        store.add("layer.w", (3, 2))


def test_uniform_bounds(store):
    bound = 1.0 / np.sqrt(3)
    assert np.all(np.abs(store["layer.w"].data) <= bound)


def test_require_existing(store):
    assert store.require("layer.w", (3, 2)) is store["layer.w"]


def test_require_shape_mismatch(store):
    with pytest.raises(kbvqa.DimensionError):
        store.require("layer.w", (2, 3))


def test_names_and_buffers(store):
    assert store.names() == ["layer.b", "layer.w"]
    assert store.buffer_names() == ["layer.running"]
    assert store.trainable_names() == ["layer.b", "layer.w"]
    assert len(store) == 2


def test_set_trainable_prefix(store):
    """Freezing drops the optimizer state of every parameter under the prefix."""
    store.set_trainable("layer.", False)
    assert store.trainable_names() == []
    store.set_trainable("layer.w", True)
    assert store.trainable_names() == ["layer.w"]


def test_assign_shape(store):
    store.assign("layer.b", [1.0, 2.0])
    assert store["layer.b"].data.tolist() == [1.0, 2.0]
    with pytest.raises(kbvqa.DimensionError):
        store.assign("layer.b", [1.0])


def test_snapshot_restore(store):
    snapshot = store.snapshot()
    store.assign("layer.w", np.zeros((3, 2)))
    store.restore(snapshot)
    np.testing.assert_array_equal(store["layer.w"].data, snapshot["layer.w"])


def test_adam_missing_gradient(store):
    """The error names the parameter without gradient."""
    store["layer.w"].grad = np.ones((3, 2))
    with pytest.raises(kbvqa.GradientError) as excinfo:
        kbvqa.adam_step(store, 0.1)
    assert "layer.b" in str(excinfo.value)


def test_adam_first_step():
    """With bias correction the first step moves every weight by lr against the gradient sign."""
    store = kbvqa.ParameterStore()
    w = store.add("w", (3,), init=np.array([1.0, -2.0, 0.5]))
    w.grad = np.array([0.3, -4.0, 0.05])
    kbvqa.adam_step(store, 0.1)
    np.testing.assert_allclose(w.data, [0.9, -1.9, 0.4], rtol=1e-6)
    assert store.step == 1


def test_adam_skips_frozen():
    store = kbvqa.ParameterStore()
    w = store.add("w", (2,), init=np.ones(2), trainable=False)
    v = store.add("v", (2,), init=np.ones(2))
    v.grad = np.ones(2)
    kbvqa.adam_step(store, 0.1)
    assert w.data.tolist() == [1.0, 1.0]
    assert v.data.tolist() != [1.0, 1.0]


def test_adam_decoupled_decay():
    """With a zero gradient only the decoupled decay moves the weight."""
    store = kbvqa.ParameterStore()
    w = store.add("w", (1,), init=np.array([2.0]))
    w.grad = np.zeros(1)
    kbvqa.adam_step(store, 0.5, weight_decay=0.1, decoupled=True)
    np.testing.assert_allclose(w.data, [2.0 - 0.5 * 0.1 * 2.0])


def test_adam_coupled_decay():
    """Coupled decay enters the gradient and gets normalised like it."""
    store = kbvqa.ParameterStore()
    w = store.add("w", (1,), init=np.array([2.0]))
    w.grad = np.zeros(1)
    kbvqa.adam_step(store, 0.5, weight_decay=0.1, decoupled=False)
    np.testing.assert_allclose(w.data, [1.5], rtol=1e-6)


def test_adam_converges():
    """Adam minimises a quadratic."""
    store = kbvqa.ParameterStore()
    w = store.add("w", (2,), init=np.array([3.0, -2.0]))
    for _ in range(500):
        store.zero_grad()
        kbvqa.backward(kbvqa.reduce_sum((w - np.array([1.0, 1.0])) ** 2.0))
        kbvqa.adam_step(store, 0.05)
    np.testing.assert_allclose(w.data, [1.0, 1.0], atol=5e-2)


@pytest.mark.parametrize("lr,decay", [(0.0, 0.0), (-1.0, 0.0), (0.1, -0.1)])
def test_adam_invalid_settings(store, lr, decay):
    with pytest.raises(ValueError):
        kbvqa.adam_step(store, lr, weight_decay=decay)


def test_checkpoint_round_trip(store, tmp_path):
    """Values, buffers, moments and metadata come back bit for bit."""
    for name in store.names():
        store[name].grad = np.full(store[name].shape, 0.5)
    kbvqa.adam_step(store, 0.01)
    store.set_trainable("layer.b", False)
    path = str(tmp_path / "model.ckpt")
    kbvqa.save_checkpoint(path, store, {"epochs": 3})
    loaded, meta = kbvqa.load_checkpoint(path)
    assert meta == {"epochs": 3}
    assert loaded.step == 1
    assert loaded.names() == store.names()
    assert loaded.trainable_names() == ["layer.w"]
    for name in store.names() + store.buffer_names():
        np.testing.assert_array_equal(loaded[name].data, store[name].data)
        assert loaded[name].data.dtype == store[name].data.dtype
    for first, second in zip(loaded.moments("layer.w"), store.moments("layer.w")):
        np.testing.assert_array_equal(first, second)


def test_checkpoint_float32(tmp_path):
    kbvqa.set_default_dtype("float32")
    store = kbvqa.ParameterStore()
    store.add("w", (2, 2))
    path = str(tmp_path / "model.ckpt")
    kbvqa.save_checkpoint(path, store)
    loaded, _ = kbvqa.load_checkpoint(path)
    assert loaded["w"].data.dtype == np.float32
    np.testing.assert_array_equal(loaded["w"].data, store["w"].data)


def test_snapshot_restores_optimizer_state(store):
    """Moments and the step count come back with the values."""
    for name in store.names():
        store[name].grad = np.ones(store[name].shape)
    kbvqa.adam_step(store, 0.1)
    snapshot = store.snapshot()
    first = [m.copy() for m in store.moments("layer.w")]
    store["layer.w"].grad = np.full((3, 2), np.inf)
    store["layer.b"].grad = np.ones(2)
    kbvqa.adam_step(store, 0.1)
    store.restore(snapshot)
    assert store.step == 1
    for restored, expected in zip(store.moments("layer.w"), first):
        np.testing.assert_array_equal(restored, expected)
    assert store.all_finite() == (True, None)


def test_all_finite(store):
    store["layer.b"].grad = np.array([1.0, np.nan])
    assert store.all_finite(grads=True) == (False, "layer.b")
    assert store.all_finite() == (True, None)
    store.assign("layer.running", [np.inf, 0.0])
    assert store.all_finite() == (False, "layer.running")
