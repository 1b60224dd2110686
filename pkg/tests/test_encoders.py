import numpy as np
import pytest

import kbvqa
from kbvqa import encoders


@pytest.fixture(scope='function')
def store():
    return kbvqa.ParameterStore(np.random.RandomState(3))


def test_pad_sequences():
    ids, mask = kbvqa.pad_sequences([[5, 6, 7], [8]], max_len=10)
    assert ids.tolist() == [[5, 6, 7], [8, kbvqa.PAD, kbvqa.PAD]]
    assert mask.tolist() == [[True, True, True], [True, False, False]]


def test_pad_sequences_truncates():
    ids, mask = kbvqa.pad_sequences([[1, 2, 3, 4]], max_len=2)
    assert ids.tolist() == [[1, 2]]
    assert mask.all()


def test_pad_sequences_empty():
    with pytest.raises(ValueError):
        kbvqa.pad_sequences([[1], []], max_len=4)


def test_embed_repeated_token(store):
    """A repeated token gets identical rows."""
    table = store.add("embedding", (5, 3))
    out = kbvqa.embed_tokens(table, [2, 4, 2])
    assert out.shape == (3, 3)
    np.testing.assert_array_equal(out.data[0], out.data[2])


def test_embed_out_of_vocabulary(store):
    table = store.add("embedding", (5, 3))
    with pytest.raises(IndexError):
        kbvqa.embed_tokens(table, [5])


def test_linear_vector(store):
    w = store.add("w", (3, 2))
    out = kbvqa.linear(np.ones(3), w)
    assert out.shape == (2,)
    np.testing.assert_allclose(out.data, w.data.sum(axis=0))


def test_gated_zero_weights():
    """With zero weights the output only depends on the biases."""
    params = (np.zeros((2, 3)), np.full(3, 0.5), np.zeros((2, 3)), np.zeros(3))
    out = kbvqa.gated_nonlinear(np.array([[1.0, -1.0]]), params)
    np.testing.assert_allclose(out.data, np.full((1, 3), np.tanh(0.5) * 0.5))


def test_gated_shape_mismatch():
    params = (np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(kbvqa.DimensionError):
        kbvqa.gated_nonlinear(np.ones((1, 4)), params)


def test_gru_masked_padding(store):
    """Padded steps do not change the final state."""
    cell = kbvqa.GRUCell(store, "gru", 3, 4)
    rng = np.random.RandomState(0)
    seq = rng.randn(2, 3)
    padded = np.concatenate([seq, np.zeros((2, 3))])[None]
    mask = np.array([[True, True, False, False]])
    np.testing.assert_allclose(kbvqa.gru_encode(cell, padded, mask).data[0], kbvqa.gru_encode(cell, seq).data)


def test_gru_batch_matches_single(store):
    cell = kbvqa.GRUCell(store, "gru", 3, 4)
    batch = np.random.RandomState(1).randn(2, 5, 3)
    out = kbvqa.gru_encode(cell, batch)
    np.testing.assert_allclose(out.data[1], kbvqa.gru_encode(cell, batch[1]).data)


def test_gru_state_bounded(store):
    cell = kbvqa.GRUCell(store, "gru", 3, 4)
    out = kbvqa.gru_encode(cell, np.random.RandomState(2).randn(6, 3) * 10)
    assert np.all(np.abs(out.data) < 1)


def test_bilstm_odd_size(store):
    with pytest.raises(kbvqa.ConfigError):
        kbvqa.BiLSTM(store, "facts", 3, 5)


def test_bilstm_masked_padding(store):
    """Both directions ignore right padding."""
    bilstm = kbvqa.BiLSTM(store, "facts", 3, 4)
    seq = np.random.RandomState(4).randn(3, 3)
    padded = np.concatenate([seq, np.zeros((2, 3))])[None]
    mask = np.array([[True, True, True, False, False]])
    np.testing.assert_allclose(kbvqa.bilstm_encode(bilstm, padded, mask).data[0],
                               kbvqa.bilstm_encode(bilstm, seq).data)


def test_bilstm_output_size(store):
    bilstm = kbvqa.BiLSTM(store, "facts", 3, 6)
    assert kbvqa.bilstm_encode(bilstm, np.ones((2, 3))).shape == (6,)


def test_top_down_attention_identical_objects(store):
    """Identical objects get uniform weights and the attended feature equals them."""
    layer = kbvqa.TopDownAttention(store, "att", 3, 2, 4)
    v = np.tile([1.0, 2.0, 3.0], (4, 1))
    v_hat, attention = kbvqa.top_down_attention(layer, v, np.array([0.5, -0.5]))
    np.testing.assert_allclose(attention.data, np.full(4, 0.25))
    np.testing.assert_allclose(v_hat.data, [1.0, 2.0, 3.0])


def test_top_down_attention_distribution(store):
    layer = kbvqa.TopDownAttention(store, "att", 3, 2, 4)
    rng = np.random.RandomState(5)
    _, attention = layer(kbvqa.Tensor(rng.randn(2, 5, 3)), kbvqa.Tensor(rng.randn(2, 2)))
    assert attention.shape == (2, 5)
    np.testing.assert_allclose(attention.data.sum(axis=-1), np.ones(2))


def test_self_attention_single_token(store):
    """A single token attends only to itself."""
    layer = kbvqa.SelfAttentiveQuestion(store, "question", 3, 4)
    q, attention = kbvqa.self_attention_question(layer, np.ones((1, 3)))
    assert q.shape == (4,)
    assert attention.data.tolist() == [[1.0]]


def test_self_attention_mask(store):
    layer = kbvqa.SelfAttentiveQuestion(store, "question", 3, 4)
    H = kbvqa.Tensor(np.random.RandomState(6).randn(1, 3, 3))
    _, attention = layer(H, np.array([[True, True, False]]))
    assert np.all(attention.data[0, :, 2] == 0.0)


def test_fusion_shape(store):
    layer = kbvqa.Fusion(store, "fusion", 3, 2, 5)
    out = kbvqa.fuse(layer, kbvqa.Tensor(np.ones((2, 3))), kbvqa.Tensor(np.ones((2, 2))))
    assert out.shape == (2, 5)


def test_layers_share_parameters(store):
    """Building a layer twice on the same store reuses the parameters."""
    first = kbvqa.GatedLayer(store, "gate", 2, 3)
    second = kbvqa.GatedLayer(store, "gate", 2, 3)
    assert first.weight is second.weight


def test_gradient_gru(store, gradcheck):
    cell = kbvqa.GRUCell(store, "gru", 2, 3)
    H = kbvqa.Tensor(np.random.RandomState(7).randn(1, 3, 2), requires_grad=True, name="H")
    mask = np.array([[True, True, False]])
    tensors = [H] + [store[n] for n in store.names("gru.")]
    gradcheck(lambda: kbvqa.reduce_sum(kbvqa.gru_encode(cell, H, mask)), tensors)


def test_gradient_bilstm(store, gradcheck):
    bilstm = kbvqa.BiLSTM(store, "facts", 2, 4)
    H = kbvqa.Tensor(np.random.RandomState(8).randn(2, 3, 2), requires_grad=True, name="H")
    mask = np.array([[True, True, True], [True, False, False]])
    gradcheck(lambda: kbvqa.reduce_sum(encoders.bilstm_encode(bilstm, H, mask) ** 2.0), [H, store["facts.fw.w_g"]])


def test_gradient_attention_fusion(store, gradcheck):
    attention = kbvqa.TopDownAttention(store, "att", 3, 2, 4)
    question = kbvqa.SelfAttentiveQuestion(store, "question", 2, 2)
    fusion = kbvqa.Fusion(store, "fusion", 3, 2, 3)
    rng = np.random.RandomState(9)
    v = kbvqa.Tensor(rng.randn(2, 3, 3), requires_grad=True, name="v")
    H = kbvqa.Tensor(rng.randn(2, 4, 2), requires_grad=True, name="H")
    mask = np.array([[True, True, True, True], [True, True, False, False]])

    def loss():
        q, _ = question(H, mask)
        v_hat, _ = attention(v, q)
        return kbvqa.reduce_sum(fusion(v_hat, q))

    gradcheck(loss, [v, H, store["att.w_a"], store["fusion.f_q.w_gate"]])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru_reference(cell, seq):
    """Step by step GRU in plain numpy for one unbatched sequence."""
    (w_z, u_z, b_z), (w_r, u_r, b_r), (w_n, u_n, b_n) = [
        [t.data for t in cell.gates[g]] for g in ("z", "r", "n")]
    h = np.zeros(cell.hidden_dim)
    for x in seq:
        z = _sigmoid(x.dot(w_z) + h.dot(u_z) + b_z)
        r = _sigmoid(x.dot(w_r) + h.dot(u_r) + b_r)
        n = np.tanh(x.dot(w_n) + (r * h).dot(u_n) + b_n)
        h = z * h + (1.0 - z) * n
    return h


def _lstm_reference(cell, seq):
    weights = dict((g, [t.data for t in cell.gates[g]]) for g in ("i", "f", "g", "o"))
    h = np.zeros(cell.hidden_dim)
    c = np.zeros(cell.hidden_dim)
    for x in seq:
        pre = dict((g, x.dot(w) + h.dot(u) + b) for g, (w, u, b) in weights.items())
        c = _sigmoid(pre["f"]) * c + _sigmoid(pre["i"]) * np.tanh(pre["g"])
        h = _sigmoid(pre["o"]) * np.tanh(c)
    return h


def _randomize_biases(store, rng):
    for name in store.names():
        if ".b_" in name:
            store.assign(name, rng.randn(*store[name].shape) * 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_gru_matches_reference(seed):
    """Test that the GRU agrees with a plain numpy loop on ragged batches."""
    rng = np.random.RandomState(seed)
    store = kbvqa.ParameterStore(rng)
    cell = kbvqa.GRUCell(store, "gru", 3, 4)
    _randomize_biases(store, rng)
    lengths = rng.randint(1, 6, size=3)
    H = rng.randn(3, lengths.max(), 3)
    mask = np.arange(lengths.max())[None, :] < lengths[:, None]
    out = kbvqa.gru_encode(cell, H, mask).data
    for row, length in enumerate(lengths):
        np.testing.assert_allclose(out[row], _gru_reference(cell, H[row, :length]), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_bilstm_matches_reference(seed):
    """Test that the BiLSTM agrees with two plain numpy loops, the second over the reversed tokens."""
    rng = np.random.RandomState(10 + seed)
    store = kbvqa.ParameterStore(rng)
    bilstm = kbvqa.BiLSTM(store, "facts", 3, 6)
    _randomize_biases(store, rng)
    lengths = rng.randint(1, 6, size=3)
    H = rng.randn(3, lengths.max(), 3)
    mask = np.arange(lengths.max())[None, :] < lengths[:, None]
    out = kbvqa.bilstm_encode(bilstm, H, mask).data
    for row, length in enumerate(lengths):
        seq = H[row, :length]
        expected = np.concatenate([_lstm_reference(bilstm.forward_cell, seq),
                                   _lstm_reference(bilstm.backward_cell, seq[::-1])])
        np.testing.assert_allclose(out[row], expected, atol=1e-12)


@pytest.mark.parametrize("length", [1, 2, 5])
def test_gru_zero_weights(store, length):
    """With zero weights and candidate bias c the state is tanh(c) (1 - 0.5^L)."""
    cell = kbvqa.GRUCell(store, "gru", 3, 2)
    for name in store.names("gru."):
        store.assign(name, np.zeros(store[name].shape))
    store.assign("gru.b_n", [0.3, -1.2])
    out = kbvqa.gru_encode(cell, np.random.RandomState(11).randn(length, 3))
    np.testing.assert_allclose(out.data, np.tanh([0.3, -1.2]) * (1.0 - 0.5 ** length), atol=1e-12)


def test_bilstm_palindrome(store):
    """With tied directions a palindrome encodes to two equal halves."""
    bilstm = kbvqa.BiLSTM(store, "facts", 3, 4)
    for name in store.names("facts.fw."):
        store.assign(name.replace(".fw.", ".bw."), store[name].data)
    half = np.random.RandomState(12).randn(2, 3)
    seq = np.concatenate([half, np.ones((1, 3)), half[::-1]])
    out = kbvqa.bilstm_encode(bilstm, seq).data
    np.testing.assert_allclose(out[:2], out[2:], atol=1e-12)
