import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decoar import tensor as tn
from decoar.model import (
    DecoarConfig,
    DecoarModel,
    SequenceTooShortError,
    extract_decoar_features,
    ffn_head,
    num_slice_terms,
    reconstruct_spectrogram,
    reconstruction_errors,
    slice_loss,
    utterance_loss,
)
from decoar.tensor import Tensor
from gradcheck import numeric_grad, rel_error


def toy(slice_size=3, h=4, d=3, layers=1, ffn=5, bi=True, seed=0):
    cfg = DecoarConfig(slice_size=slice_size, hidden_dim=h, num_layers=layers, ffn_hidden=ffn, feature_dim=d,
                       bidirectional=bi)
    return DecoarModel(cfg, seed=seed)


def brute_slice_loss(model, x, t):
    """Re-evaluate the slice loss with plain numpy outside the graph."""
    st_ = model.encode(x)
    K = model.K
    ctx = st_.forward.data[t]
    if st_.backward is not None:
        ctx = np.concatenate([ctx, st_.backward.data[t + K]])
    h = model.heads
    total = 0.0
    for i in range(K + 1):
        hid = np.maximum(ctx @ h.w1.data[i] + h.b1.data[i], 0.0)
        total += np.abs(x[t + i] - (hid @ h.w2.data[i] + h.b2.data[i])).sum()
    return total


def test_zero_heads_output_zero():
    m = toy()
    for p in (m.heads.w1, m.heads.b1, m.heads.w2, m.heads.b2):
        p.data[:] = 0.0
    assert np.all(ffn_head(m, 1, np.ones(8)).data == 0.0)


def test_identity_head_is_relu():
    m = toy(h=2, d=4, ffn=4)
    m.heads.w1.data[0] = np.eye(4)
    m.heads.w2.data[0] = np.eye(4)
    m.heads.b1.data[0] = 0.0
    m.heads.b2.data[0] = 0.0
    v = np.array([1.0, -2.0, 0.5, -0.1])
    np.testing.assert_array_equal(ffn_head(m, 0, v).data, np.maximum(v, 0))


def test_head_offset_out_of_range():
    m = toy(slice_size=3)
    with pytest.raises(IndexError):
        ffn_head(m, 3, np.ones(8))
    with pytest.raises(IndexError):
        reconstruct_spectrogram(m, np.zeros((5, 3)), -1)


def test_head_gradcheck():
    m = toy()
    v = Tensor(np.random.default_rng(0).normal(size=8), requires_grad=True)
    tn.sum(tn.tanh(ffn_head(m, 2, v))).backward()
    h = m.heads

    def f():
        return float(np.tanh(ffn_head(m, 2, v.data).data).sum())

    nums = numeric_grad(f, [h.w1.data, h.b1.data, h.w2.data, h.b2.data, v.data])
    for t, n in zip([h.w1, h.b1, h.w2, h.b2, v], nums):
        assert rel_error(t.grad, n) < 1e-4


def test_perfect_heads_give_zero_loss():
    # K = 0, one head with W2 = 0 and b2 = the target frame.
    m = toy(slice_size=1, d=1)
    m.heads.w2.data[:] = 0.0
    x = np.array([[2.5], [2.5], [2.5]])
    m.heads.b2.data[0] = [2.5]
    assert utterance_loss(m, x).item() == 0.0


def test_k0_single_term_is_absolute_error():
    m = toy(slice_size=1, d=1)
    m.heads.w2.data[:] = 0.0
    m.heads.b2.data[0] = [0.75]
    x = np.array([[2.0]])
    st_ = m.encode(x)
    assert slice_loss(m, st_, x, 0).item() == pytest.approx(1.25, abs=1e-15)


def test_slice_loss_matches_brute_force():
    m = toy(slice_size=3, d=3, seed=1)
    x = np.random.default_rng(2).normal(size=(6, 3))
    st_ = m.encode(x)
    for t in range(6 - 2):
        assert slice_loss(m, st_, x, t).item() == pytest.approx(brute_slice_loss(m, x, t), abs=1e-12)
    with pytest.raises(IndexError):
        slice_loss(m, st_, x, 4)


def test_slice_term_counts():
    assert num_slice_terms(10, 2) == 8
    assert num_slice_terms(3, 2) == 1
    with pytest.raises(SequenceTooShortError, match="T=2.*K=2"):
        utterance_loss(toy(slice_size=3), np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 10), K=st.integers(0, 5), seed=st.integers(0, 10**6))
def test_utterance_loss_is_sum_of_slice_losses(T, K, seed):
    if T <= K:
        T = K + 1
    m = toy(slice_size=K + 1, h=3, d=2, layers=2, ffn=4, seed=seed % 97)
    x = np.random.default_rng(seed).normal(size=(T, 2))
    st_ = m.encode(x)
    total = sum(slice_loss(m, st_, x, t).item() for t in range(T - K))
    assert utterance_loss(m, x).item() == pytest.approx(total, abs=1e-10)
    assert utterance_loss(m, x).item() >= 0.0


def test_batch_loss_equals_sum_of_utterances():
    m = toy(slice_size=3, layers=2, seed=3)
    rng = np.random.default_rng(4)
    xs = [rng.normal(size=(n, 3)) for n in (7, 3, 5)]
    loss, terms = m.batch_loss(xs)
    assert terms == 5 + 1 + 3
    assert loss.item() == pytest.approx(sum(utterance_loss(m, x).item() for x in xs), abs=1e-10)


def test_utterance_loss_gradcheck_on_parameter_subset():
    m = toy(slice_size=3, h=4, d=3, layers=2, ffn=5, seed=5)
    x = np.random.default_rng(6).normal(size=(8, 3))
    params = m.named_parameters()
    utterance_loss(m, x).backward()
    rng = np.random.default_rng(7)
    names = sorted(params)
    picks = [(names[rng.integers(len(names))], None) for _ in range(20)]
    picks = [(n, int(rng.integers(params[n].data.size))) for n, _ in picks]
    for name, k in picks:
        flat = params[name].data.reshape(-1)
        old = flat[k]
        flat[k] = old + 1e-6
        up = utterance_loss(m, x).item()
        flat[k] = old - 1e-6
        down = utterance_loss(m, x).item()
        flat[k] = old
        num = (up - down) / 2e-6
        ana = params[name].grad.reshape(-1)[k]
        assert abs(ana - num) <= 1e-4 * max(abs(num), abs(ana), 1e-3), name


def test_head_isolation():
    m = toy(slice_size=3, seed=8)
    x = np.random.default_rng(9).normal(size=(6, 3))
    st_ = m.encode(x)
    ctx = m.context(st_, np.arange(4))
    grads = []
    for keep in (None, 1):
        for p in (m.heads.w1, m.heads.w2):
            p.grad = None
        terms = [tn.sum(tn.abs(m.heads.head(i, ctx) - Tensor(x[i : i + 4]))) for i in range(3) if i != keep]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        total.backward()
        grads.append(m.heads.w1.grad.copy())
    np.testing.assert_array_equal(grads[0][0], grads[1][0])
    np.testing.assert_array_equal(grads[0][2], grads[1][2])
    assert np.all(grads[1][1] == 0.0)


# ---------------------------------------------------------------- features

def test_extracted_features_width_and_copy():
    m = toy(h=4, layers=2)
    x = np.random.default_rng(0).normal(size=(6, 3))
    f = extract_decoar_features(m, x)
    assert f.shape == (6, 8) and isinstance(f, np.ndarray)
    f[:] = 0.0
    assert not np.all(extract_decoar_features(m, x) == 0.0)


def test_reconstruction_shape_and_errors():
    m = toy(slice_size=3)
    x = np.random.default_rng(1).normal(size=(7, 3))
    r = reconstruct_spectrogram(m, x, 1)
    assert r.shape == (5, 3) and np.all(np.isfinite(r))
    errs = reconstruction_errors(m, x, [0, 2])
    assert errs[2] == pytest.approx(np.mean(np.abs(reconstruct_spectrogram(m, x, 2) - x[2:7])))


def test_masking_semantics_by_configuration():
    # unidirectional: prediction from start t ignores frames after t
    uni = toy(slice_size=4, layers=2, bi=False, seed=2)
    x = np.random.default_rng(3).normal(size=(9, 3))
    y = x.copy()
    t = 2
    y[t + 1 : t + 4] += 5.0
    for i in range(1, 4):
        a = reconstruct_spectrogram(uni, x, i)[t]
        b = reconstruct_spectrogram(uni, y, i)[t]
        np.testing.assert_array_equal(a, b)
    # bidirectional: the encoder reads the whole sequence, so the same change moves the prediction
    bi = toy(slice_size=4, layers=2, bi=True, seed=2)
    assert not np.allclose(reconstruct_spectrogram(bi, x, 1)[t], reconstruct_spectrogram(bi, y, 1)[t])


def test_checkpoint_paths_and_roundtrip(tmp_path):
    m = toy(slice_size=3, layers=2, seed=4)
    arrays = m.state_arrays()
    assert "decoar.encoder.layer2.bwd.f.w_h" in arrays
    assert {"decoar.head0.w1", "decoar.head2.b2"} <= set(arrays)
    m.save(tmp_path / "m.ckpt")
    back = DecoarModel.load(tmp_path / "m.ckpt")
    assert back.config == m.config
    x = np.random.default_rng(5).normal(size=(6, 3))
    assert utterance_loss(back, x).item() == utterance_loss(m, x).item()
