import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decoar.ctc import CtcHead, CtcHeadConfig
from decoar.model import DecoarConfig, DecoarModel, utterance_loss
from decoar.tensor import Tensor
from decoar.trainer import (
    NoamSchedule,
    NonFiniteGradientError,
    TrainOptions,
    TrainState,
    clip_by_global_norm,
    collect_grads,
    decoar_features,
    format_metrics,
    length_batches,
    load_best_model,
    load_pretrain_checkpoint,
    lr_at,
    sgd_step,
    train_finetune,
    train_pretrain,
)

SMALL = DecoarConfig(slice_size=3, hidden_dim=4, num_layers=2, ffn_hidden=6, feature_dim=3)


def pool(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(int(rng.integers(4, 12)), 3)) for _ in range(n)]


def test_noam_examples():
    s = NoamSchedule()
    assert lr_at(s, 500) == 0.001
    assert lr_at(s, 250) == 0.0005
    assert lr_at(s, 2000) == 0.0005
    with pytest.raises(ValueError):
        lr_at(s, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000))
def test_noam_shape(step):
    s = NoamSchedule()
    lr = lr_at(s, step)
    assert 0 < lr <= 0.001
    if step < 500:
        assert lr < lr_at(s, step + 1)
    else:
        assert lr_at(s, step + 1) < lr


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 200), min_size=1, max_size=60), st.integers(1, 9), st.integers(0, 99), st.integers(0, 5))
def test_length_batches_invariants(lengths, bs, seed, epoch):
    plan = length_batches(lengths, bs, seed, epoch)
    flat = sorted(k for b in plan for k in b)
    assert flat == list(range(len(lengths)))
    for b in plan:
        assert 1 <= len(b) <= bs
        ls = [lengths[k] for k in b]
        assert max(ls) <= 2 * min(ls)
    assert plan == length_batches(lengths, bs, seed, epoch)


def test_sgd_examples():
    p = {"w": Tensor(np.array([1.0]), True), "f": Tensor(np.array([1.0]), True)}
    sgd_step(p, {"w": np.array([2.0]), "f": np.array([3.0])}, 0.1, frozen={"f"})
    assert p["w"].data[0] == pytest.approx(0.8)
    assert p["f"].data[0] == 1.0
    before = p["w"].data.copy()
    sgd_step(p, {"w": np.zeros(1)}, 0.1)
    assert p["w"].data.tobytes() == before.tobytes()


def test_nan_gradient_aborts_with_diagnostics():
    p = {"enc.w": Tensor(np.ones(2), True)}
    with pytest.raises(NonFiniteGradientError, match=r"step 7.*enc\.w.*loss=1\.5"):
        sgd_step(p, {"enc.w": np.array([0.0, np.nan])}, 0.1, step=7, loss=1.5)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 5.0) == 5.0
    assert g["a"][0] == 3.0
    clip_by_global_norm(g, 1.0)
    assert math.isclose(math.hypot(g["a"][0], g["b"][0]), 1.0)


def test_momentum_velocity_accumulates():
    p = {"w": Tensor(np.array([0.0]), True)}
    vel: dict = {}
    for _ in range(2):
        sgd_step(p, {"w": np.array([1.0])}, 1.0, momentum=0.5, velocity=vel)
    assert p["w"].data[0] == pytest.approx(-(1.0 + 1.5))


# -------------------------------------------------------- gradient accumulation

def test_batch_gradient_equals_sum_of_utterance_gradients():
    model = DecoarModel(SMALL, seed=1)
    xs = pool(4, seed=2)
    params = model.named_parameters()
    model.batch_loss(xs)[0].backward()
    batched = collect_grads(params)
    summed = {k: np.zeros_like(v) for k, v in batched.items()}
    for x in xs:
        utterance_loss(model, x).backward()
        for k, g in collect_grads(params).items():
            summed[k] += g
    for k in batched:
        np.testing.assert_allclose(batched[k], summed[k], rtol=0, atol=1e-12)


def test_ctc_batch_gradient_equals_sum_of_utterance_gradients():
    head = CtcHead(CtcHeadConfig(input_dim=3, num_classes=4, proj_dim=3, hidden_dim=3), seed=0)
    rng = np.random.default_rng(3)
    xs = [rng.normal(size=(n, 3)) for n in (6, 4, 5)]
    ts = [[0, 1], [2], [1, 1]]
    params = head.named_parameters()
    head.batch_loss(xs, ts).backward()
    batched = collect_grads(params)
    summed = {k: np.zeros_like(v) for k, v in batched.items()}
    for x, t in zip(xs, ts):
        head.batch_loss([x], [t]).backward()
        for k, g in collect_grads(params).items():
            summed[k] += g
    for k in batched:
        np.testing.assert_allclose(batched[k], summed[k], rtol=0, atol=1e-12)


# ---------------------------------------------------------------- pretraining

def opts(**kw):
    base = dict(epochs=3, batch_size=3, schedule=NoamSchedule(0.01, 5), seed=4)
    base.update(kw)
    return TrainOptions(**base)


def test_zero_lr_leaves_parameters_unchanged():
    x = pool(1)
    model = DecoarModel(SMALL, seed=0)
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    train_pretrain(x, SMALL, opts(epochs=1, schedule=NoamSchedule(0.0, 5)), model=model)
    after = model.state_arrays()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_pretraining_is_deterministic_and_logs_each_epoch():
    a = train_pretrain(pool(), SMALL, opts(), pool(3, seed=9))
    b = train_pretrain(pool(), SMALL, opts(), pool(3, seed=9))
    assert a.loss_curve == b.loss_curve and len(a.loss_curve) == 3
    assert all(np.isfinite(a.loss_curve))
    for k, v in a.model.state_arrays().items():
        assert v.tobytes() == b.model.state_arrays()[k].tobytes()


def test_short_sequences_are_skipped_and_counted():
    seqs = pool(5) + [np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((3, 3))]
    r = train_pretrain(seqs, SMALL, opts(epochs=1))
    assert r.skipped == 2
    with pytest.raises(ValueError):
        train_pretrain([np.zeros((2, 3))], SMALL, opts(epochs=1))


def test_resume_mid_epoch_is_bit_exact(tmp_path):
    full = train_pretrain(pool(), SMALL, opts(momentum=0.9), pool(3, seed=9))
    ck = tmp_path / "pre.ckpt"
    part = train_pretrain(pool(), SMALL, opts(momentum=0.9), pool(3, seed=9), checkpoint_path=ck,
                          stop_after_steps=5)
    assert part.state.step == 5 and part.state.batch_in_epoch > 0
    model, state = load_pretrain_checkpoint(ck)
    resumed = train_pretrain(pool(), SMALL, opts(momentum=0.9), pool(3, seed=9), model=model, state=state,
                             checkpoint_path=ck)
    assert resumed.state.step == full.state.step
    assert resumed.loss_curve == full.loss_curve
    for k, v in full.model.state_arrays().items():
        assert v.tobytes() == resumed.model.state_arrays()[k].tobytes()
    best = load_best_model(ck)
    for k, v in full.best_model.state_arrays().items():
        assert v.tobytes() == best.state_arrays()[k].tobytes()


def test_train_state_roundtrip():
    st_ = TrainState(step=3, epoch=1, batch_in_epoch=2, seed=5, epoch_loss=1.25, epoch_count=4, best_metric=0.5,
                     history=[{"epoch": 1, "step": 3, "mean_loss": 2.0, "dev_metric": 1.0, "lr": 0.1}],
                     velocity={"w": np.arange(3.0)})
    back = TrainState.from_arrays(st_.to_arrays())
    assert (back.step, back.epoch, back.batch_in_epoch, back.seed) == (3, 1, 2, 5)
    assert back.history == st_.history and back.best_metric == 0.5
    np.testing.assert_array_equal(back.velocity["w"], np.arange(3.0))


def test_metrics_log_format():
    text = format_metrics([{"epoch": 1, "step": 10, "mean_loss": 2.5, "dev_metric": 40.0, "lr": 0.001}])
    lines = text.splitlines()
    assert lines[0].split("\t") == ["epoch", "step", "mean_loss", "dev_metric", "lr"]
    assert lines[1].split("\t")[:2] == ["1", "10"]


# ----------------------------------------------------------------- finetuning

def test_finetune_freezes_encoder_and_accepts_both_widths():
    model = DecoarModel(SMALL, seed=0)
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=(8, 3)) for _ in range(4)]
    ts = [[0, 1], [1], [2, 0], [1, 2]]
    feats = decoar_features(model, xs)
    assert feats[0].shape == (8, 8)
    o = opts(epochs=2, batch_size=2)
    r_dec = train_finetune(feats, ts, CtcHeadConfig(8, 4, 5, 3), o, feats[:2], ts[:2])
    r_fb = train_finetune(xs, ts, CtcHeadConfig(3, 4, 5, 3), o, xs[:2], ts[:2])
    assert len(r_dec.state.history) == 2 and np.isfinite(r_fb.dev_per)
    after = model.state_arrays()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_finetune_returns_best_dev_head():
    rng = np.random.default_rng(2)
    xs = [rng.normal(size=(8, 3)) for _ in range(4)]
    ts = [[0, 1], [1], [2, 0], [1, 2]]
    r = train_finetune(xs, ts, CtcHeadConfig(3, 4, 5, 3), opts(epochs=3, batch_size=2), xs, ts)
    assert r.dev_per == min(h["dev_metric"] for h in r.state.history)
    from decoar.trainer import decode_per

    assert decode_per(r.head, xs, ts) == pytest.approx(r.dev_per)
