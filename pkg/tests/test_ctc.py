import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctc_oracle import brute_loss, prefix_marginals, random_log_probs
from decoar.ctc import (
    CtcHead,
    CtcHeadConfig,
    CtcInfeasibleError,
    LabelVocabulary,
    cmu_phone_vocabulary,
    corpus_error_rate,
    ctc_batch_loss,
    ctc_grad,
    ctc_loss,
    ctc_occupancy,
    edit_distance,
    error_rate,
    format_decode_line,
    greedy_decode,
    min_frames,
    prefix_beam_decode,
)
from decoar.tensor import Tensor
from gradcheck import numeric_grad, rel_error

LOG_HALF = np.log(0.5)


def one_hot_log(path, C, eps=1e-300):
    lp = np.full((len(path), C), np.log(eps))
    lp[np.arange(len(path)), path] = 0.0
    return lp


def test_uniform_two_frame_example():
    lp = np.full((2, 2), LOG_HALF)
    assert ctc_loss(lp, [0]) == pytest.approx(-np.log(0.75), abs=1e-15)


def test_forced_alignment():
    rng = np.random.default_rng(0)
    lp = random_log_probs(rng, 3, 4)
    target = [2, 0, 1]
    assert ctc_loss(lp, target) == pytest.approx(-lp[[0, 1, 2], target].sum(), abs=1e-12)
    gamma, _ = ctc_occupancy(lp, target)
    np.testing.assert_allclose(gamma, np.eye(4)[target], atol=1e-12)


def test_infeasible_target_is_explicit():
    lp = np.full((2, 3), np.log(1 / 3))
    assert min_frames([0, 0]) == 3
    with pytest.raises(CtcInfeasibleError) as err:
        ctc_loss(lp, [0, 0])
    assert err.value.loss == np.inf


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 5), V=st.integers(1, 3), data=st.data())
def test_dp_matches_brute_force(T, V, data):
    target = data.draw(st.lists(st.integers(0, V - 1), min_size=1, max_size=3))
    if min_frames(target) > T:
        return
    lp = random_log_probs(np.random.default_rng(data.draw(st.integers(0, 2**32 - 1))), T, V + 1)
    assert ctc_loss(lp, target) == pytest.approx(brute_loss(lp, target), abs=1e-10)


def test_gradient_rows_sum_to_zero_and_match_finite_differences():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 3))
    target = [0, 1]

    def loss_of_logits():
        lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        return brute_loss(lp, target)

    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    g = ctc_grad(lp, target)
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)
    (num,) = numeric_grad(loss_of_logits, [logits])
    assert rel_error(g, num) < 1e-4


def test_batch_loss_op_gradient():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.normal(size=(4, 2, 3)), requires_grad=True)
    targets, lengths = [[0, 1], [1]], [4, 3]
    loss = ctc_batch_loss(logits, targets, lengths)
    loss.backward()

    def f():
        x = logits.data
        lp = x - np.log(np.exp(x).sum(-1, keepdims=True))
        return sum(ctc_loss(lp[:n, b], t) for b, (t, n) in enumerate(zip(targets, lengths)))

    (num,) = numeric_grad(f, [logits.data])
    assert rel_error(logits.grad, num) < 1e-4
    assert np.all(logits.grad[3, 1] == 0.0)


def test_extreme_probabilities_do_not_nan():
    lp = np.full((6, 3), -700.0)
    lp[:, 2] = 0.0
    lp[2, 0], lp[4, 1] = 0.0, 0.0
    loss = ctc_loss(lp, [0, 1])
    assert np.isfinite(loss)
    assert np.all(np.isfinite(ctc_grad(lp, [0, 1])))


def test_appending_certain_blank_frame_keeps_likelihood():
    rng = np.random.default_rng(5)
    lp = random_log_probs(rng, 4, 3)
    blank_row = np.array([[np.log(1e-300), np.log(1e-300), 0.0]])
    for target in ([0], [0, 1], [1, 1]):
        a = ctc_loss(lp, target)
        b = ctc_loss(np.vstack([lp, blank_row]), target)
        assert a == pytest.approx(b, abs=1e-10)


# -------------------------------------------------------------------- decoding

def test_greedy_collapse_rules():
    C = 3  # a=0, b=1, blank=2
    assert greedy_decode(one_hot_log([0, 0, 2, 1], C)) == [0, 1]
    assert greedy_decode(one_hot_log([2, 2, 2], C)) == []
    assert greedy_decode(one_hot_log([0, 2, 0], C)) == [0, 0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=10))
def test_greedy_recovers_one_hot_path(path):
    from ctc_oracle import collapse

    assert tuple(greedy_decode(one_hot_log(path, 4))) == collapse(path, 3)


def test_beam_width_one_equals_greedy_when_argmax_dominates():
    rng = np.random.default_rng(6)
    for _ in range(30):
        path = rng.integers(0, 4, size=8)
        lp = np.log(np.full((8, 4), 0.02))
        lp[np.arange(8), path] = np.log(0.94)
        assert prefix_beam_decode(lp, 1) == greedy_decode(lp)


def test_exhaustive_beam_matches_marginal_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        lp = random_log_probs(rng, 3, 3, peak=2.0)
        marg = prefix_marginals(lp)
        best = max(marg.items(), key=lambda kv: (kv[1], tuple(-x for x in kv[0])))
        vals = sorted(marg.values(), reverse=True)
        if len(vals) > 1 and vals[0] - vals[1] < 1e-9:
            continue
        assert tuple(prefix_beam_decode(lp, None)) == best[0]
        assert tuple(prefix_beam_decode(lp, 64)) == best[0]


def test_beam_ties_break_lexicographically():
    # two labels with exactly equal probability, one frame
    lp = np.log(np.array([[0.4, 0.4, 0.2]]))
    assert prefix_beam_decode(lp, 4) == [0]
    with pytest.raises(ValueError):
        prefix_beam_decode(lp, 0)


# --------------------------------------------------------------------- scoring

def test_edit_distance_examples():
    assert edit_distance("cat", "cut") == (1, 1, 0, 0)
    assert edit_distance("abc", "abc").distance == 0
    assert edit_distance("ab", "ba").distance == 2
    assert edit_distance("abc", "") == (3, 0, 0, 3)
    assert edit_distance("", "xy") == (2, 0, 2, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
def test_edit_distance_breakdown_is_consistent(ref, hyp):
    c = edit_distance(ref, hyp)
    assert c.distance == c.substitutions + c.insertions + c.deletions
    assert len(ref) - c.deletions + c.insertions == len(hyp)
    assert c.distance == edit_distance(hyp, ref).distance


def test_error_rates():
    assert error_rate([1, 2], [1, 2]) == 0.0
    assert error_rate([], [1]) == np.inf
    assert corpus_error_rate([[1, 2], [3]], [[1], [3]]) == pytest.approx(100 / 3)


# ------------------------------------------------------------------ vocab/head

def test_vocabulary_blank_and_file_roundtrip(tmp_path):
    v = LabelVocabulary(("a", "b", "c"))
    assert v.blank_index == 3 and v.num_classes == 4
    v.save(tmp_path / "v.txt")
    assert LabelVocabulary.load(tmp_path / "v.txt") == v
    with pytest.raises(ValueError):
        LabelVocabulary(("a", "a"))
    with pytest.raises(ValueError):
        v.encode(["z"])
    assert format_decode_line("u1", v, [2, 0]) == "u1\tc a"


def test_cmu_inventory_size():
    v = cmu_phone_vocabulary()
    assert len(v.symbols) == 71 and v.num_classes == 72


def test_head_shapes_and_checkpoint(tmp_path):
    head = CtcHead(CtcHeadConfig(input_dim=6, num_classes=5, proj_dim=4, hidden_dim=3), seed=1)
    xs = [np.random.default_rng(0).normal(size=(n, 6)) for n in (5, 3)]
    lps = head.log_probs(xs)
    assert [lp.shape for lp in lps] == [(5, 5), (3, 5)]
    np.testing.assert_allclose(np.exp(lps[0]).sum(1), 1.0)
    head.save(tmp_path / "h.ckpt")
    back = CtcHead.load(tmp_path / "h.ckpt")
    for a, b in zip(lps, back.log_probs(xs)):
        assert a.tobytes() == b.tobytes()


def test_head_loss_gradcheck():
    head = CtcHead(CtcHeadConfig(input_dim=3, num_classes=3, proj_dim=2, hidden_dim=2), seed=2)
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=(4, 3)), rng.normal(size=(3, 3))]
    targets = [[0, 1], [1]]
    params = head.named_parameters()
    head.batch_loss(xs, targets).backward()
    names = sorted(params)
    nums = numeric_grad(lambda: head.batch_loss(xs, targets).item(), [params[n].data for n in names])
    for n, g in zip(names, nums):
        assert rel_error(params[n].grad, g) < 1e-4, n
