import itertools
import time

import numpy as np
import pytest

from flexdepth import autodiff as ad
from flexdepth import ctc


def random_log_probs(rng, T, V):
    logits = rng.standard_normal((T, V)) * 2.0
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def collapse(path):
    out = []
    prev = -1
    for sym in path:
        if sym != prev and sym != 0:
            out.append(sym)
        prev = sym
    return out


def brute_force_nll(logp, labels):
    """Enumerate every frame sequence and logsumexp those collapsing to labels."""
    T, V = logp.shape
    total = -np.inf
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == list(labels):
            total = np.logaddexp(total, sum(logp[t, path[t]] for t in range(T)))
    return -total


def dp_nll(logp, labels):
    tape = ad.Tape(recording=False)
    return float(ctc.ctc_loss(tape.leaf(logp), labels).values)


def test_single_frame_single_label():
    rng = np.random.default_rng(0)
    logp = random_log_probs(rng, 1, 4)
    assert dp_nll(logp, [2]) == pytest.approx(-logp[0, 2])


def test_two_frames_empty_labels():
    rng = np.random.default_rng(1)
    logp = random_log_probs(rng, 2, 4)
    assert dp_nll(logp, []) == pytest.approx(-(logp[0, 0] + logp[1, 0]))


def test_three_frames_two_labels_matches_enumeration():
    rng = np.random.default_rng(2)
    logp = random_log_probs(rng, 3, 4)
    assert dp_nll(logp, [1, 2]) == pytest.approx(brute_force_nll(logp, [1, 2]),
                                                 abs=1e-9)


def test_oracle_equivalence_200_instances():
    rng = np.random.default_rng(1234)
    t0 = time.monotonic()
    for _ in range(200):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        S = int(rng.integers(0, 4))
        labels = [int(rng.integers(1, V)) for _ in range(S)]
        logp = random_log_probs(rng, T, V)
        got = dp_nll(logp, labels)
        want = brute_force_nll(logp, labels)
        if np.isinf(want):
            assert np.isinf(got)
        else:
            assert abs(got - want) < 1e-9
    assert time.monotonic() - t0 < 30.0


def test_too_short_is_infinite_not_a_crash():
    rng = np.random.default_rng(3)
    logp = random_log_probs(rng, 2, 4)
    assert np.isinf(dp_nll(logp, [1, 2, 3]))
    # adjacent repeats need a separating blank frame
    assert np.isinf(dp_nll(logp, [1, 1]))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    for labels in ([1], [1, 2], [2, 2, 1], []):
        logp = random_log_probs(rng, 5, 4)
        rep = ad.finite_difference_check(
            lambda t: ctc.ctc_loss(t, labels), logp)
        assert rep.passed, f"labels={labels}: rel err {rep.max_rel_err}"


def test_batch_loss_mean_and_skips():
    rng = np.random.default_rng(5)
    T, V = 6, 5
    lp = np.stack([random_log_probs(rng, T, V) for _ in range(3)])
    lengths = [6, 4, 2]
    labels = [[1, 2], [3], [1, 2, 3, 4]]  # last one unalignable in 2 frames
    tape = ad.Tape()
    leaf = tape.leaf(lp, requires_grad=True)
    res = ctc.ctc_loss_batch(leaf, lengths, labels)
    assert res.skipped == [2]
    expect = (dp_nll(lp[0], [1, 2]) + dp_nll(lp[1, :4], [3])) / 2
    assert float(res.loss.values) == pytest.approx(expect)
    ad.backward(tape, res.loss)
    # gradient confined to used rows and valid frames
    assert np.all(leaf.grad[2] == 0)
    assert np.all(leaf.grad[1, 4:] == 0)
    assert np.any(leaf.grad[0] != 0)


def test_batch_gradient_matches_single():
    rng = np.random.default_rng(6)
    lp = random_log_probs(rng, 5, 4)

    def single(t):
        return ctc.ctc_loss(t, [1, 3])

    def batched(t):
        t3 = ad.reshape(t, (1, 5, 4))
        return ctc.ctc_loss_batch(t3, [5], [[1, 3]]).loss

    r1 = ad.finite_difference_check(single, lp)
    r2 = ad.finite_difference_check(batched, lp)
    assert r1.passed and r2.passed


def test_shift_invariance_through_log_softmax():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((5, 4))
    shift = rng.standard_normal((5, 1))  # constant per frame
    losses = []
    for raw in (logits, logits + shift):
        tape = ad.Tape(recording=False)
        lp = ad.log_softmax(tape.leaf(raw), axis=-1)
        losses.append(float(ctc.ctc_loss(lp, [1, 2]).values))
    assert abs(losses[0] - losses[1]) <= 1e-10


def test_lattice_terminal_logsumexp():
    rng = np.random.default_rng(8)
    logp = random_log_probs(rng, 5, 4)
    lat = ctc.ctc_lattice(logp, [1, 2])
    assert lat.log_prob == pytest.approx(-brute_force_nll(logp, [1, 2]))
    assert list(lat.extended) == [0, 1, 0, 2, 0]


def test_greedy_decode_collapse():
    V = 4

    def logp_for(path):
        lp = np.full((len(path), V), -10.0)
        for t, sym in enumerate(path):
            lp[t, sym] = 0.0
        return lp

    assert ctc.greedy_decode(logp_for([1, 1, 0, 2])) == [1, 2]
    assert ctc.greedy_decode(logp_for([0, 0, 0])) == []
    assert ctc.greedy_decode(logp_for([1, 0, 1])) == [1, 1]


def test_label_error_rate():
    assert ctc.label_error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert ctc.label_error_rate([], [1, 2, 3]) == 1.0
    assert ctc.label_error_rate([1, 2, 3], [1, 3]) == 0.5
    with pytest.raises(ValueError):
        ctc.label_error_rate([1], [])


def test_labels_must_avoid_blank():
    rng = np.random.default_rng(9)
    logp = random_log_probs(rng, 3, 4)
    tape = ad.Tape(recording=False)
    with pytest.raises(ValueError):
        ctc.ctc_loss(tape.leaf(logp), [0, 1])
