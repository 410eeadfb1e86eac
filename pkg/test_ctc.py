# 📄 test_ctc.py
import itertools
import math

import numpy as np
import pytest

from config import DecodeConfig
from ctc import beam_decode, ctc_log_likelihood, ctc_loss, greedy_decode, min_frames
from errors import DataError, ShapeError
from numerics import Tensor, grad_check


def collapse(path):
    out, prev = [], None
    for c in path:
        if c != prev and c != 0:
            out.append(c)
        prev = c
    return tuple(out)


def labeling_posteriors(probs):
    """Sum of path probabilities per collapsed labeling, by enumerating every path."""
    T, V1 = probs.shape
    totals = {}
    for path in itertools.product(range(V1), repeat=T):
        p = math.prod(probs[t, c] for t, c in enumerate(path))
        key = collapse(path)
        totals[key] = totals.get(key, 0.0) + p
    return totals


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def one_hot(indices, V1, hot=5.0):
    z = np.zeros((len(indices), V1))
    z[np.arange(len(indices)), indices] = hot
    return z


class TestCtcLoss:
    def test_matches_alignment_enumeration(self):
        rng = np.random.default_rng(0)
        checked = 0
        for T in range(1, 6):
            for V in range(1, 5):
                z = rng.normal(size=(T, V + 1)) * 2.0
                totals = labeling_posteriors(softmax(z))
                for n in range(4):
                    for labels in itertools.product(range(1, V + 1), repeat=n):
                        if min_frames(labels) > T:
                            continue
                        expected = -math.log(totals.get(labels, 0.0))
                        assert abs(ctc_loss(Tensor(z), labels).item() - expected) < 1e-8
                        checked += 1
        assert checked == 420

    def test_single_frame(self):
        z = np.array([[0.3, 1.2, -0.5]])
        p = softmax(z)
        assert ctc_loss(Tensor(z), [1]).item() == pytest.approx(-math.log(p[0, 1]), abs=1e-12)

    def test_two_frames_one_label(self):
        z = np.array([[0.1, 0.7], [-0.4, 0.2]])
        p = softmax(z)
        expected = -math.log(p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1])
        assert ctc_loss(Tensor(z), [1]).item() == pytest.approx(expected, abs=1e-12)

    def test_empty_labels_is_all_blank_path(self):
        z = np.random.default_rng(1).normal(size=(4, 3))
        expected = -np.log(softmax(z)[:, 0]).sum()
        assert ctc_loss(Tensor(z), []).item() == pytest.approx(expected, abs=1e-12)

    def test_repeats_need_a_blank_between(self):
        assert min_frames([1, 1]) == 3
        assert min_frames([1, 2, 2, 2]) == 6
        with pytest.raises(DataError) as info:
            ctc_loss(Tensor(np.zeros((2, 3))), [1, 1])
        assert "T=3" in info.value.detail
        assert ctc_log_likelihood(np.zeros((2, 3)), [1, 1]) == -math.inf

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            ctc_loss(Tensor(np.zeros((4, 3))), [3])
        with pytest.raises(DataError):
            ctc_loss(Tensor(np.zeros((4, 3))), [0])

    def test_needs_a_matrix(self):
        with pytest.raises(ShapeError):
            ctc_loss(Tensor(np.zeros(4)), [1])


class TestCtcGradient:
    def test_matches_finite_differences(self):
        z = np.random.default_rng(2).uniform(-1, 1, size=(4, 3))
        report = grad_check(lambda t: ctc_loss(t, [1, 2]), [z])
        assert report.max_rel_error < 1e-4
        assert report.checked == 12

    def test_gradient_rows_sum_to_zero(self):
        z = Tensor(np.random.default_rng(3).normal(size=(6, 4)), requires_grad=True)
        ctc_loss(z, [2, 2, 3]).backward()
        np.testing.assert_allclose(z.grad.sum(axis=1), 0.0, atol=1e-12)


class TestGreedyDecode:
    def test_collapse_then_drop_blanks(self):
        assert greedy_decode(one_hot([1, 1, 0, 2], 3)) == [1, 2]

    def test_blank_separates_repeats(self):
        assert greedy_decode(one_hot([1, 0, 1], 3)) == [1, 1]

    def test_all_blank(self):
        assert greedy_decode(one_hot([0, 0, 0], 3)) == []

    def test_ties_go_to_lowest_index(self):
        assert greedy_decode(np.array([[0.0, 1.0, 1.0]])) == [1]

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            z = rng.normal(size=(int(rng.integers(1, 12)), 5))
            shift = rng.normal(size=(z.shape[0], 1))
            assert greedy_decode(2.0 * z ** 3 + shift) == greedy_decode(z)
            assert greedy_decode(np.exp(z)) == greedy_decode(z)


class TestBeamDecode:
    def test_saturating_beam_finds_posterior_argmax(self):
        rng = np.random.default_rng(5)
        cfg = DecodeConfig(beam=1000)
        for _ in range(60):
            T, V = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            z = rng.normal(size=(T, V + 1)) * 1.5
            totals = labeling_posteriors(softmax(z))
            best = max(totals, key=lambda y: (totals[y], [-c for c in y]))
            hyp, score = beam_decode(z, cfg)
            assert tuple(hyp) == best
            assert score == pytest.approx(math.log(totals[best]), abs=1e-9)
            assert score == pytest.approx(ctc_log_likelihood(z, hyp), abs=1e-9)

    def test_single_frame(self):
        assert beam_decode(np.array([[0.0, 2.0, 1.0]]), DecodeConfig(beam=4))[0] == [1]
        assert beam_decode(np.array([[3.0, 2.0, 1.0]]), DecodeConfig(beam=4))[0] == []

    def test_insertion_bonus_prefers_longer(self):
        # "" and "a" carry equal posterior mass on this frame.
        z = np.array([[0.0, 0.0]])
        assert beam_decode(z, DecodeConfig(beam=4))[0] == []
        assert beam_decode(z, DecodeConfig(beam=4, insertion_bonus=2.0))[0] == [1]
        assert beam_decode(z, DecodeConfig(beam=4, insertion_bonus=-2.0))[0] == []

    def test_beam_one_is_deterministic(self):
        z = np.random.default_rng(6).normal(size=(8, 4))
        assert beam_decode(z, DecodeConfig(beam=1)) == beam_decode(z, DecodeConfig(beam=1))

    def test_lm_needs_vocab(self):
        from lm import NgramLM
        lm = NgramLM.train([["a", "b"]], order=2)
        with pytest.raises(DataError):
            beam_decode(np.zeros((2, 3)), DecodeConfig(lm_weight=1.0), lm=lm)

    def test_lm_pulls_towards_likely_sequences(self):
        from lm import NgramLM
        lm = NgramLM.train([["a", "b"]] * 20 + [["b", "a"]], order=2)
        # Acoustically "ba" is ahead of "ab".
        z = np.log(np.array([[0.02, 0.38, 0.60], [0.02, 0.60, 0.38]]))
        plain, _ = beam_decode(z, DecodeConfig(beam=8))
        fused, _ = beam_decode(z, DecodeConfig(beam=8, lm_weight=2.0), lm=lm, vocab=["a", "b"])
        assert plain == [2, 1]
        assert fused == [1, 2]
