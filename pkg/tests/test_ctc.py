import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxadapt import tensor_core as tc
from ctxadapt.ctc import (BLANK, InfeasibleAlignment, InstanceTooLarge, collapse, ctc_brute_force, ctc_loss,
                          greedy_decode, min_frames)
from ctxadapt.tensor_core import Tensor, grad_check


def random_lattice(rng, t, v):
    x = rng.normal(size=(t, v)) * 2.0
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def random_instance(rng):
    while True:
        t, v, u = int(rng.integers(1, 7)), int(rng.integers(2, 6)), int(rng.integers(0, 4))
        y = [int(a) for a in rng.integers(1, v, size=u)]
        if min_frames(y) <= t:
            return random_lattice(rng, t, v), y


UNIFORM3 = np.log(np.full((1, 3), 1 / 3))


class TestLoss:
    def test_single_frame_single_label(self):
        assert ctc_loss(UNIFORM3, [1]).item() == pytest.approx(math.log(3), abs=1e-12)

    def test_two_frames_three_alignments(self):
        lattice = np.log(np.full((2, 3), 1 / 3))
        # alignments a a, a -, - a each have probability 1/9
        assert ctc_loss(lattice, [1]).item() == pytest.approx(-math.log(3 / 9), abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            lp, y = random_instance(rng)
            assert ctc_loss(lp, y).item() == pytest.approx(ctc_brute_force(lp, y), abs=1e-8)

    def test_empty_target(self):
        rng = np.random.default_rng(2)
        lp = random_lattice(rng, 3, 3)
        assert ctc_loss(lp, []).item() == pytest.approx(-lp[:, BLANK].sum(), abs=1e-12)

    def test_repeat_needs_blank(self):
        lp = np.log(np.full((2, 3), 1 / 3))
        with pytest.raises(InfeasibleAlignment):
            ctc_loss(lp, [1, 1])
        assert math.isfinite(ctc_loss(np.log(np.full((3, 3), 1 / 3)), [1, 1]).item())

    def test_infeasible(self):
        with pytest.raises(InfeasibleAlignment):
            ctc_loss(UNIFORM3, [1, 2])

    def test_label_range(self):
        with pytest.raises(ValueError):
            ctc_loss(UNIFORM3, [0])

    def test_batch_with_padding_matches_individual(self):
        rng = np.random.default_rng(5)
        lats = [random_lattice(rng, t, 5) for t in (4, 6, 2)]
        ys = [[1, 2], [3, 3, 1], []]
        batch = np.full((3, 6, 5), np.log(0.2))
        for i, lp in enumerate(lats):
            batch[i, : lp.shape[0]] = lp
        out = ctc_loss(batch, ys, [4, 6, 2]).data
        for i, (lp, y) in enumerate(zip(lats, ys)):
            assert out[i] == pytest.approx(ctc_brute_force(lp, y), abs=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        _, y = random_instance(rng)
        t = max(min_frames(y), 1) + int(rng.integers(0, 3))
        logits = Tensor(rng.normal(size=(t, 4 if not y else max(y) + 1)), requires_grad=True)
        assert grad_check(lambda: ctc_loss(tc.log_softmax(logits), y), [logits]) < 1e-4

    def test_monotone_in_emission_score(self):
        # every path score is non-decreasing in each emission, so raising one never raises the loss;
        # renormalising the frame afterwards would break this (other target labels lose mass)
        rng = np.random.default_rng(7)
        for _ in range(30):
            lp, y = random_instance(rng)
            if not y:
                continue
            t, c = int(rng.integers(lp.shape[0])), int(rng.integers(lp.shape[1]))
            bumped = lp.copy()
            bumped[t, c] += np.log(1.5)
            assert ctc_loss(bumped, y).item() <= ctc_loss(lp, y).item() + 1e-12

    def test_renormalised_boost_can_raise_loss(self):
        lp = np.log(np.array([[0.4, 0.3, 0.3], [0.4, 0.3, 0.3]]))
        p = np.exp(lp)
        p[0, 1] *= 3.0
        p[0] /= p[0].sum()
        # with T=2 the only alignment is (1, 2), so boosting label 1 at frame 1 starves label 2
        q = np.exp(lp)
        q[1, 1] *= 3.0
        q[1] /= q[1].sum()
        assert ctc_loss(np.log(p), [1, 2]).item() < ctc_loss(lp, [1, 2]).item()
        assert ctc_loss(np.log(q), [1, 2]).item() > ctc_loss(lp, [1, 2]).item()


class TestBruteForce:
    def test_unreachable_is_infinite(self):
        assert ctc_brute_force(UNIFORM3, [1, 2]) == math.inf

    def test_empty_label_sums_all_blank_path(self):
        rng = np.random.default_rng(1)
        lp = random_lattice(rng, 3, 3)
        assert ctc_brute_force(lp, []) == pytest.approx(-lp[:, 0].sum(), abs=1e-12)

    def test_too_large(self):
        with pytest.raises(InstanceTooLarge):
            ctc_brute_force(np.zeros((12, 5)), [1])


class TestGreedy:
    def one_hot_lattice(self, path, v=4):
        lp = np.full((len(path), v), -5.0)
        lp[np.arange(len(path)), path] = 0.0
        return lp

    def test_collapse_runs(self):
        assert greedy_decode(self.one_hot_lattice([1, 1, 0, 2, 2])) == [1, 2]

    def test_all_blank(self):
        assert greedy_decode(self.one_hot_lattice([0, 0, 0])) == []

    def test_blank_separates_repeats(self):
        assert greedy_decode(self.one_hot_lattice([1, 0, 1])) == [1, 1]

    def test_ties_pick_lowest_id(self):
        assert greedy_decode(np.zeros((2, 4))) == []

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=12), st.integers(0, 11))
    def test_duplicating_a_frame_is_idempotent(self, path, pos):
        pos = pos % len(path)
        longer = path[: pos + 1] + [path[pos]] + path[pos + 1:]
        assert collapse(longer) == collapse(path)
        assert BLANK not in greedy_decode(self.one_hot_lattice(longer))
