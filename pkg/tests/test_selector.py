import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfhrl.envs import slip_chain
from mfhrl.fidelity import BudgetLedger, build_family, charge
from mfhrl.mdp import Batch
from mfhrl.selector import (BudgetExhausted, EmptyBuffer, HistoryBuffer, PosteriorBelief,
                            SelectorConfig, entropy, expected_posterior_entropy, information_gain,
                            map_policy, posterior_update, select_fidelity)

LN2 = math.log(2)
H_21 = -(2 / 3) * math.log(2 / 3) - (1 / 3) * math.log(1 / 3)

probs = st.lists(st.floats(0.01, 10), min_size=2, max_size=6).map(
    lambda xs: PosteriorBelief(np.array(xs) / np.sum(xs)))


def loss_vectors(n):
    return st.lists(st.floats(-20, 20), min_size=n, max_size=n)


class Member:
    def __init__(self, index, policy=None):
        self.index = index
        self.policy = policy


def table_loss(table):
    """Loss lookup keyed by (member index, batch round)."""
    return lambda member, batch: table[member.index][batch.round]


def batch(round, fidelity=1):
    return Batch([0], [0], [0.0], [0], fidelity=fidelity, round=round)


def family(costs=(1, 4)):
    return build_family(slip_chain(), [2.0] * (len(costs) - 1) + [1.0], list(costs))


class TestPosterior:
    def test_hand_update(self):
        p = posterior_update(PosteriorBelief.uniform(2), [0.0, LN2], 1.0)
        assert p.probs == pytest.approx([2 / 3, 1 / 3], abs=1e-15)
        assert p.round == 1

    def test_equal_losses(self):
        p = PosteriorBelief(np.array([0.2, 0.3, 0.5]))
        assert np.allclose(posterior_update(p, [4.0, 4.0, 4.0]).probs, p.probs, atol=1e-15)

    def test_rejects_bad_losses(self):
        with pytest.raises(ValueError):
            posterior_update(PosteriorBelief.uniform(2), [0.0, np.inf])
        with pytest.raises(ValueError):
            posterior_update(PosteriorBelief.uniform(2), [0.0])
        with pytest.raises(ValueError):
            PosteriorBelief(np.array([0.5, 0.6]))
        with pytest.raises(ValueError):
            SelectorConfig(eta=0.0)

    def test_extreme_losses_stay_finite(self):
        p = posterior_update(PosteriorBelief.uniform(3), [1e6, 0.0, 2e6])
        assert p.probs.tolist() == [0.0, 1.0, 0.0]

    @given(probs, st.data())
    @settings(max_examples=100, deadline=None)
    def test_normalised(self, p, data):
        q = posterior_update(p, data.draw(loss_vectors(p.probs.size)), 1.0)
        assert abs(q.probs.sum() - 1) <= 1e-12 and np.all(q.probs >= 0)

    @given(probs, st.data(), st.floats(0.1, 3))
    @settings(max_examples=100, deadline=None)
    def test_associative(self, p, data, eta):
        n = p.probs.size
        a = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=n, max_size=n)))
        b = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=n, max_size=n)))
        two = posterior_update(posterior_update(p, a, eta), b, eta)
        one = posterior_update(p, a + b, eta)
        assert np.allclose(two.probs, one.probs, rtol=0, atol=1e-12)

    @given(probs, st.data(), st.floats(-100, 100))
    @settings(max_examples=100, deadline=None)
    def test_constant_shift(self, p, data, c):
        losses = np.array(data.draw(loss_vectors(p.probs.size)))
        assert np.allclose(posterior_update(p, losses).probs, posterior_update(p, losses + c).probs,
                           rtol=0, atol=1e-12)


class TestEntropy:
    def test_examples(self):
        assert entropy(PosteriorBelief.uniform(3)) == pytest.approx(1.098612, abs=1e-6)
        assert entropy(np.array([0.0, 1.0, 0.0])) == 0.0
        assert entropy(np.array([0.5, 0.25, 0.25])) == pytest.approx(1.5 * LN2, abs=1e-15)
        assert H_21 == pytest.approx(0.636514, abs=1e-6)

    def test_expected_entropy_no_update(self):
        ens = [Member(0), Member(1)]
        p = PosteriorBelief(np.array([0.3, 0.7]))
        val = expected_posterior_entropy(p, [batch(0), batch(1)], ens, 1.0, lambda m, b: 3.0)
        assert val == pytest.approx(entropy(p), abs=1e-15)

    def test_expected_entropy_average(self):
        ens = [Member(0), Member(1)]
        loss = table_loss({0: [0.0, 0.5], 1: [LN2, 0.5]})
        p = PosteriorBelief.uniform(2)
        single = expected_posterior_entropy(p, [batch(0)], ens, 1.0, loss)
        assert single == pytest.approx(H_21, abs=1e-12)
        both = expected_posterior_entropy(p, [batch(0), batch(1)], ens, 1.0, loss)
        assert both == pytest.approx(0.6648, abs=1e-4)
        assert both == pytest.approx((H_21 + LN2) / 2, abs=1e-15)

    def test_empty_buffer(self):
        with pytest.raises(EmptyBuffer):
            information_gain(PosteriorBelief.uniform(2), [], [Member(0), Member(1)], 1.0, lambda m, b: 0.0)


class TestInformationGain:
    def test_closed_form(self):
        ens = [Member(0), Member(1)]
        gain = information_gain(PosteriorBelief.uniform(2), [batch(0)], ens, 1.0,
                                table_loss({0: [0.0], 1: [LN2]}))
        assert gain == pytest.approx(0.056633, abs=1e-6)
        assert gain == pytest.approx(LN2 - H_21, abs=1e-15)

    def test_degenerate_posterior(self):
        ens = [Member(0), Member(1)]
        gain = information_gain(PosteriorBelief(np.array([1.0, 0.0])), [batch(0)], ens, 1.0,
                                table_loss({0: [5.0], 1: [0.0]}))
        assert gain == 0.0

    @given(probs, st.integers(0, 10_000), st.integers(1, 5))
    @settings(max_examples=100, deadline=None)
    def test_bounds(self, p, seed, m):
        rng = np.random.default_rng(seed)
        L = p.probs.size
        ens = [Member(i) for i in range(L)]
        loss = table_loss({i: list(rng.normal(scale=3, size=m)) for i in range(L)})
        gain = information_gain(p, [batch(j) for j in range(m)], ens, 1.0, loss)
        assert 0.0 <= gain <= entropy(p) + 1e-12
        assert entropy(p) <= math.log(L) + 1e-12


class TestSelect:
    def test_cheap_level_passes_threshold(self):
        led = BudgetLedger(40_000)  # threshold 1/200 = 0.005
        assert select_fidelity([0.02, 0.01], family(), led) == 1

    def test_zero_gains_fall_back_to_truth(self):
        assert select_fidelity([0.0, 0.0, 0.0], family((1, 2, 4)), BudgetLedger(100)) == 3

    def test_below_threshold(self):
        assert select_fidelity([0.02, 0.0], family(), BudgetLedger(1000)) == 2

    def test_unaffordable_choice(self):
        fam = family((1, 2, 8))
        led = BudgetLedger(10, spent=5.0, history=[(1, 3, 5.0)])
        # all gains zero would pick level 3 (cost 8) but only 5 remains
        assert select_fidelity([0.0, 0.0, 0.0], fam, led) == 2

    def test_exhausted(self):
        fam = family((2, 4))
        with pytest.raises(BudgetExhausted):
            select_fidelity([1.0, 1.0], fam, BudgetLedger(5, spent=4.0, history=[(1, 2, 4.0)]))

    def test_ties_go_to_higher_level(self):
        assert select_fidelity([1.0, 4.0], family(), BudgetLedger(4)) == 2

    def test_equal_gains_prefer_cheapest(self):
        assert select_fidelity([0.3, 0.3, 0.3], family((1, 2, 4)), BudgetLedger(10_000)) == 1

    @given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(1, 50), st.integers(0, 20))
    @settings(max_examples=100, deadline=None)
    def test_never_overspends(self, gains, budget, rounds):
        fam = family((1, 2, 4))
        led = BudgetLedger(budget)
        for r in range(rounds):
            try:
                k = select_fidelity(gains, fam, led)
            except BudgetExhausted:
                assert led.remaining < 1
                break
            assert fam.cost(k) <= led.remaining
            charge(led, r, k, fam)
        assert led.spent <= budget and led.audit()


class TestMapPolicy:
    def test_examples(self):
        ens = [Member(i, policy=np.full((1, 1), i)) for i in range(3)]
        assert map_policy(PosteriorBelief(np.array([0.1, 0.8, 0.1])), ens)[0, 0] == 1
        assert map_policy(PosteriorBelief.uniform(3), ens)[0, 0] == 0

    @given(probs, st.floats(0.01, 100))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, p, c):
        ens = [Member(i, policy=np.full((1, 1), i)) for i in range(p.probs.size)]
        scaled = PosteriorBelief((c * p.probs) / (c * p.probs).sum())
        assert map_policy(scaled, ens)[0, 0] == map_policy(p, ens)[0, 0]


class TestHistoryBuffer:
    def test_ring_and_tags(self):
        buf = HistoryBuffer(2, size=2)
        assert buf.levels_missing() == [1, 2]
        for r in range(3):
            buf.add(batch(r, fidelity=1))
        assert [b.round for b in buf[1]] == [1, 2]
        assert buf.levels_missing() == [2]
        with pytest.raises(ValueError):
            buf.add(batch(0, fidelity="offline"))
