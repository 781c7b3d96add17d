import numpy as np
import pytest

from mveq import oracles
from mveq.errors import ConfigurationError
from mveq.featstore import l2_normalize_rows
from mveq.rng import SplitMix64
from mveq.smoothap import (
    RankingInstance,
    contrastive_loss,
    exact_ap,
    smooth_ap,
    smooth_ap_grad,
)


def _unit(rng, n, c):
    return l2_normalize_rows(rng.normal_array(n * c).reshape(n, c))


def _instance(rng, kp=2, kn=5, c=6, tau=1.0):
    return RankingInstance(_unit(rng, 1, c)[0], _unit(rng, kp, c), _unit(rng, kn, c), tau)


def _raw_instance(query, positives, negatives, tau):
    """Bypass unit-norm validation (finite differences perturb off-sphere)."""
    inst = RankingInstance.__new__(RankingInstance)
    inst.query = np.asarray(query, float)
    inst.positives = np.asarray(positives, float)
    inst.negatives = np.asarray(negatives, float)
    inst.temperature = tau
    return inst


class TestSmoothAp:
    def test_perfect_separation_is_one(self):
        # One positive at similarity ~1, negatives far below, sharp tau.
        q = np.zeros(4)
        q[0] = 1.0
        pos = q[None, :]
        neg = np.zeros((3, 4))
        neg[:, 1] = 1.0  # similarity 0 << 1
        val = smooth_ap(RankingInstance(q, pos, neg, temperature=1e-4))
        assert val == pytest.approx(1.0, abs=1e-12)

    def test_equal_similarity_pair_two_thirds(self):
        # One positive and one negative at identical similarity: sig(0) = 1/2,
        # term = 1 / (1 + 1/2) = 2/3.
        q = np.array([1.0, 0.0])
        v = np.array([[np.cos(0.5), np.sin(0.5)]])
        w = np.array([[np.cos(0.5), -np.sin(0.5)]])
        val = smooth_ap(RankingInstance(q, v, w, temperature=1.0))
        assert val == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_sharp_tau_matches_exact_ap(self):
        rng = SplitMix64(31)
        checked = 0
        while checked < 30:
            q = _unit(rng, 1, 8)[0]
            pos = _unit(rng, 1, 8)
            neg = _unit(rng, 4, 8)
            scores = np.concatenate([pos @ q, neg @ q])
            gaps = np.abs(scores[:, None] - scores[None, :])[np.triu_indices(5, 1)]
            if gaps.min() < 1e-3:
                continue
            checked += 1
            sap = smooth_ap(RankingInstance(q, pos, neg, temperature=1e-4))
            assert sap == pytest.approx(exact_ap(pos @ q, neg @ q), abs=1e-3)

    def test_range_and_loss_range(self):
        rng = SplitMix64(32)
        for _ in range(100):
            inst = _instance(rng, kp=1 + rng.randint(3), kn=rng.randint(6), tau=0.1 + rng.uniform())
            val = smooth_ap(inst)
            assert 0.0 < val <= 1.0
            assert 0.0 <= smooth_ap_grad(inst).loss < 1.0

    def test_permutation_invariance(self):
        rng = SplitMix64(33)
        inst = _instance(rng, kp=3, kn=6)
        base = smooth_ap(inst)
        perm_p = [2, 0, 1]
        perm_n = [5, 3, 0, 1, 4, 2]
        shuffled = RankingInstance(
            inst.query, inst.positives[perm_p], inst.negatives[perm_n], inst.temperature
        )
        assert smooth_ap(shuffled) == pytest.approx(base, abs=1e-12)

    def test_monotone_in_negative_similarity(self):
        # Pulling one negative toward the query never increases smooth AP.
        rng = SplitMix64(34)
        q = _unit(rng, 1, 4)[0]
        pos = _unit(rng, 2, 4)
        neg = _unit(rng, 4, 4)
        prev = None
        for t in np.linspace(0.0, 1.0, 11):
            neg_t = neg.copy()
            neg_t[0] = l2_normalize_rows(((1 - t) * neg[0] + t * q)[None, :])[0]
            val = smooth_ap(RankingInstance(q, pos, neg_t, temperature=0.5))
            if prev is not None:
                assert val <= prev + 1e-12
            prev = val

    def test_self_term_literal_mode(self):
        # Literal formula keeps sig(0) = 1/2 for j == i in both sums.
        q = np.array([1.0, 0.0])
        pos = np.array([[1.0, 0.0]])
        neg = np.array([[0.0, 1.0]])
        lit = smooth_ap(RankingInstance(q, pos, neg, temperature=1.0), include_self_term=True)
        s_neg = 1.0 / (1.0 + np.exp(1.0))  # sig((0-1)/1)
        assert lit == pytest.approx(1.5 / (1.5 + s_neg), abs=1e-12)

    def test_tau_validation(self):
        with pytest.raises(ConfigurationError):
            RankingInstance(np.array([1.0, 0]), np.array([[1.0, 0]]), np.zeros((0, 2)), 0.0)

    def test_needs_positive(self):
        with pytest.raises(ConfigurationError):
            RankingInstance(np.array([1.0, 0]), np.zeros((0, 2)), np.array([[1.0, 0]]), 1.0)

    def test_non_unit_rejected(self):
        with pytest.raises(ConfigurationError):
            RankingInstance(np.array([2.0, 0]), np.array([[1.0, 0]]), np.zeros((0, 2)), 1.0)


class TestSmoothApGrad:
    def test_matches_finite_differences_100_instances(self):
        rng = SplitMix64(35)
        worst = 0.0
        for _ in range(100):
            inst = _instance(
                rng, kp=1 + rng.randint(3), kn=1 + rng.randint(5), c=5, tau=0.3 + rng.uniform()
            )
            lg = smooth_ap_grad(inst)
            for attr, grad in (
                ("query", lg.d_query),
                ("positives", lg.d_positives),
                ("negatives", lg.d_negatives),
            ):
                base = getattr(inst, attr).copy()

                def f(x, attr=attr, inst=inst):
                    parts = {
                        "query": inst.query,
                        "positives": inst.positives,
                        "negatives": inst.negatives,
                    }
                    parts[attr] = x
                    return 1.0 - smooth_ap(
                        _raw_instance(parts["query"], parts["positives"], parts["negatives"], inst.temperature)
                    )

                fd = oracles.finite_difference(f, base)
                scale = max(float(np.max(np.abs(fd))), 1e-10)
                worst = max(worst, float(np.max(np.abs(fd - grad))) / scale)
        assert worst < 1e-4

    def test_saturated_instance_finite_small_gradients(self):
        q = np.array([1.0, 0.0])
        pos = np.array([[1.0, 0.0]])
        neg = np.array([[-1.0, 0.0], [-1.0, 0.0]])
        lg = smooth_ap_grad(RankingInstance(q, pos, neg, temperature=1.0))
        for g in (lg.d_query, lg.d_positives, lg.d_negatives):
            assert np.all(np.isfinite(g))
            assert np.max(np.abs(g)) < 1.0  # sigmoid tails keep magnitudes mild
        assert np.max(np.abs(lg.d_negatives)) > 0  # tails never exactly die

    def test_duplicated_negative_contribution(self):
        # Duplicating a negative must double its (shared) gradient structure;
        # verified against finite differences on the duplicated instance.
        rng = SplitMix64(36)
        q = _unit(rng, 1, 4)[0]
        pos = _unit(rng, 1, 4)
        neg = _unit(rng, 1, 4)
        dup = np.vstack([neg, neg])
        lg = smooth_ap_grad(RankingInstance(q, pos, dup, temperature=0.7))
        np.testing.assert_allclose(lg.d_negatives[0], lg.d_negatives[1], atol=1e-12)

        def f(x):
            return 1.0 - smooth_ap(_raw_instance(q, pos, x, 0.7))

        fd = oracles.finite_difference(f, dup.copy())
        np.testing.assert_allclose(lg.d_negatives, fd, atol=1e-6)


class TestExactAp:
    def test_all_positives_on_top(self):
        assert exact_ap([0.9, 0.8], [0.5, 0.1]) == 1.0

    def test_single_positive_ranked_second(self):
        assert exact_ap([0.5], [0.9, 0.1]) == 0.5

    def test_tie_pessimistic(self):
        # Positive tied with a negative: negative ranks first.
        assert exact_ap([0.5], [0.5]) == 0.5

    def test_nan_rejected(self):
        with pytest.raises(ConfigurationError):
            exact_ap([np.nan], [0.1])


class TestContrastive:
    def test_separated_loss_vanishes(self):
        q = np.array([1.0, 0.0])
        pos = np.array([[1.0, 0.0]])
        neg = np.array([[-1.0, 0.0]])
        lg = contrastive_loss(RankingInstance(q, pos, neg, 1.0), temp=0.01)
        assert lg.loss == pytest.approx(0.0, abs=1e-12)

    def test_uniform_scores_ln4(self):
        q = np.array([1.0, 0.0, 0.0])
        v = np.array([0.0, 1.0, 0.0])
        pos = v[None, :]
        neg = np.stack([v, np.array([0.0, 0.0, 1.0]), -np.array([0.0, 0.0, 1.0])])
        lg = contrastive_loss(RankingInstance(q, pos, neg, 1.0), temp=0.07)
        assert lg.loss == pytest.approx(np.log(4.0), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = SplitMix64(37)
        worst = 0.0
        for _ in range(20):
            inst = _instance(rng, kp=2, kn=4, c=5)
            lg = contrastive_loss(inst, temp=0.2)
            for attr, grad in (
                ("query", lg.d_query),
                ("positives", lg.d_positives),
                ("negatives", lg.d_negatives),
            ):
                base = getattr(inst, attr).copy()

                def f(x, attr=attr, inst=inst):
                    parts = {
                        "query": inst.query,
                        "positives": inst.positives,
                        "negatives": inst.negatives,
                    }
                    parts[attr] = x
                    return contrastive_loss(
                        _raw_instance(parts["query"], parts["positives"], parts["negatives"], inst.temperature),
                        temp=0.2,
                    ).loss

                fd = oracles.finite_difference(f, base)
                scale = max(float(np.max(np.abs(fd))), 1e-10)
                worst = max(worst, float(np.max(np.abs(fd - grad))) / scale)
        assert worst < 1e-4

    def test_temp_validation(self):
        rng = SplitMix64(38)
        with pytest.raises(ConfigurationError):
            contrastive_loss(_instance(rng), temp=0.0)
