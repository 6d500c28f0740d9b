import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bngp.attacks import (AttackConfig, AttackScores, adaptive_lrt_attack, adaptive_threshold,
                          attacker_loss, bwma, calibrate_lrt_threshold, cel_loss, discrete_release,
                          fixed_lrt_attack, laplace_release, lrs, lrs_grad_x, noise_release,
                          optimal_lrt_attack, optimal_lrt_scores, score_attack, score_attack_scores,
                          symbol_features, train_bgp_response, write_attack_csv)
from bngp.data import (IndependentBernoulli, MembershipSampler, PopulationDataset, all_memberships,
                       generate_synthetic_population)
from bngp.errors import CapabilityError, ContractError, NumericError, ParameterError
from bngp.mechanisms import (bitflip_mechanism, constant_mechanism, random_discrete_mechanism,
                             summary_statistics)
from bngp.metrics import roc_auc
from bngp.oracle import (exact_bwma, exact_conditional_entropy, expected_cel, joint_table,
                         posterior_marginal_table)


class TestAttackScores:
    def test_out_of_range(self):
        with pytest.raises(ContractError):
            AttackScores(np.array([0.2, 1.3]))

    def test_threshold_ties_claim(self):
        np.testing.assert_array_equal(AttackScores(np.array([0.5, 0.49, 0.7])).decisions, [1, 0, 1])


class TestCelLoss:
    def test_perfect_prediction(self):
        assert cel_loss(np.array([1.0, 0.0, 1.0]), np.array([1, 0, 1]), p_clamp=1e-15) < 1e-14

    def test_half_scores(self):
        assert cel_loss(np.full(5, 0.5), np.array([1, 0, 0, 1, 1])) == pytest.approx(5 * math.log(2), rel=1e-12)

    def test_hand_value(self):
        assert cel_loss(np.array([0.9, 0.2]), np.array([1, 0])) == pytest.approx(0.32850406697203605, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            cel_loss(np.array([0.5, 0.5]), np.array([1, 0, 1]))

    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=10))
    @settings(max_examples=50, deadline=None)
    def test_finite_nonnegative(self, pairs):
        p, b = map(np.array, zip(*pairs))
        value = cel_loss(p, b)
        assert np.isfinite(value) and value >= 0


class TestAttackerLoss:
    def test_abstain(self):
        assert attacker_loss(np.zeros(4), np.array([1, 0, 1, 1]), 0.3) == 0.0

    def test_all_members_claimed(self):
        assert attacker_loss(np.ones(4), np.ones(4), 0.5) == -2.0

    def test_all_false_positives(self):
        assert attacker_loss(np.ones(6), np.zeros(6), 1.0) == 6.0

    def test_gamma_zero(self):
        with pytest.raises(ParameterError):
            attacker_loss(np.ones(2), np.ones(2), 0.0)


class TestBwma:
    def test_random_guess(self):
        prior = MembershipSampler(IndependentBernoulli.uniform(4))
        rng = np.random.default_rng(0)
        est = bwma(lambda X: np.full((len(X), 4), 0.5), noise_release(
            generate_synthetic_population(4, 3, 0.2, 0.8, seed=0)), prior, 0.5, 4000, rng)
        assert est.tpr == est.fpr == 1.0
        assert abs(est.advantage) <= 3 * est.stderr + 1e-12

    def test_oracle_attacker(self):
        mech = bitflip_mechanism(0.0, 3)
        est = bwma(lambda X: X, discrete_release(mech, "values"), IndependentBernoulli.uniform(3), 0.5, 500,
                   np.random.default_rng(1))
        assert (est.tpr, est.fpr, est.advantage) == (1.0, 0.0, 0.5)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(2)
        mech = random_discrete_mechanism(3, 5, rng)
        prior = IndependentBernoulli(np.array([0.3, 0.6, 0.5]))
        table = rng.random((5, 3))
        release = discrete_release(mech, "onehot")
        est = bwma(lambda X: X @ table, release, prior, 0.4, 20000, rng)
        exact = exact_bwma(mech, prior, (table >= 0.4).astype(int), 0.4)
        assert abs(est.advantage - exact) <= 3 * est.stderr

    def test_rejects_bad_scores(self):
        mech = bitflip_mechanism(0.1, 2)
        with pytest.raises(ContractError):
            bwma(lambda X: X + 1, discrete_release(mech, "values"), IndependentBernoulli.uniform(2), 0.5, 10,
                 np.random.default_rng(0))


class TestReleases:
    def test_symbol_features(self):
        mech = bitflip_mechanism(0.1, 2)
        np.testing.assert_array_equal(symbol_features(mech), [[0, 0], [0, 1], [1, 0], [1, 1]])
        np.testing.assert_array_equal(symbol_features(mech, "onehot"), np.eye(4))

    def test_discrete_release_frequencies(self):
        mech = random_discrete_mechanism(2, 3, np.random.default_rng(0))
        release = discrete_release(mech, "onehot")
        B = np.tile([[1, 0]], (50000, 1))
        freq = release(B, np.random.default_rng(1)).mean(axis=0)
        np.testing.assert_allclose(freq, mech.table[2], atol=0.01)

    def test_laplace_release_is_clipped(self):
        ds = generate_synthetic_population(5, 8, 0.2, 0.8, seed=0)
        X = laplace_release(ds, 2.0)(np.ones((10, 5)), np.random.default_rng(0))
        assert ((X >= 0) & (X <= 1)).all()


class TestTraining:
    def test_uninformative_release(self):
        K = 4
        release = discrete_release(constant_mechanism(K, 3), "onehot")
        cfg = AttackConfig(hidden=(16,), steps=1500, learning_rate=1e-3, seed=0)
        att = train_bgp_response(release, IndependentBernoulli.uniform(K), cfg, np.random.default_rng(0))
        assert abs(np.mean(att.trace[-200:]) - K * math.log(2)) < 0.02 * K * math.log(2)
        assert np.abs(att(np.eye(3)) - 0.5).max() < 0.05

    def test_fully_informative_release(self):
        K = 4
        prior = IndependentBernoulli.uniform(K)
        release = discrete_release(bitflip_mechanism(0.0, K), "values")
        cfg = AttackConfig(hidden=(16,), steps=1500, learning_rate=1e-2, seed=0)
        att = train_bgp_response(release, prior, cfg, np.random.default_rng(0))
        assert np.mean(att.trace[-100:]) < 0.05 * K * math.log(2)
        B = prior.sample(np.random.default_rng(1), 300)
        assert roc_auc(att(release(B, np.random.default_rng(2))).ravel(), B.ravel()).auc > 0.99

    def test_bitflip_matches_exact_entropy(self):
        mech, prior = bitflip_mechanism(0.25, 6), IndependentBernoulli.uniform(6)
        release = discrete_release(mech, "values")
        cfg = AttackConfig(hidden=(64,), steps=3000, batch_size=512, learning_rate=1e-3, decay_rate=0.95, seed=0)
        att = train_bgp_response(release, prior, cfg, np.random.default_rng(0))
        exact = exact_conditional_entropy(mech, prior)
        assert abs(expected_cel(mech, prior, att(release.features)) - exact) < 0.05 * exact

    def test_scores_approach_posterior(self):
        rng = np.random.default_rng(3)
        mech = random_discrete_mechanism(3, 4, rng)
        prior = IndependentBernoulli(np.array([0.3, 0.5, 0.7]))
        release = discrete_release(mech, "onehot")
        cfg = AttackConfig(hidden=(32,), steps=3000, batch_size=512, learning_rate=3e-3, decay_rate=0.95, seed=0)
        att = train_bgp_response(release, prior, cfg, rng)
        err = np.abs(att(release.features) - posterior_marginal_table(mech, prior))
        # symbols the mechanism almost never emits carry little training signal
        weight = joint_table(mech, prior).sum(axis=0)
        assert (weight @ err.mean(axis=1)) / weight.sum() <= 0.05

    def test_non_finite_release(self):
        cfg = AttackConfig(hidden=(4,), steps=5, learning_rate=1e-3, seed=0)
        with pytest.raises(NumericError):
            train_bgp_response(lambda B, rng: np.full((len(B), 2), np.nan), IndependentBernoulli.uniform(2),
                               cfg, np.random.default_rng(0), input_width=2)

    def test_deterministic(self):
        release = discrete_release(bitflip_mechanism(0.2, 3), "values")
        cfg = AttackConfig(hidden=(8,), steps=100, learning_rate=1e-3, seed=4)
        a = train_bgp_response(release, IndependentBernoulli.uniform(3), cfg, np.random.default_rng(4))
        b = train_bgp_response(release, IndependentBernoulli.uniform(3), cfg, np.random.default_rng(4))
        assert a.trace == b.trace


class TestLrs:
    def test_identity(self):
        pbar = np.array([0.2, 0.6, 0.9])
        assert lrs(np.array([1, 0, 1]), pbar, pbar) == pytest.approx(0.0, abs=1e-15)

    def test_member_attribute(self):
        assert lrs(np.array([1]), np.array([0.25]), np.array([0.5])) == pytest.approx(math.log(2), abs=1e-12)

    def test_non_member_attribute(self):
        assert lrs(np.array([0]), np.array([0.25]), np.array([0.5])) == pytest.approx(math.log(0.5 / 0.75), abs=1e-12)

    def test_batch_shape(self):
        d = np.eye(3)
        X = np.full((5, 3), 0.4)
        assert lrs(d, X, np.full(3, 0.5)).shape == (5, 3)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        d = (rng.random((3, 4)) < 0.5).astype(float)
        X = rng.uniform(0.1, 0.9, size=(2, 4))
        g = lrs_grad_x(d, X)
        h = 1e-6
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            num = (lrs(d, X + e, np.full(4, 0.5)) - lrs(d, X - e, np.full(4, 0.5))) / (2 * h)
            np.testing.assert_allclose(g[:, :, j], num, rtol=1e-6)


def _separable():
    ds = generate_synthetic_population(6, 400, 0.2, 0.8, seed=3)
    b = np.array([1, 1, 0, 1, 0, 0])
    return ds, b, summary_statistics(ds, b)


class TestFixedLrt:
    def test_huge_tau_claims_all(self):
        ds, _, x = _separable()
        assert fixed_lrt_attack(ds, x, 1e9).decisions.all()

    def test_tiny_tau_claims_none(self):
        ds, _, x = _separable()
        assert not fixed_lrt_attack(ds, x, -1e9).decisions.any()

    def test_separable_instance(self):
        ds, b, x = _separable()
        stat = lrs(ds.records, x, ds.reference_frequencies)
        assert stat[b == 1].max() < stat[b == 0].min()
        tau = (stat[b == 1].max() + stat[b == 0].min()) / 2
        np.testing.assert_array_equal(fixed_lrt_attack(ds, x, tau).decisions, b)

    @given(st.floats(-200, 200), st.floats(0, 50))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_tau(self, tau, step):
        ds, _, x = _separable()
        low, high = fixed_lrt_attack(ds, x, tau).decisions, fixed_lrt_attack(ds, x, tau + step).decisions
        assert (high >= low).all()

    def test_calibrated_tau_balances_errors(self):
        ds = generate_synthetic_population(20, 60, 0.1, 0.9, seed=0)
        src = MembershipSampler(IndependentBernoulli.uniform(20))
        tau = calibrate_lrt_threshold(ds, src, np.random.default_rng(0), trials=400)
        B = src(np.random.default_rng(1), 400)
        X = summary_statistics(ds, B)
        stat = lrs(ds.records, X, ds.reference_frequencies)
        tpr, fpr = (stat[B == 1] <= tau).mean(), (stat[B == 0] <= tau).mean()
        assert abs(tpr - (1 - fpr)) < 0.05


class TestAdaptiveLrt:
    def test_constant_reference(self):
        assert adaptive_threshold(np.full(7, 2.5), 3) == 2.5

    def test_full_set_mean(self):
        assert adaptive_threshold(np.array([3.0, 1.0, 8.0]), 3) == 4.0

    def test_hand_example(self):
        assert adaptive_threshold(np.array([4.0, 2.0, 1.0, 3.0]), 2) == 1.5

    def test_empty_reference(self):
        with pytest.raises(ParameterError):
            adaptive_threshold(np.array([]), 1)

    def test_n_too_large(self):
        with pytest.raises(ParameterError):
            adaptive_threshold(np.array([1.0, 2.0]), 3)

    def test_attack_returns_tau(self):
        ds, _, x = _separable()
        scores, tau = adaptive_lrt_attack(ds, x, np.array([2, 4, 5]), 2)
        ref = np.sort(lrs(ds.records[[2, 4, 5]], x, ds.reference_frequencies))
        assert tau == pytest.approx(ref[:2].mean())
        np.testing.assert_array_equal(scores.decisions, fixed_lrt_attack(ds, x, tau).decisions)


def _conditionals(mech, prior, k):
    """Pr[x | b_k = 1] and Pr[x | b_k = 0] by enumeration."""
    joint = joint_table(mech, prior)
    bk = all_memberships(mech.K)[:, k] == 1
    return joint[bk].sum(axis=0) / joint[bk].sum(), joint[~bk].sum(axis=0) / joint[~bk].sum()


def _exact_roc(score, p1, p0):
    order = np.argsort(-score, kind="mergesort")
    s = score[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    return np.r_[0, np.cumsum(p0[order])[cut]], np.r_[0, np.cumsum(p1[order])[cut]]


class TestOptimalLrt:
    def test_uninformative(self):
        ratios = optimal_lrt_scores(constant_mechanism(3, 2), IndependentBernoulli.uniform(3), 1)
        np.testing.assert_allclose(ratios, 1.0)

    def test_single_bitflip(self):
        ratio = optimal_lrt_scores(bitflip_mechanism(0.25, 1), IndependentBernoulli.uniform(1), (1,))
        assert ratio[0] == pytest.approx(1 / 3, rel=1e-12)

    def test_decision_rule(self):
        scores = optimal_lrt_attack(bitflip_mechanism(0.25, 2), IndependentBernoulli.uniform(2), (1, 0))
        np.testing.assert_array_equal(scores.decisions, [1, 0])

    def test_guard(self):
        with pytest.raises(CapabilityError):
            optimal_lrt_scores(_FakeMech(), IndependentBernoulli.uniform(13), 0)

    def test_neyman_pearson_dominance(self):
        rng = np.random.default_rng(0)
        mech = random_discrete_mechanism(4, 6, rng)
        prior = IndependentBernoulli(rng.uniform(0.2, 0.8, size=4))
        for k in range(4):
            p1, p0 = _conditionals(mech, prior, k)
            ratio = np.array([optimal_lrt_scores(mech, prior, s)[k] for s in mech.output_space])
            f_opt, t_opt = _exact_roc(-ratio, p1, p0)
            for _ in range(200):
                f, t = _exact_roc(rng.random(mech.n_outputs), p1, p0)
                assert (t <= np.interp(f, f_opt, t_opt) + 1e-9).all()


class _FakeMech:
    K = 13


class TestScoreAttack:
    def test_reference_release(self):
        pbar = np.array([0.3, 0.6])
        assert score_attack(np.array([1, 0]), pbar, pbar) == 0.0

    def test_hand_value(self):
        assert score_attack(np.array([1, 0]), np.array([0.75, 0.25]), np.array([0.5, 0.5])) == pytest.approx(0.25)

    def test_members_score_higher(self):
        ds = generate_synthetic_population(30, 80, 0.1, 0.9, seed=2)
        rng = np.random.default_rng(0)
        inside = outside = 0.0
        for _ in range(1000):
            b = (rng.random(30) < 0.5).astype(int)
            b[0] = 1
            inside += score_attack(ds.records[0], summary_statistics(ds, b), ds.reference_frequencies)
            b[0] = 0
            b[1:] = (rng.random(29) < 0.5)
            if b.sum() == 0:
                b[1] = 1
            outside += score_attack(ds.records[0], summary_statistics(ds, b), ds.reference_frequencies)
        assert inside > outside

    def test_scores_object(self):
        ds = PopulationDataset(np.array([[1, 0], [0, 1]]), np.array([0.5, 0.5]))
        s = score_attack_scores(ds, np.array([0.75, 0.25]))
        np.testing.assert_allclose(s.ranking, [0.25, -0.25])
        np.testing.assert_array_equal(s.decisions, [1, 0])


def test_attack_csv(tmp_path):
    path = tmp_path / "a.csv"
    write_attack_csv(path, AttackScores(np.array([0.9, 0.1])), np.array([1, 0]))
    assert path.read_text().splitlines() == ["individual,soft,decision,member", "0,0.9,1,1", "1,0.1,0,0"]
