from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bngp.data import PopulationDataset, all_memberships, generate_synthetic_population
from bngp.errors import DomainError, ParameterError
from bngp.mechanisms import (EMPTY, DpParams, bitflip_mechanism, clip_subgradient, clip_unit,
                             compose_mechanisms, composed_mechanism, constant_mechanism,
                             discretized_summary_mechanism, laplace_mechanism, perturb_output,
                             quantize_postprocess, random_discrete_mechanism, sensitivity_frequency,
                             summary_release_mechanism, summary_statistics)


def _two_by_two():
    return PopulationDataset(np.array([[1, 0], [1, 1]]), np.array([0.5, 0.5]))


class TestSummaryStatistics:
    def test_direct_count(self):
        np.testing.assert_array_equal(summary_statistics(_two_by_two(), np.array([1, 1])), [1.0, 0.5])

    def test_singleton_is_the_record(self):
        ds = generate_synthetic_population(5, 7, 0.2, 0.8, seed=2)
        for k in range(5):
            np.testing.assert_array_equal(summary_statistics(ds, np.eye(5, dtype=int)[k]), ds.records[k])

    def test_exhaustive_recount(self):
        ds = generate_synthetic_population(6, 4, 0.2, 0.8, seed=3)
        B = all_memberships(6)[1:]
        got = summary_statistics(ds, B)
        for b, x in zip(B, got):
            members = [ds.records[k] for k in range(6) if b[k]]
            expect = [sum(int(r[j]) for r in members) / len(members) for j in range(4)]
            np.testing.assert_allclose(x, expect, rtol=0, atol=1e-15)

    def test_empty_membership(self):
        with pytest.raises(DomainError):
            summary_statistics(_two_by_two(), np.array([0, 0]))

    def test_dataset_not_mutated(self):
        ds = generate_synthetic_population(4, 3, 0.2, 0.8, seed=0)
        before = ds.records.copy()
        summary_statistics(ds, np.array([1, 0, 1, 1]))
        np.testing.assert_array_equal(ds.records, before)


class TestClipAndPerturb:
    def test_clip_values(self):
        np.testing.assert_array_equal(clip_unit(np.array([1.2, -0.3])), [1.0, 0.0])

    def test_clip_identity_inside(self):
        v = np.array([0.0, 0.3, 1.0])
        np.testing.assert_array_equal(clip_unit(v), v)

    @given(st.lists(st.floats(-2, 2), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_clip_matches_min_max(self, v):
        v = np.array(v)
        np.testing.assert_array_equal(clip_unit(v), np.minimum(1.0, np.maximum(0.0, v)))

    def test_zero_noise(self):
        np.testing.assert_array_equal(perturb_output(np.array([0.5, 0.5]), np.zeros(2)), [0.5, 0.5])

    def test_saturation(self):
        np.testing.assert_array_equal(perturb_output(np.array([0.9, 0.1]), np.array([0.5, -0.5])), [1.0, 0.0])

    def test_random_matches_composition(self):
        rng = np.random.default_rng(0)
        x, xi = rng.random(30), rng.uniform(-0.5, 0.5, 30)
        np.testing.assert_array_equal(perturb_output(x, xi), clip_unit(x + xi))

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            perturb_output(np.zeros(3), np.zeros(2))

    def test_clip_subgradient(self):
        np.testing.assert_array_equal(clip_subgradient(np.array([-0.1, 0.0, 0.5, 1.0, 1.3])),
                                      [0, 0, 1, 0, 0])


class TestLaplace:
    def test_vanishing_noise(self):
        x = np.linspace(0.1, 0.9, 9)
        out, _ = laplace_mechanism(x, DpParams(1e12), np.random.default_rng(0))
        assert np.abs(out - x).max() < 1e-6

    def test_scale_from_sensitivity(self):
        params = DpParams(1.25e5, sensitivity=12.5)
        assert params.scale == pytest.approx(1e-4, rel=1e-12)
        _, noise = laplace_mechanism(np.full(200_000, 0.5), params, np.random.default_rng(1))
        assert np.abs(noise).mean() == pytest.approx(1e-4, rel=0.01)

    def test_mean_absolute_noise(self):
        params = DpParams(10.0, sensitivity=1.0)
        _, noise = laplace_mechanism(np.full(1_000_000, 0.5), params, np.random.default_rng(2))
        assert np.abs(noise).mean() == pytest.approx(0.1, rel=0.01)

    def test_zero_epsilon(self):
        with pytest.raises(ParameterError):
            laplace_mechanism(np.zeros(2), DpParams(0.0), np.random.default_rng(0))

    @pytest.mark.parametrize("m,k,expected", [(5000, 400, 12.5), (7, 7, 1.0), (1, 2, 0.5)])
    def test_sensitivity(self, m, k, expected):
        assert sensitivity_frequency(m, k) == expected

    def test_sensitivity_zero_dagger(self):
        with pytest.raises(ParameterError):
            sensitivity_frequency(10, 0)


class TestBitflip:
    def test_noiseless(self):
        mech = bitflip_mechanism(0.0, 3)
        b = np.array([1, 0, 1])
        assert mech.exact_pmf((1, 0, 1), b) == 1.0

    def test_total_randomization(self):
        mech = bitflip_mechanism(0.5, 3)
        np.testing.assert_allclose(mech.table, 1 / 8)

    def test_hand_product(self):
        mech = bitflip_mechanism(0.25, 2)
        np.testing.assert_allclose(mech.pmf_row(np.array([0, 0])), [0.5625, 0.1875, 0.1875, 0.0625])

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            bitflip_mechanism(0.6, 2)

    def test_sampler_chi_square(self):
        mech = bitflip_mechanism(0.3, 3)
        b = np.array([1, 0, 1])
        rng = np.random.default_rng(3)
        counts = np.zeros(8)
        for _ in range(100_000):
            counts[mech.index(mech.sample(b, rng))] += 1
        _, p = stats.chisquare(counts, 100_000 * mech.pmf_row(b))
        assert p > 1e-3


class TestDiscreteMechanisms:
    @pytest.mark.parametrize("K", [1, 4, 7, 10])
    def test_rows_normalize(self, K):
        mech = random_discrete_mechanism(K, 5, np.random.default_rng(K))
        np.testing.assert_allclose(mech.table.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        np.testing.assert_allclose(bitflip_mechanism(0.2, K).table.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_generic_sampler_chi_square(self):
        mech = random_discrete_mechanism(2, 6, np.random.default_rng(9))
        b = np.array([0, 1])
        rng = np.random.default_rng(10)
        counts = np.zeros(6)
        for _ in range(100_000):
            counts[mech.index(mech.sample(b, rng))] += 1
        _, p = stats.chisquare(counts, 100_000 * mech.pmf_row(b))
        assert p > 1e-3


class TestDiscretizedSummary:
    def _one_attr(self, bits):
        return PopulationDataset(np.array(bits).reshape(-1, 1), np.array([0.5]))

    def test_point_mass_noise(self):
        ds = generate_synthetic_population(3, 2, 0.2, 0.8, seed=1)
        mech = discretized_summary_mechanism(ds, 5, [1.0])
        for b in all_memberships(3)[1:]:
            cell = tuple(np.rint(summary_statistics(ds, b) * 4) / 4)
            assert mech.exact_pmf(cell, b) == 1.0

    def test_three_point_grid(self):
        mech = discretized_summary_mechanism(self._one_attr([1, 0]), 3, [1 / 3, 1 / 3, 1 / 3])
        row = mech.pmf_row(np.array([1, 1]))
        np.testing.assert_allclose(row[:3], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
        assert mech.output_space[:3] == [(0.0,), (0.5,), (1.0,)]

    def test_clip_aggregates_boundary_mass(self):
        mech = discretized_summary_mechanism(self._one_attr([1, 1]), 3, [0.5, 0.5], shifts=[0, 1])
        assert mech.exact_pmf((1.0,), np.array([1, 0])) == 1.0

    def test_empty_symbol(self):
        mech = discretized_summary_mechanism(self._one_attr([1, 0]), 3, [1.0])
        assert mech.exact_pmf(EMPTY, np.array([0, 0])) == 1.0
        assert mech.sample(np.array([0, 0]), np.random.default_rng(0)) == EMPTY

    def test_invalid_pmf(self):
        with pytest.raises(ParameterError):
            discretized_summary_mechanism(self._one_attr([1, 0]), 3, [0.5, 0.6])

    def test_noiseless_summary_release(self):
        mech = summary_release_mechanism(_two_by_two())
        assert mech.exact_pmf((1.0, 0.5), np.array([1, 1])) == 1.0
        np.testing.assert_allclose(mech.table.sum(axis=1), 1.0)


class TestComposition:
    def test_single_component(self):
        mech = bitflip_mechanism(0.25, 2)
        joint = composed_mechanism([mech])
        np.testing.assert_allclose(joint.table, mech.table)

    def test_independent_bitflips(self):
        mech = bitflip_mechanism(0.25, 1)
        joint = composed_mechanism([mech, mech])
        np.testing.assert_allclose(joint.pmf_row(np.array([0])), [0.5625, 0.1875, 0.1875, 0.0625])

    def test_independent_is_product(self):
        rng = np.random.default_rng(4)
        a, b = random_discrete_mechanism(3, 3, rng), random_discrete_mechanism(3, 4, rng)
        joint = composed_mechanism([a, b])
        for i in range(8):
            np.testing.assert_array_equal(joint.table[i], np.outer(a.table[i], b.table[i]).ravel())

    def test_shared_duplicate_only_equal_pairs(self):
        mech = bitflip_mechanism(0.25, 2)
        joint = composed_mechanism([mech, mech], coupling="shared")
        for i, (x, y) in enumerate(joint.output_space):
            if x != y:
                assert (joint.table[:, i] == 0).all()
        np.testing.assert_allclose(joint.table.sum(axis=1), 1.0, atol=1e-12)

    def test_shared_keeps_marginals(self):
        rng = np.random.default_rng(6)
        a, b = random_discrete_mechanism(2, 3, rng), random_discrete_mechanism(2, 4, rng)
        joint = composed_mechanism([a, b], coupling="shared").table.reshape(4, 3, 4)
        np.testing.assert_allclose(joint.sum(axis=2), a.table, atol=1e-12)
        np.testing.assert_allclose(joint.sum(axis=1), b.table, atol=1e-12)

    def test_shared_sampling_agrees(self):
        mech = bitflip_mechanism(0.4, 2)
        rng = np.random.default_rng(0)
        for _ in range(200):
            x, y = compose_mechanisms([mech, mech], np.array([1, 0]), rng, coupling="shared")
            assert x == y

    def test_shared_sampler_chi_square(self):
        rng = np.random.default_rng(7)
        a, b = random_discrete_mechanism(1, 2, rng), random_discrete_mechanism(1, 3, rng)
        joint = composed_mechanism([a, b], coupling="shared")
        counts = np.zeros(joint.n_outputs)
        for _ in range(50_000):
            counts[joint.index(compose_mechanisms([a, b], np.array([1]), rng, "shared"))] += 1
        expected = 50_000 * joint.pmf_row(np.array([1]))
        keep = expected > 0
        assert counts[~keep].sum() == 0
        _, p = stats.chisquare(counts[keep], expected[keep])
        assert p > 1e-3


class TestQuantize:
    def test_identity_partition(self):
        mech = bitflip_mechanism(0.25, 2)
        post = quantize_postprocess(mech, {s: s for s in mech.output_space})
        np.testing.assert_array_equal(post.table, mech.table)

    def test_collapse(self):
        mech = bitflip_mechanism(0.25, 2)
        post = quantize_postprocess(mech, {s: "all" for s in mech.output_space})
        np.testing.assert_allclose(post.table, 1.0)

    def test_parity(self):
        mech = bitflip_mechanism(0.25, 2)
        post = quantize_postprocess(mech, {s: sum(s) % 2 for s in mech.output_space})
        f = 0.25
        # from b = (0, 0): odd parity means exactly one flip
        assert post.exact_pmf(1, np.array([0, 0])) == pytest.approx(2 * f * (1 - f), abs=1e-15)
        assert post.exact_pmf(0, np.array([0, 1])) == pytest.approx(2 * f * (1 - f), abs=1e-15)
        for b in product((0, 1), repeat=2):
            assert post.pmf_row(np.array(b)).sum() == pytest.approx(1.0, abs=1e-12)

    def test_partial_partition(self):
        mech = bitflip_mechanism(0.25, 2)
        with pytest.raises(ParameterError):
            quantize_postprocess(mech, {(0, 0): 0})

    def test_constant_mechanism(self):
        mech = constant_mechanism(3, 4)
        np.testing.assert_allclose(mech.table, 0.25)
