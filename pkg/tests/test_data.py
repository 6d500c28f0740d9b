import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bngp.data import (P_FLOOR, FixedSizeUniform, IndependentBernoulli, MembershipSampler,
                       PopulationDataset, all_memberships, generate_reference_panel,
                       generate_synthetic_population, load_population_csv, membership_index,
                       sample_membership, save_population_csv)
from bngp.errors import ParameterError, ParseError


class TestPopulationDataset:
    def test_rejects_non_binary(self):
        with pytest.raises(ParameterError):
            PopulationDataset(np.array([[0, 2]]), np.array([0.5, 0.5]))

    def test_clamps_reference_frequencies(self):
        ds = PopulationDataset(np.array([[0, 1]]), np.array([0.0, 1.0]))
        np.testing.assert_array_equal(ds.reference_frequencies, [P_FLOOR, 1 - P_FLOOR])

    def test_arrays_are_read_only(self):
        ds = generate_synthetic_population(3, 4, 0.2, 0.8, seed=0)
        with pytest.raises(ValueError):
            ds.records[0, 0] = 1
        with pytest.raises(ValueError):
            ds.reference_frequencies[0] = 0.3

    def test_shape_aliases(self):
        ds = generate_synthetic_population(3, 4, 0.2, 0.8, seed=0)
        assert (ds.K, ds.m) == (3, 4) == (ds.population_size, ds.attribute_count)


class TestSyntheticPopulation:
    def test_degenerate_single_cell(self):
        ds = generate_synthetic_population(1, 1, 1 - P_FLOOR, 1 - P_FLOOR, seed=3)
        np.testing.assert_allclose(ds.reference_frequencies, [1 - P_FLOOR])

    def test_same_seed_same_dataset(self):
        a = generate_synthetic_population(4, 8, 0.2, 0.8, seed=7)
        b = generate_synthetic_population(4, 8, 0.2, 0.8, seed=7)
        np.testing.assert_array_equal(a.records, b.records)
        np.testing.assert_array_equal(a.reference_frequencies, b.reference_frequencies)

    def test_column_means_concentrate(self):
        ds = generate_synthetic_population(800, 5000, 0.05, 0.95, seed=1)
        q = ds.reference_frequencies
        sd = np.sqrt(q * (1 - q) / 800)
        inside = np.abs(ds.records.mean(axis=0) - q) <= 3 * sd
        assert inside.mean() >= 0.99

    @pytest.mark.parametrize("low,high", [(0.0, 0.5), (0.6, 0.4), (0.2, 1.0)])
    def test_bad_range(self, low, high):
        with pytest.raises(ParameterError):
            generate_synthetic_population(2, 2, low, high, seed=0)

    def test_reference_panel_shape(self):
        ds = generate_synthetic_population(5, 6, 0.2, 0.8, seed=0)
        panel = generate_reference_panel(ds, 9, seed=1)
        assert panel.shape == (9, 6)
        assert set(np.unique(panel)) <= {0, 1}


class TestPriors:
    def test_all_zero_bernoulli(self):
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(sample_membership(IndependentBernoulli(np.zeros(5)), rng), np.zeros(5))

    def test_full_fixed_size(self):
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(sample_membership(FixedSizeUniform(6, 6), rng), np.ones(6))

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
    @settings(max_examples=40, deadline=None)
    def test_bernoulli_pmf_normalizes(self, pi):
        prior = IndependentBernoulli(np.array(pi))
        assert abs(prior.pmf_table().sum() - 1) < 1e-12

    @given(st.integers(1, 10), st.data())
    @settings(max_examples=30, deadline=None)
    def test_fixed_size_pmf_normalizes(self, K, data):
        n = data.draw(st.integers(1, K))
        table = FixedSizeUniform(K, n).pmf_table()
        assert abs(table.sum() - 1) < 1e-12
        B = all_memberships(K)
        assert (table[B.sum(axis=1) != n] == 0).all()

    def test_pmf_table_matches_pointwise(self):
        prior = IndependentBernoulli(np.array([0.1, 0.7, 0.4]))
        B = all_memberships(3)
        np.testing.assert_allclose(prior.pmf_table(), [prior.pmf(b) for b in B], rtol=0, atol=1e-15)

    def test_uniform_256_histogram(self):
        prior = IndependentBernoulli.uniform(8)
        B = prior.sample(np.random.default_rng(11), 100_000)
        counts = np.bincount([membership_index(b) for b in B], minlength=256)
        expected = 100_000 / 256
        sd = np.sqrt(100_000 * (1 / 256) * (255 / 256))
        assert (np.abs(counts - expected) <= 5 * sd).all()

    @pytest.mark.parametrize("prior", [IndependentBernoulli(np.array([0.2, 0.5, 0.9, 0.3])),
                                       FixedSizeUniform(5, 2)])
    def test_sampler_matches_pmf_chi_square(self, prior):
        B = prior.sample(np.random.default_rng(5), 100_000)
        counts = np.bincount([membership_index(b) for b in B], minlength=2 ** prior.K)
        pmf = prior.pmf_table()
        keep = pmf > 0
        assert counts[~keep].sum() == 0
        _, p = stats.chisquare(counts[keep], 100_000 * pmf[keep])
        assert p > 1e-3

    def test_membership_index_order(self):
        B = all_memberships(4)
        assert [membership_index(b) for b in B] == list(range(16))
        np.testing.assert_array_equal(B[5], [0, 1, 0, 1])


class TestMembershipSampler:
    def test_never_returns_empty(self):
        sampler = MembershipSampler(IndependentBernoulli.uniform(2, 0.3))
        B = sampler(np.random.default_rng(0), 5000)
        assert (B.sum(axis=1) > 0).all()
        # every draw (accepted or not) is empty with probability 0.7**2
        assert abs(sampler.rejection_rate - 0.49) < 0.02

    def test_impossible_prior(self):
        sampler = MembershipSampler(IndependentBernoulli(np.zeros(3)))
        with pytest.raises(ParameterError):
            sampler(np.random.default_rng(0), 2)


class TestCsv:
    def test_reads_header_and_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("#ref,0.5,0.5\n1,0\n1,1\n")
        ds = load_population_csv(p)
        assert (ds.K, ds.m) == (2, 2)
        np.testing.assert_array_equal(ds.reference_frequencies, [0.5, 0.5])

    def test_bad_cell_names_position(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("#ref,0.5,0.5\n1,0\n1,2\n")
        with pytest.raises(ParseError, match="line 3, column 2"):
            load_population_csv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("#ref,0.5,0.5\n1,0,1\n")
        with pytest.raises(ParseError, match="line 2"):
            load_population_csv(p)

    def test_missing_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,0\n0,1\n")
        with pytest.raises(ParseError, match="header"):
            load_population_csv(p)

    def test_reference_split(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,0\n0,1\n1,1\n0,1\n")
        ds = load_population_csv(p, reference_rows=2)
        assert ds.K == 2
        np.testing.assert_allclose(ds.reference_frequencies, [0.5, 1 - P_FLOOR])

    def test_round_trip(self, tmp_path):
        ds = generate_synthetic_population(7, 5, 0.1, 0.9, seed=4)
        p = tmp_path / "d.csv"
        save_population_csv(ds, p)
        back = load_population_csv(p)
        np.testing.assert_array_equal(back.records, ds.records)
        np.testing.assert_array_equal(back.reference_frequencies, ds.reference_frequencies)
