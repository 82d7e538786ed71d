import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

import oracles
from hdphmm.data import CountMatrix, PositionTrace
from hdphmm.distributions import make_rng, poisson_logpmf
from hdphmm.errors import LengthMismatch, NoSpikes, UncoveredState, ZeroRateWithSpikes
from hdphmm.evaluation import (
    MetricsReport,
    SpatialBinning,
    baseline_predictive_ll,
    baseline_rates,
    bits_per_spike,
    chance_decode_error,
    chance_information,
    circular_shifts,
    contingency,
    decode_error,
    decode_positions,
    entropy_bits,
    greedy_match,
    greedy_state_match,
    marginals_mcmc,
    marginals_vb,
    mutual_information,
    per_state_information,
    place_field,
    predictive_ll_mcmc,
    predictive_ll_vb,
    sample_variational_params,
    state_location_map,
    write_trajectory_csv,
)
from hdphmm.hmm import HmmParams, emission_logliks, forward_messages
from hdphmm.vb import VBConfig, run_vb


def polar_trace(r, theta):
    r, theta = np.asarray(r, float), np.asarray(theta, float)
    return PositionTrace(r * np.cos(theta), r * np.sin(theta), np.zeros(r.size))


class TestBaseline:
    def test_one_cell(self):
        rates = baseline_rates(CountMatrix([[1, 3]]))
        np.testing.assert_allclose(rates, [2.0])
        ll = baseline_predictive_ll(CountMatrix([[2]]), rates)
        assert ll == pytest.approx(-2 + 2 * np.log(2), abs=1e-12)
        assert ll == pytest.approx(-0.61371, abs=1e-5)

    def test_zero_test_counts(self):
        rates = np.array([0.5, 1.5])
        ll = baseline_predictive_ll(CountMatrix(np.zeros((2, 4), int)), rates)
        assert ll == pytest.approx(-4 * 2.0)

    def test_matches_poisson(self):
        rng = np.random.default_rng(0)
        train = CountMatrix(rng.poisson(3.0, size=(4, 50)))
        test = CountMatrix(rng.poisson(3.0, size=(4, 20)))
        rates = baseline_rates(train)
        full = poisson_logpmf(test.counts, rates[:, None]).sum() + gammaln(test.counts + 1.0).sum()
        assert baseline_predictive_ll(test, rates) == pytest.approx(full, abs=1e-10)

    def test_zero_rate_with_spikes(self):
        with pytest.warns(ZeroRateWithSpikes):
            ll = baseline_predictive_ll(CountMatrix([[1]]), np.array([0.0]))
        assert ll == -np.inf

    def test_zero_rate_no_spikes(self):
        assert baseline_predictive_ll(CountMatrix([[0, 0], [1, 0]]), np.array([0.0, 1.0])) == pytest.approx(-2.0)


def random_hmm(rng, M, C):
    return HmmParams(rng.dirichlet(np.ones(M)), rng.dirichlet(np.ones(M), size=M), rng.gamma(2.0, 1.0, (C, M)))


class TestPredictiveMcmc:
    def test_single_sample(self):
        rng = np.random.default_rng(1)
        s = random_hmm(rng, 3, 2)
        test = CountMatrix(rng.poisson(2.0, size=(2, 10)))
        ev = forward_messages(emission_logliks(test, s.Lambda), s.pi, s.P)[1]
        expect = ev + gammaln(test.counts + 1.0).sum()
        assert predictive_ll_mcmc([s], test) == pytest.approx(expect, abs=1e-10)

    def test_repeated_samples(self):
        rng = np.random.default_rng(2)
        s = random_hmm(rng, 2, 2)
        test = CountMatrix(rng.poisson(2.0, size=(2, 8)))
        assert predictive_ll_mcmc([s] * 7, test) == pytest.approx(predictive_ll_mcmc([s], test), abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(10 + seed)
        samples = [random_hmm(rng, 2, 2) for _ in range(3)]
        test = CountMatrix(rng.poisson(2.0, size=(2, 3)))
        evs = [oracles.brute_evidence(oracles.emission_table(test.counts, s.Lambda), s.pi, s.P) for s in samples]
        expect = np.log(np.mean(np.exp(evs))) + gammaln(test.counts + 1.0).sum()
        assert predictive_ll_mcmc(samples, test) == pytest.approx(expect, abs=1e-10)


def fitted_vb(seed=0, M=3, C=3, T=60, finite=False):
    rng = np.random.default_rng(seed)
    lam = rng.gamma(2.0, 2.0, size=(C, M))
    seq = rng.integers(0, M, T)
    counts = CountMatrix(rng.poisson(lam[:, seq]))
    vs, _ = run_vb(counts, VBConfig(M=M, n_iters=10, finite=finite), make_rng(seed))
    return vs, counts


class TestPredictiveVb:
    def test_sample_shapes(self):
        vs, _ = fitted_vb()
        h = sample_variational_params(make_rng(0), vs)
        assert h.P.shape == (3, 3) and h.Lambda.shape == (3, 3)
        np.testing.assert_allclose(h.P.sum(axis=1), 1.0)

    def test_delta_limit(self):
        vs, counts = fitted_vb(1, finite=True)
        s = 1e9
        lam = vs.rate_means()
        rows = np.vstack([vs.trans, vs.init[None, :]])
        rows = rows / rows.sum(axis=1, keepdims=True)
        vs.a_tilde, vs.b_tilde = lam * s, np.full_like(lam, s)
        vs.trans, vs.init = rows[:-1] * s, rows[-1] * s
        plug = predictive_ll_mcmc([HmmParams(rows[-1], rows[:-1], lam)], counts)
        assert predictive_ll_vb(vs, 5, make_rng(0), counts) == pytest.approx(plug, abs=1e-3)

    def test_monte_carlo_spread(self):
        vs, counts = fitted_vb(2)
        rng = np.random.default_rng(9)
        test = CountMatrix(rng.poisson(vs.rate_means()[:, rng.integers(0, 3, 40)]))
        base = baseline_predictive_ll(test, baseline_rates(counts))
        vals = [bits_per_spike(predictive_ll_vb(vs, 50, make_rng(k), test), base, test) for k in range(10)]
        assert np.std(vals) < 0.01

    def test_single_state_conjugate(self):
        # M=1: the predictive of each new count sequence is the gamma-Poisson posterior predictive
        rng = np.random.default_rng(3)
        y = rng.poisson(4.0, size=(1, 40))
        vs, _ = run_vb(CountMatrix(y), VBConfig(M=1, n_iters=3, finite=True), make_rng(0), [1.0], [1.0])
        test = CountMatrix(rng.poisson(4.0, size=(1, 5)))
        a, b = 1.0 + y.sum(), 1.0 + 40
        exact = oracles.gamma_poisson_evidence(test.counts[0], a, b) + gammaln(test.counts + 1.0).sum()
        assert predictive_ll_vb(vs, 2000, make_rng(1), test) == pytest.approx(exact, abs=1e-2)


class TestBitsPerSpike:
    def test_identity(self):
        assert bits_per_spike(-5.0, -5.0, CountMatrix([[1, 2]])) == 0.0

    def test_unit(self):
        assert bits_per_spike(np.log(2.0), 0.0, CountMatrix([[1]])) == pytest.approx(1.0)

    def test_no_spikes(self):
        with pytest.raises(NoSpikes):
            bits_per_spike(0.0, 0.0, CountMatrix([[0, 0]]))


class TestStateMatch:
    def test_identical(self):
        seq = [0, 1, 2, 1, 0]
        m = greedy_state_match(seq, seq)
        assert sorted(m.mapping) == [(0, 0), (1, 1), (2, 2)]
        assert np.count_nonzero(m.overlap - np.diag(np.diag(m.overlap))) == 0
        assert m.matched_fraction == 1.0

    def test_permutation(self):
        rng = np.random.default_rng(0)
        seq = rng.integers(0, 5, 200)
        sigma = rng.permutation(5)
        m = greedy_state_match(seq, sigma[seq])
        assert dict(m.mapping) == {i: int(sigma[i]) for i in range(5)}

    def test_hand_trace(self):
        assert greedy_match([[5, 0], [0, 4], [1, 1]]) == [(0, 0), (1, 1)]

    def test_ties(self):
        assert greedy_match([[2, 2], [2, 2]]) == [(0, 0), (1, 1)]

    def test_stops_at_zero_overlap(self):
        assert greedy_match([[3, 0], [0, 0]]) == [(0, 0)]

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            contingency([0, 1], [0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_relabel_invariance(self, seed):
        # continuous overlaps have no ties, so the pairing must compose exactly with the relabeling
        rng = np.random.default_rng(seed)
        table = rng.random((int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        sigma = rng.permutation(table.shape[1])
        relabeled = np.empty_like(table)
        relabeled[:, sigma] = table
        m1 = greedy_match(table)
        assert greedy_match(relabeled) == [(i, int(sigma[j])) for i, j in m1]
        assert len(m1) == min(table.shape)


class TestBinning:
    def test_equal_area(self):
        b = SpatialBinning(11, 20, 60.0)
        areas = b.areas()
        assert b.n_bins == 220
        np.testing.assert_allclose(areas, areas[0], rtol=1e-9)
        assert areas.sum() == pytest.approx(np.pi * 60.0 ** 2)

    def test_bin_index(self):
        b = SpatialBinning(4, 2, 10.0)
        # inner ring has r < 10/sqrt(2)
        assert b.bin_index(5.0, -np.pi + 0.1) == 0
        assert b.bin_index(9.0, np.pi - 0.1) == 7
        assert b.bin_index(50.0, 0.1) == 6

    def test_uniform_points_fill_bins_evenly(self):
        rng = np.random.default_rng(0)
        b = SpatialBinning(11, 11, 60.0)
        r = 60.0 * np.sqrt(rng.random(200_000))
        th = rng.uniform(-np.pi, np.pi, 200_000)
        freq = np.bincount(b.bin_index(r, th), minlength=b.n_bins) / 200_000
        np.testing.assert_allclose(freq, 1 / 121, atol=0.002)


class TestLocationMap:
    def test_single_state(self):
        pos = polar_trace(np.full(5, 20.0), np.full(5, 0.5))
        m = state_location_map(np.zeros(5, int), pos)
        assert m.mean_r[0] == pytest.approx(20.0)
        assert m.mean_theta[0] == pytest.approx(0.5)

    def test_alternating(self):
        pos = polar_trace([10, 30] * 5, [0.2, -1.0] * 5)
        m = state_location_map(np.array([0, 1] * 5), pos)
        np.testing.assert_allclose(m.mean_r, [10, 30])
        np.testing.assert_allclose(m.mean_theta, [0.2, -1.0])

    def test_histograms_normalize(self):
        rng = np.random.default_rng(1)
        pos = polar_trace(rng.uniform(0, 60, 100), rng.uniform(-np.pi, np.pi, 100))
        m = state_location_map(rng.integers(0, 4, 100), pos, M=6)
        np.testing.assert_allclose(m.location_dist[m.covered].sum(axis=1), 1.0, atol=1e-9)
        assert np.isnan(m.mean_r[4]) and not m.covered[5]

    def test_soft_equals_hard(self):
        rng = np.random.default_rng(2)
        pos = polar_trace(rng.uniform(0, 60, 50), rng.uniform(-np.pi, np.pi, 50))
        seq = rng.integers(0, 3, 50)
        hard = state_location_map(seq, pos)
        soft = state_location_map(np.eye(3)[seq], pos)
        np.testing.assert_allclose(soft.mean_r, hard.mean_r)
        np.testing.assert_allclose(soft.location_dist, hard.location_dist)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            state_location_map(np.zeros(3, int), polar_trace([1, 2], [0, 0]))


class TestDecode:
    def test_one_hot(self):
        pos = polar_trace([10, 30, 10], [0.2, -1.0, 0.2])
        seq = np.array([0, 1, 0])
        m = state_location_map(seq, pos)
        r_hat, th_hat = decode_positions(np.eye(2)[seq], m)
        np.testing.assert_allclose(r_hat, [10, 30, 10])
        err, summary = decode_error(r_hat, th_hat, pos)
        np.testing.assert_allclose(err, 0.0, atol=1e-12)
        assert summary.mean_cm == pytest.approx(0.0, abs=1e-12)

    def test_equal_mass(self):
        m = state_location_map(np.array([0, 1]), polar_trace([2.0, 4.0], [0.0, 0.0]))
        r_hat, th_hat = decode_positions(np.array([[0.5, 0.5]]), m)
        assert r_hat[0] == pytest.approx(3.0)

    def test_plain_vs_circular_angle(self):
        # states just either side of the -pi/pi seam: plain mean points the wrong way
        m = state_location_map(np.array([0, 1]), polar_trace([10.0, 10.0], [np.pi - 0.1, -np.pi + 0.1]))
        _, th_plain = decode_positions(np.array([[0.5, 0.5]]), m)
        _, th_circ = decode_positions(np.array([[0.5, 0.5]]), m, circular=True)
        assert th_plain[0] == pytest.approx(0.0, abs=1e-12)
        assert abs(abs(th_circ[0]) - np.pi) < 1e-9

    def test_uncovered(self):
        m = state_location_map(np.array([0, 0]), polar_trace([1.0, 2.0], [0, 0]), M=2)
        with pytest.raises(UncoveredState):
            decode_positions(np.array([[0.5, 0.5]]), m)
        r_hat, _ = decode_positions(np.array([[1 - 1e-6, 1e-6]]), m)
        assert r_hat[0] == pytest.approx(1.5)

    def test_error_euclidean(self):
        pos = polar_trace([3.0], [0.0])
        err, _ = decode_error(np.array([4.0]), np.array([np.pi / 2]), pos)
        assert err[0] == pytest.approx(5.0)


class TestPlaceField:
    def test_single_state(self):
        rng = np.random.default_rng(3)
        pos = polar_trace(rng.uniform(0, 60, 30), rng.uniform(-np.pi, np.pi, 30))
        m = state_location_map(np.zeros(30, int), pos)
        np.testing.assert_allclose(place_field(m, [2.0], [1.0]), m.location_dist[0])

    def test_one_active_state(self):
        rng = np.random.default_rng(4)
        pos = polar_trace(rng.uniform(0, 60, 60), rng.uniform(-np.pi, np.pi, 60))
        m = state_location_map(rng.integers(0, 3, 60), pos)
        field = place_field(m, [0.0, 5.0, 0.0], [0.3, 0.3, 0.4])
        np.testing.assert_allclose(field, m.location_dist[1])
        assert field.sum() == pytest.approx(1.0, abs=1e-9)


class TestInformation:
    def test_independent(self):
        rng = np.random.default_rng(5)
        n = 50_000
        pos = polar_trace(60 * np.sqrt(rng.random(n)), rng.uniform(-np.pi, np.pi, n))
        seq = rng.integers(0, 4, n)
        # plug-in bias is about (|S|-1)(|L|-1) / (2 n ln 2)
        assert mutual_information(seq, pos) < 2 * 3 * 120 / (2 * n * np.log(2))

    def test_deterministic(self):
        b = SpatialBinning(4, 1, 10.0)
        th = np.repeat(np.array([-3, -1, 1, 3]) * np.pi / 4, 25)
        pos = polar_trace(np.full(100, 5.0), th)
        seq = b.bin_index(pos.r, pos.theta)
        assert mutual_information(seq, pos, b) == pytest.approx(2.0, abs=1e-12)
        np.testing.assert_allclose(per_state_information(seq, pos, b), -(0.25 * np.log2(0.25) + 0.75 * np.log2(0.75)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 200))
        pos = polar_trace(rng.uniform(0, 60, n), rng.uniform(-np.pi, np.pi, n))
        seq = rng.integers(0, int(rng.integers(1, 6)), n)
        b = SpatialBinning()
        mi = mutual_information(seq, pos, b)
        loc = b.bin_index(pos.r, pos.theta)
        assert -1e-12 <= mi <= min(entropy_bits(seq), entropy_bits(loc)) + 1e-9
        assert np.all(per_state_information(seq, pos, b) >= 0)


class TestShuffles:
    def test_shifts_range(self):
        s = circular_shifts(make_rng(0), 100, 500)
        assert s.min() >= 5 and s.max() <= 95

    def test_good_decoder_beats_chance(self):
        rng = np.random.default_rng(6)
        seq = np.repeat(rng.integers(0, 6, 400), 10)
        centers_r, centers_t = rng.uniform(5, 55, 6), rng.uniform(-3, 3, 6)
        pos = polar_trace(centers_r[seq] + rng.normal(0, 1, seq.size), centers_t[seq])
        m = state_location_map(seq, pos)
        r_hat, th_hat = decode_positions(np.eye(6)[seq], m)
        err = decode_error(r_hat, th_hat, pos)[1].mean_cm
        assert err < chance_decode_error(make_rng(1), r_hat, th_hat, pos)
        assert mutual_information(seq, pos) > 5 * chance_information(make_rng(2), seq, pos)


class TestMarginals:
    def test_mcmc_average(self):
        rng = np.random.default_rng(7)
        s1, s2 = random_hmm(rng, 2, 2), random_hmm(rng, 2, 2)
        counts = CountMatrix(rng.poisson(2.0, size=(2, 4)))
        g = marginals_mcmc([s1, s2], counts)
        g1, _ = oracles.brute_marginals(oracles.emission_table(counts.counts, s1.Lambda), s1.pi, s1.P)
        g2, _ = oracles.brute_marginals(oracles.emission_table(counts.counts, s2.Lambda), s2.pi, s2.P)
        np.testing.assert_allclose(g, 0.5 * (g1 + g2), atol=1e-10)

    def test_vb_rows(self):
        vs, counts = fitted_vb(3)
        g = marginals_vb(vs, counts)
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-10)


class TestReports:
    def test_metrics_json(self, tmp_path):
        MetricsReport(baseline_ll=-1.0, model_ll=-0.5, bits_per_spike=0.2, n_states=3).write(
            tmp_path / "m.json", {"extra": 1})
        d = json.loads((tmp_path / "m.json").read_text())
        assert set(d) >= {"baseline_ll", "model_ll", "bits_per_spike", "decode_mean_cm", "decode_sd_cm",
                          "mi_bits", "n_states", "n_states_95", "extra"}
        assert d["decode_mean_cm"] is None

    def test_trajectory_csv(self, tmp_path):
        pos = polar_trace([1.0, 2.0], [0.0, 0.5])
        write_trajectory_csv(tmp_path / "t.csv", pos, np.array([1.0, 2.0]), np.array([0.0, 0.5]), np.zeros(2))
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "t,r_true,theta_true,r_hat,theta_hat,err_cm"
        assert lines[1].startswith("0,")
