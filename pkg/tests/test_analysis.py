import csv
import io
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gate_stats_oracle, mean_pairwise_corr, quantile_oracle, sinks_oracle
from vnsa import analysis
from vnsa.analysis import (
    attention_budget,
    attention_fraction,
    compute_alphas,
    detect_sinks,
    gate_statistics,
    info_context_length,
    inter_head_similarity,
    local_ratio,
    profile_branches,
)
from vnsa.branches import SparseConfig
from vnsa.dense import HeadLayout, dense_causal_attention
from vnsa.errors import ConfigError, DomainError, ShapeError
from vnsa.tensor import Rng64, seeded_uniform


class TestBudget:
    @pytest.mark.parametrize("b,s,w,k", [(32, 64, 256, 2304), (0, 64, 300, 300), (20, 64, 1024, 2304)])
    def test_budget(self, b, s, w, k):
        assert attention_budget(b, s, w) == k

    def test_fraction_headline(self):
        gamma = attention_fraction(32, 64, 256, 128000)
        assert abs(gamma - 0.036) <= 0.0005
        assert abs(attention_fraction(32, 64, 256, 36000) - 2 * 2304 / 35999) < 1e-15
        assert abs(attention_fraction(32, 64, 256, 36000) - 0.1280) < 5e-5

    def test_full_dense_budget(self):
        # K = (L - 1) / 2
        assert attention_fraction(0, 1, 50, 101) == 1.0

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 500), st.integers(1, 256), st.integers(0, 5000), st.integers(2, 10**7))
    def test_fraction_times_edges_is_budget(self, b, s, w, L):
        gamma = attention_fraction(b, s, w, L)
        k = attention_budget(b, s, w)
        assert Fraction(gamma) * (L - 1) / 2 == pytest.approx(k, rel=1e-12, abs=0)

    def test_local_ratio(self):
        assert local_ratio(32, 64, 256) == pytest.approx(256 / 2304)
        assert local_ratio(0, 64, 256) == 1.0

    @pytest.mark.parametrize("T,F,L", [(64, 512, 32768), (1, 37, 37), (128, 512, 65536)])
    def test_context_length(self, T, F, L):
        assert info_context_length(T, F) == L

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            attention_fraction(1, 1, 1, 1)
        with pytest.raises(DomainError):
            attention_budget(-1, 64, 256)
        with pytest.raises(DomainError):
            info_context_length(0, 4)


class TestQuantiles:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))
    def test_against_sorted_oracle(self, xs, q):
        assert analysis.quantile(xs, q) == pytest.approx(quantile_oracle(xs, q), rel=1e-12, abs=1e-9)

    def test_iqr_tenths(self):
        xs = [i / 10 for i in range(1, 11)]
        assert analysis.quantile(xs, 0.25) == pytest.approx(0.325)
        assert analysis.quantile(xs, 0.75) == pytest.approx(0.775)
        assert analysis.iqr(xs) == pytest.approx(0.45)


class TestSinks:
    def test_single_planted_sink(self):
        rep = detect_sinks([0.2] * 10, [10.0] * 9 + [0.1])
        assert rep.is_sink.tolist() == [False] * 9 + [True]
        assert rep.count == 1 and rep.ratio == 0.1
        assert rep.median == 10.0 and rep.iqr == 0.0 and rep.threshold == 10.0
        assert sinks_oracle([0.2] * 10, [10.0] * 9 + [0.1]) == {9}

    def test_equal_norms_have_no_sinks(self):
        assert detect_sinks([0.9] * 6, [3.0] * 6).count == 0

    def test_low_alpha_never_flags(self):
        rep = detect_sinks([0.1] * 10, [10.0] * 9 + [0.0])
        assert rep.count == 0

    def test_strict_threshold(self):
        # threshold lands exactly on a norm: not flagged
        vn = [1.0, 2.0, 3.0, 4.0, 5.0]
        rep = detect_sinks([0.5] * 5, vn)
        assert rep.threshold == 3.0 - 2 * 2.0
        rep = detect_sinks([0.5] * 5, [-1.0, 2.0, 3.0, 4.0, 5.0])
        assert rep.threshold == pytest.approx(3.0 - 2 * 2.0)
        assert rep.is_sink.tolist() == [False] * 5

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 20)), min_size=1, max_size=50))
    def test_matches_oracle(self, pairs):
        alphas = [a for a, _ in pairs]
        vn = [v for _, v in pairs]
        rep = detect_sinks(alphas, vn)
        assert set(np.flatnonzero(rep.is_sink).tolist()) == sinks_oracle(alphas, vn)
        cut = analysis.sink_threshold(vn)[2]
        for i in range(len(pairs)):
            both = alphas[i] > 0.1 and Fraction(vn[i]) < cut
            assert bool(rep.is_sink[i]) == both

    def test_cut_landing_on_a_norm_after_rounding(self):
        # exact cut equals the third norm; float interpolation can round past it
        vn = [6.0, 6.0, 1.5057311879000035]
        rep = detect_sinks([0.0, 0.0, 1.0], vn)
        assert analysis.sink_threshold(vn)[2] == Fraction(vn[2])
        assert rep.is_sink.tolist() == [False] * 3

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 20)), min_size=2, max_size=30), st.randoms())
    def test_permutation_equivariant_and_idempotent(self, pairs, rnd):
        alphas = np.array([a for a, _ in pairs])
        vn = np.array([v for _, v in pairs])
        base = detect_sinks(alphas, vn)
        perm = list(range(len(pairs)))
        rnd.shuffle(perm)
        shuffled = detect_sinks(alphas[perm], vn[perm])
        assert shuffled.is_sink.tolist() == base.is_sink[perm].tolist()
        again = detect_sinks(base.alpha, base.vnorm)
        assert again.is_sink.tolist() == base.is_sink.tolist()

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            detect_sinks([0.2, 0.3], [1.0])
        with pytest.raises(ShapeError):
            detect_sinks([], [])
        with pytest.raises(ValueError):
            detect_sinks([0.2], [np.nan])

    def test_histogram(self):
        rep = detect_sinks([0.5] * 20, [10.0] * 19 + [0.0])
        hist = rep.positional_histogram(4)
        assert hist.tolist() == [0, 0, 0, 1]


class TestAlphas:
    def test_single_token(self):
        assert compute_alphas([[1.0]]).tolist() == [1.0]

    def test_uniform_three(self):
        p = np.array([[1, 0, 0], [1 / 2, 1 / 2, 0], [1 / 3, 1 / 3, 1 / 3]])
        assert np.allclose(compute_alphas(p), [0.6111, 0.4167, 0.3333], atol=1e-4)
        assert np.allclose(compute_alphas(p), [(1 + 1 / 2 + 1 / 3) / 3, (1 / 2 + 1 / 3) / 2, 1 / 3], atol=1e-15)

    def test_recent_key_mass(self):
        assert compute_alphas(np.eye(5)).tolist() == [1 / 5, 1 / 4, 1 / 3, 1 / 2, 1.0]

    def test_non_normalised_row(self):
        p = np.array([[1.0, 0], [0.5, 0.4]])
        with pytest.raises(ValueError, match="row 2"):
            compute_alphas(p)

    def test_mass_outside_support(self):
        with pytest.raises(ValueError):
            compute_alphas(np.array([[0.5, 0.5], [0.5, 0.5]]))

    def test_dense_alphas_in_unit_interval(self):
        layout = HeadLayout(2, 1, 4)
        _, probs = dense_causal_attention(analysis.seeded_batch(layout, 30, 3), layout, return_probs=True)
        for i in range(2):
            a = compute_alphas(probs[i])
            assert np.all((a >= 0) & (a <= 1))
            # naive definition: mean over t >= k
            ref = [np.mean(probs[i, k:, k]) for k in range(30)]
            assert np.allclose(a, ref, atol=1e-15)


def seeded_gates(seed, L, h, layers=1):
    rng = Rng64(seed)
    return [seeded_uniform(rng, (L, h, 3)).astype(np.float64) * 9 + 0.5 for _ in range(layers)]


class TestGateStatistics:
    def test_constant(self):
        stats = gate_statistics(np.full((7, 3, 3), 0.5))
        assert np.all(stats.mean == 0.5) and np.all(stats.iqr == 0)
        assert np.all(stats.corr == 0)

    def test_tenths(self):
        vals = np.array([i / 10 for i in range(1, 11)])
        gates = np.repeat(vals[:, None, None], 3, axis=2).reshape(10, 1, 3)
        stats = gate_statistics(gates)
        assert np.allclose(stats.mean, 0.55) and np.allclose(stats.iqr, 0.45)
        assert np.all(np.isnan(stats.corr))

    def test_token_permutation_invariant(self):
        g = seeded_gates(1, 20, 4)[0]
        perm = np.random.default_rng(0).permutation(20)
        a, b = gate_statistics(g), gate_statistics(g[perm])
        assert np.allclose(a.mean, b.mean, atol=1e-15) and np.array_equal(a.iqr, b.iqr)
        assert np.allclose(a.corr, b.corr, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        layers = seeded_gates(seed, 25, 4, layers=2)
        stats = gate_statistics(layers)
        for li, g in enumerate(layers):
            means, iqrs, corrs = gate_stats_oracle(g.tolist())
            assert np.allclose(stats.mean[li], means, atol=1e-12)
            assert np.allclose(stats.iqr[li], iqrs, atol=1e-12)
            assert np.allclose(stats.corr[li], corrs, atol=1e-12)

    def test_empty(self):
        with pytest.raises(DomainError):
            gate_statistics(np.zeros((0, 2, 3)))
        with pytest.raises(DomainError):
            gate_statistics([])


class TestSimilarity:
    def test_identical_heads(self):
        series = np.linspace(0.1, 0.9, 12)
        g = np.repeat(series[:, None, None], 3, axis=2).repeat(4, axis=1)
        assert inter_head_similarity(g, 0, "slc") == pytest.approx(1.0, abs=1e-12)

    def test_negated_head(self):
        a = np.linspace(0.2, 0.7, 9)
        g = np.stack([a, 2 * a.mean() - a], axis=1)[:, :, None].repeat(3, axis=2)
        assert inter_head_similarity(g, 0, 0) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_head_contributes_zero(self):
        a = np.linspace(0.2, 0.7, 9)
        g = np.stack([a, a, np.full(9, 0.4)], axis=1)[:, :, None].repeat(3, axis=2)
        # pairs: (a, a) = 1, two constant pairs = 0
        assert inter_head_similarity(g, 0, "win") == pytest.approx(1 / 3, abs=1e-12)

    def test_symmetric_and_shift_invariant(self):
        g = seeded_gates(7, 15, 5)[0]
        base = inter_head_similarity(g, 0, 1)
        assert inter_head_similarity(g[:, ::-1], 0, 1) == pytest.approx(base, abs=1e-12)
        assert inter_head_similarity(g * 0.5 + 0.01, 0, 1) == pytest.approx(base, abs=1e-12)

    def test_matches_oracle(self):
        g = seeded_gates(3, 30, 4)[0]
        for b in range(3):
            ref = mean_pairwise_corr([g[:, i, b].tolist() for i in range(4)])
            assert abs(inter_head_similarity(g, 0, b) - ref) <= 1e-6

    def test_domain(self):
        with pytest.raises(DomainError):
            inter_head_similarity(np.full((5, 1, 3), 0.5), 0, 0)
        with pytest.raises(DomainError):
            inter_head_similarity(np.full((1, 3, 3), 0.5), 0, 0)


class TestProfiler:
    def test_counts_and_shape(self):
        sp = SparseConfig(8, 4, 16)
        rep = profile_branches([32, 64, 128], sp, HeadLayout(2, 1, 4), runs=2)
        assert len(rep.rows) == 12 and not rep.mismatches()
        assert rep.selected_tokens == 32
        assert all(r.wall_ns > 0 for r in rep.rows)
        assert rep.slowest_branch() in ("cmp_scores", "slc_scores", "slc_attended", "win_attended")

    def test_no_timing_is_reproducible(self):
        sp = SparseConfig(8, 4, 16)
        a = analysis.cost_csv(profile_branches([64, 96], sp, timing=False))
        b = analysis.cost_csv(profile_branches([64, 96], sp, timing=False))
        assert a == b
        assert all(row["wall_ns"] == "0" for row in csv.DictReader(io.StringIO(a)))

    def test_selection_scoring_grows_quadratically(self):
        sp = SparseConfig(64, 32, 256)
        Ls = [1024, 2048, 4096, 8192]
        rep = profile_branches(Ls, sp, HeadLayout(1, 1, 2), timing=False)
        slc = rep.counts("slc_scores")
        win = rep.counts("win_attended")
        for a, b in zip(Ls, Ls[1:]):
            assert 3.5 <= slc[b] / slc[a] <= 4.5
        for a in (2048, 4096):
            assert 1.9 <= win[2 * a] / win[a] <= 2.1
        # the w(w+1)/2 warm-up still matters at L = 1024
        assert (win[1024], win[2048]) == (229504, 491648)
        # log-log slope of the scoring term tends to 2; every other stage stays at or below it
        slopes = {br: math.log2(rep.counts(br)[8192] / rep.counts(br)[4096])
                  for br in ("cmp_scores", "slc_scores", "slc_attended", "win_attended")}
        assert slopes["slc_scores"] == max(slopes.values())
        assert slopes["slc_attended"] < 1.5 and slopes["win_attended"] < 1.1

    def test_dominant_branch_flag(self):
        rep = profile_branches([64, 128], SparseConfig(4, 1, 2), HeadLayout(1, 1, 2), timing=False)
        assert rep.dominant_branch() == "cmp_scores"

    def test_short_context_rejected(self):
        with pytest.raises(ConfigError):
            profile_branches([32], SparseConfig(64, 32, 256))
        with pytest.raises(ConfigError):
            profile_branches([], SparseConfig(64, 32, 256))


class TestCsv:
    def test_sink_csv(self):
        text = analysis.sink_csv(detect_sinks([0.2] * 3, [1.0, 1.0, 1.0]))
        assert text.splitlines()[0] == "token_index,alpha,vnorm,is_sink"
        assert text.splitlines()[1] == "1,0.2,1.0,0"

    def test_gate_csv(self):
        text = analysis.gate_csv(gate_statistics(np.full((4, 2, 3), 0.5)))
        lines = text.splitlines()
        assert lines[0] == "layer,branch,mean,iqr,inter_head_corr"
        assert lines[1] == "0,cmp,0.5,0.0,0.0"
        assert len(lines) == 4

    def test_roundtrip(self, tmp_path):
        analysis.write_csv(tmp_path / "x.csv", ("a", "b"), [(1, 0.5), (2, True)])
        assert analysis.read_csv(tmp_path / "x.csv") == [{"a": "1", "b": "0.5"}, {"a": "2", "b": "1"}]
