import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clfq.metrics import (
    ComparisonRecord,
    EdcConfig,
    MetricError,
    combine_quality,
    compute_det,
    edc_curve,
    edc_pauc,
    read_edc_csv,
    read_scores_csv,
    toy_matcher,
    write_edc_csv,
    write_scores_csv,
)
from clfq.raster import ForegroundMask

from conftest import full_mask, make_grating


def rec(s, q, mated=True, idx=0):
    return ComparisonRecord(f"p{idx}", f"r{idx}", mated, s, q, q)


def records_from(pairs):
    return [rec(s, q, idx=i) for i, (s, q) in enumerate(pairs)]


def brute_force_edc(pairs, f, fractions, denominator="total"):
    """Independent oracle: plain-Python enumeration of every discard step.

    pairs: list of (similarity, quality) for mated comparisons.
    """
    n = len(pairs)
    scores = sorted(s for s, _ in pairs)
    k = max(1, math.ceil(f * n))
    t = scores[k - 1]
    order = sorted(range(n), key=lambda i: (pairs[i][1], i))
    out = []
    for frac in fractions:
        m = min(n, math.ceil(frac * n - 1e-9))
        kept = set(order[m:])
        errors = sum(1 for i in kept if pairs[i][0] <= t)
        denom = n if denominator == "total" else max(n - m, 1)
        out.append(errors / denom)
    return t, out


class TestCombineQuality:
    def test_min(self):
        assert combine_quality(80, 70) == 70
        assert combine_quality(0, 100) == 0

    def test_idempotent_commutative(self):
        for q1, q2 in [(3, 9), (50, 50), (100, 1)]:
            assert combine_quality(q1, q2) == combine_quality(q2, q1)
            assert combine_quality(q1, q1) == q1


class TestDet:
    def test_separated_distributions(self):
        det = compute_det([1.0, 1.0, 1.0], [0.0, 0.0])
        assert det.eer == 0.0

    def test_identical_distributions(self):
        rng = np.random.default_rng(0)
        xs = rng.normal(0, 1, 500)
        ys = rng.normal(0, 1, 500)
        det = compute_det(xs, ys)
        assert det.eer == pytest.approx(0.5, abs=0.05)

    def test_hand_example_eer_one_third(self):
        det = compute_det([0.9, 0.8, 0.4], [0.5, 0.3, 0.1])
        assert det.eer == pytest.approx(1.0 / 3.0)

    def test_empty_class_rejected(self):
        with pytest.raises(MetricError):
            compute_det([], [0.1])

    def test_eer_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(3)
        mated = rng.normal(1, 1, 200)
        nonmated = rng.normal(-1, 1, 200)
        base = compute_det(mated, nonmated).eer
        warped = compute_det(np.exp(mated), np.exp(nonmated)).eer
        assert warped == pytest.approx(base, abs=1e-12)


class TestEdcCurve:
    def test_four_record_hand_oracle(self):
        pairs = [(0.2, 10), (0.3, 20), (0.8, 70), (0.9, 80)]
        cfg = EdcConfig(f=0.5, discard_step=0.25, discard_max=0.75)
        curve = edc_curve(records_from(pairs), cfg)
        assert curve.t == pytest.approx(0.3)
        assert curve.fnmr[0] == pytest.approx(0.5)
        assert curve.fnmr[1] == pytest.approx(0.25)  # q=10 (an error) discarded
        assert curve.fractions.tolist() == [0.0, 0.25, 0.5, 0.75]

    def test_perfect_predictor_reaches_zero_at_f(self):
        # lowest qualities exactly on the error records
        pairs = [(0.1, 5), (0.2, 6), (0.9, 50), (0.8, 60), (0.95, 70), (0.85, 80), (0.9, 90), (0.99, 95)]
        cfg = EdcConfig(f=0.25, discard_step=0.125, discard_max=0.875)
        curve = edc_curve(records_from(pairs), cfg)
        assert curve.fnmr[0] == pytest.approx(0.25)
        at_f = np.searchsorted(curve.fractions, 0.25)
        assert curve.fnmr[at_f] == 0.0
        assert (np.diff(curve.fnmr) <= 1e-12).all()

    def test_matches_brute_force_on_random_data(self):
        rng = np.random.default_rng(5)
        for trial in range(30):
            n = int(rng.integers(10, 40))
            pairs = [(float(rng.uniform(0, 1)), int(rng.integers(0, 101))) for _ in range(n)]
            cfg = EdcConfig(f=float(rng.uniform(0.1, 0.6)))
            curve = edc_curve(records_from(pairs), cfg)
            t, oracle = brute_force_edc(pairs, cfg.f, curve.fractions)
            assert curve.t == pytest.approx(t)
            assert np.allclose(curve.fnmr, oracle), f"trial {trial}"

    def test_remaining_denominator_matches_oracle(self):
        rng = np.random.default_rng(8)
        pairs = [(float(rng.uniform(0, 1)), int(rng.integers(0, 101))) for _ in range(25)]
        cfg = EdcConfig(f=0.3, denominator="remaining")
        curve = edc_curve(records_from(pairs), cfg)
        _, oracle = brute_force_edc(pairs, cfg.f, curve.fractions, denominator="remaining")
        assert np.allclose(curve.fnmr, oracle)

    def test_all_equal_quality_expected_slope(self):
        # with all qualities tied, discards walk record order; over random
        # scores the expected curve decreases linearly at slope ~ -f
        rng = np.random.default_rng(11)
        pairs = [(float(rng.uniform(0, 1)), 50) for _ in range(1000)]
        cfg = EdcConfig(f=0.4)
        curve = edc_curve(records_from(pairs), cfg)
        _, oracle = brute_force_edc(pairs, cfg.f, curve.fractions)
        assert np.allclose(curve.fnmr, oracle)
        observed_slope = (curve.fnmr[-1] - curve.fnmr[0]) / (curve.fractions[-1] - curve.fractions[0])
        assert observed_slope == pytest.approx(-cfg.f, abs=0.05)

    def test_non_increasing_under_total_denominator(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(10, 60))
            pairs = [(float(rng.uniform(0, 1)), int(rng.integers(0, 101))) for _ in range(n)]
            curve = edc_curve(records_from(pairs), EdcConfig(f=0.3))
            assert (np.diff(curve.fnmr) <= 1e-12).all()

    def test_monotone_quality_transform_preserves_curve(self):
        rng = np.random.default_rng(4)
        pairs = [(float(rng.uniform(0, 1)), int(rng.integers(0, 51))) for _ in range(40)]
        warped = [(s, q * 2 - 1 if q > 0 else 0) for s, q in pairs]  # strictly increasing map
        cfg = EdcConfig(f=0.25)
        a = edc_curve(records_from(pairs), cfg)
        b = edc_curve(records_from(warped), cfg)
        assert np.array_equal(a.fnmr, b.fnmr)

    def test_degenerate_scores_rejected(self):
        pairs = [(0.5, q) for q in range(12)]
        with pytest.raises(MetricError, match="degenerate"):
            edc_curve(records_from(pairs), EdcConfig(f=0.25))

    def test_mated_filter(self):
        records = records_from([(0.1, 5), (0.9, 90)] * 6)
        records.append(ComparisonRecord("np", "nr", False, 0.0, 0, 0))
        curve = edc_curve(records, EdcConfig(f=0.5))
        assert curve.fnmr[0] == pytest.approx(0.5)

    def test_quality_bounds_enforced(self):
        with pytest.raises(MetricError):
            ComparisonRecord("a", "b", True, 0.5, -1, 50)


class TestPauc:
    def test_constant_curve_exact(self):
        pairs = [(0.1, 50)] * 5 + [(0.9, 50)] * 15
        # all errors share the lowest index ordering; constant FNMR only if
        # no error is discarded inside [0, 0.2]: use distinct high qualities
        pairs = [(0.1, 90), (0.2, 91), (0.3, 92), (0.4, 93)] + [(0.9, i) for i in range(16)]
        cfg = EdcConfig(f=0.2)
        curve = edc_curve(records_from(pairs), cfg)
        assert abs(edc_pauc(curve, 0.2) - 0.2 * 0.2) <= 1e-12

    def test_triangle(self):
        curve = edc_curve(records_from([(0.1, 1), (0.9, 50), (0.8, 60), (0.95, 70), (0.85, 80)]), EdcConfig(f=0.2, discard_step=0.2, discard_max=0.8))
        # decreasing from f to 0 by the first step at 0.2
        assert curve.fnmr[0] == pytest.approx(0.2)
        assert curve.fnmr[1] == pytest.approx(0.0)
        assert edc_pauc(curve, 0.2) == pytest.approx(0.5 * 0.2 * 0.2)

    def test_hand_built_three_point_curve(self):
        from clfq.metrics import EdcCurve

        curve = EdcCurve(
            fractions=np.array([0.0, 0.1, 0.2]),
            fnmr=np.array([0.5, 0.3, 0.2]),
            thresholds_u=np.zeros(3),
            t=0.0,
            f=0.5,
        )
        assert edc_pauc(curve, 0.2) == pytest.approx(0.065)

    def test_insufficient_coverage(self):
        from clfq.metrics import EdcCurve

        curve = EdcCurve(
            fractions=np.array([0.0, 0.1]),
            fnmr=np.array([0.5, 0.3]),
            thresholds_u=np.zeros(2),
            t=0.0,
            f=0.5,
        )
        with pytest.raises(MetricError):
            edc_pauc(curve, 0.2)


class TestPermutationOptimality:
    def test_perfect_predictor_has_minimal_pauc(self):
        """Exhaustive over all quality assignments for n <= 7."""
        rng = np.random.default_rng(1)
        cfg = EdcConfig(f=0.3, discard_step=0.05, discard_max=0.9)
        for n in (5, 6, 7):
            scores = sorted(rng.choice(np.linspace(0.1, 0.9, 17), size=n, replace=False))
            qualities = list(range(10, 10 + n))
            # perfect: lowest quality on lowest score (errors discarded first)
            perfect_pairs = list(zip(scores, qualities))
            perfect = edc_pauc(edc_curve(records_from(perfect_pairs), cfg), cfg.pauc_limit)
            for perm in itertools.permutations(qualities):
                pairs = list(zip(scores, perm))
                pauc = edc_pauc(edc_curve(records_from(pairs), cfg), cfg.pauc_limit)
                assert perfect <= pauc + 1e-12


class TestToyMatcher:
    def test_identical_samples(self):
        img = make_grating(128, 160, 9)
        m = full_mask(img)
        assert toy_matcher(img, m, img, m) == pytest.approx(1.0, abs=1e-6)

    def test_independent_patterns_low(self):
        from clfq.synth import generate_base_pattern

        scores = []
        for seed in range(6):
            a, ma = generate_base_pattern(seed)
            b, mb = generate_base_pattern(100 + seed)
            scores.append(toy_matcher(a, ma, b, mb))
        assert np.mean(scores) <= 0.6

    def test_degradation_ordering(self):
        from clfq.preprocess import PreprocessConfig
        from clfq.synth import generate_sample

        cfg = PreprocessConfig(rotation="asis")
        wins, n = 0, 0
        for seed in range(60):
            if n >= 20:
                break
            try:
                _, ref, mref, _, _ = generate_sample(81000 + seed, 98.0, 4200 + seed, cfg)
                _, mild, mmild, _, _ = generate_sample(82000 + seed, 90.0, 4200 + seed, cfg)
                _, heavy, mheavy, _, _ = generate_sample(83000 + seed, 5.0, 4200 + seed, cfg)
            except Exception:
                continue  # extreme degradations may not survive preprocessing
            n += 1
            s_mild = toy_matcher(ref, mref, mild, mmild)
            s_heavy = toy_matcher(ref, mref, heavy, mheavy)
            wins += s_heavy < s_mild
        assert n >= 15
        assert wins / n >= 0.9

    def test_no_overlap_errors(self):
        # masks too small to ever reach the minimum overlap pixel count
        img = make_grating(64, 64, 9)
        tiny_a = np.zeros((64, 64), dtype=bool)
        tiny_a[:10, :10] = True
        tiny_b = np.zeros((64, 64), dtype=bool)
        tiny_b[-10:, -10:] = True
        with pytest.raises(MetricError):
            toy_matcher(img, ForegroundMask(tiny_a), img, ForegroundMask(tiny_b), search_radius=2)


class TestCsv:
    def test_scores_roundtrip(self, tmp_path):
        records = [
            ComparisonRecord("a", "b", True, 0.123456789e-3, 10, 20),
            ComparisonRecord("c", "d", False, 7.0, 100, 0),
        ]
        path = tmp_path / "scores.csv"
        write_scores_csv(records, path)
        back = read_scores_csv(path)
        assert back == records

    def test_scores_header_checked(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(MetricError, match="header"):
            read_scores_csv(path)

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("probe_id,reference_id,mated,score,q1,q2\np,r,1,not-a-number,1,2\n")
        with pytest.raises(MetricError, match=":2"):
            read_scores_csv(path)

    def test_scientific_notation(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("probe_id,reference_id,mated,score,q1,q2\np,r,1,1.5e-3,1,2\n")
        assert read_scores_csv(path)[0].score == 1.5e-3

    def test_edc_roundtrip(self, tmp_path):
        curve = edc_curve(
            records_from([(0.1, 3), (0.5, 40), (0.8, 60), (0.9, 80), (0.2, 10), (0.7, 50),
                          (0.6, 45), (0.85, 70), (0.95, 90), (0.4, 20)]),
            EdcConfig(f=0.25),
        )
        path = tmp_path / "edc.csv"
        write_edc_csv(curve, path)
        fr, fn, us = read_edc_csv(path)
        assert np.array_equal(fr, curve.fractions)
        assert np.array_equal(fn, curve.fnmr)
        assert np.array_equal(us, curve.thresholds_u)


@given(
    st.lists(
        st.tuples(st.floats(min_value=0, max_value=1), st.integers(min_value=0, max_value=100)),
        min_size=10,
        max_size=40,
    )
)
@settings(max_examples=40, deadline=None)
def test_edc_property_matches_oracle(pairs):
    scores = [s for s, _ in pairs]
    if min(scores) == max(scores):
        return
    cfg = EdcConfig(f=0.3)
    curve = edc_curve(records_from(pairs), cfg)
    t, oracle = brute_force_edc(pairs, cfg.f, curve.fractions)
    assert curve.t == t
    assert np.allclose(curve.fnmr, oracle)
