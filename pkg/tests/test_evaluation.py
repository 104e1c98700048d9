"""Metric tests: thresholds, confusion, PR/AUC, alpha*, events, tails."""

import numpy as np
import pytest

from eelab import evaluation as ev
from eelab.errors import DegenerateDistributionError


class TestThreshold:
    def test_constant_series(self):
        t = ev.threshold_from_series([3.0, 3.0, 3.0], k=2.0)
        assert t.z_star == 3.0

    def test_hand_example(self):
        # series (0,0,0,0,10): mean 2, population std 4 -> z* = 10
        t = ev.threshold_from_series([0, 0, 0, 0, 10], k=2.0)
        assert t.z_star == pytest.approx(10.0)

    def test_standard_normal_large_n(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal(200_000)
        t = ev.threshold_from_series(z, k=2.0)
        assert t.z_star == pytest.approx(2.0, abs=0.02)


class TestConfusion:
    def test_perfect_predictor(self):
        z = np.array([0.0, 1.0, 3.0, 0.5, 4.0])
        c = ev.confusion(z, z, 2.0, 2.0)
        assert c.fp == 0 and c.fn == 0
        assert c.tp == 2 and c.tn == 3

    def test_swapped_pair(self):
        c = ev.confusion([1.0, 3.0], [3.0, 1.0], 2.0, 2.0)
        assert (c.tp, c.tn, c.fp, c.fn) == (0, 0, 1, 1)

    def test_all_negative_predictor(self):
        z = np.array([0.0, 3.0, 4.0, 1.0])
        c = ev.confusion(z, np.zeros(4), 2.0, 2.0)
        assert c.fn == 2 and c.fp == 0

    def test_boundary_equality_is_non_extreme(self):
        c = ev.confusion([2.0], [2.0], 2.0, 2.0)
        assert c.tn == 1

    def test_f1_hand_example(self):
        c = ev.ConfusionCounts(tp=8, tn=0, fp=2, fn=2)
        assert ev.f1_score(c) == pytest.approx(0.8)

    def test_f1_harmonic_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            tp, tn, fp, fn = rng.integers(0, 30, size=4)
            c = ev.ConfusionCounts(int(tp), int(tn), int(fp), int(fn))
            s, r = c.precision, c.recall
            expected = 2 * s * r / (s + r) if s + r > 0 else 0.0
            assert ev.f1_score(c) == pytest.approx(expected)
            if c.fp == 0 and c.fn == 0 and c.tp > 0:
                assert ev.f1_score(c) == 1.0


class TestPrCurve:
    def test_perfect_separation(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal(500)
        curve = ev.pr_curve(z, z, z_star=1.0)
        assert curve.auc == pytest.approx(1.0, abs=1e-12)

    def test_random_predictor_near_event_rate(self):
        rng = np.random.default_rng(3)
        n = 10_000
        z = rng.standard_normal(n)
        zhat = rng.standard_normal(n)
        omega = 0.05
        z_star = np.quantile(z, 1 - omega)
        curve = ev.pr_curve(z, zhat, z_star)
        assert curve.auc == pytest.approx(omega, abs=0.05)

    def test_constant_predictor(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal(400)
        z_star = np.quantile(z, 0.9)
        omega = np.mean(z > z_star)
        curve = ev.pr_curve(z, np.zeros_like(z), z_star)
        assert curve.auc == pytest.approx(omega, abs=1e-12)
        assert curve.recall[0] == 0.0 and curve.recall[-1] == 1.0

    def test_auc_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal(300)
        zhat = z + 0.8 * rng.standard_normal(300)
        a = ev.pr_curve(z, zhat, 1.0).auc
        b = ev.pr_curve(z, np.exp(zhat) + 3.0, 1.0).auc
        assert a == pytest.approx(b, abs=1e-12)

    def test_no_positives_error(self):
        with pytest.raises(ValueError):
            ev.pr_curve([0.0, 0.1], [0.0, 0.1], z_star=5.0)

    def test_recall_monotone_along_sweep(self):
        rng = np.random.default_rng(6)
        z = rng.standard_normal(200)
        zhat = rng.standard_normal(200)
        curve = ev.pr_curve(z, zhat, 0.5)
        assert np.all(np.diff(curve.recall) >= 0)


class TestAlphaStar:
    def test_perfect_predictor(self):
        rng = np.random.default_rng(7)
        z = rng.standard_normal(2000)
        a = ev.alpha_star(z, z)
        assert a == pytest.approx(1.0 - 0.01, abs=1e-9)

    def test_random_predictor_near_zero(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal(10_000)
        zhat = rng.standard_normal(10_000)
        assert abs(ev.alpha_star(z, zhat)) < 0.05

    def test_anti_predictor_not_clipped(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal(5000)
        a = ev.alpha_star(z, -z)
        assert a <= 0.0

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(10)
        z = rng.standard_normal(1000)
        zhat = z + rng.standard_normal(1000)
        a = ev.alpha_star(z, zhat)
        b = ev.alpha_star(z, np.tanh(zhat) * 5 - 1)
        assert a == pytest.approx(b, abs=1e-12)

    def test_degenerate_series_rejected(self):
        with pytest.raises(DegenerateDistributionError):
            ev.alpha_star(np.ones(100), np.ones(100))


class TestCountEvents:
    def test_sine_peaks(self):
        t = np.arange(0.0, 100.0001, 0.1)
        z = np.sin(2 * np.pi * t / 10.0)
        events = ev.count_events(z, 0.5, min_separation=5.0, dt=0.1)
        assert events.size == 10

    def test_below_threshold(self):
        z = np.sin(np.arange(0, 50, 0.1))
        assert ev.count_events(z, 2.0, 5.0, dt=0.1).size == 0

    def test_equal_peaks_tie_keeps_earlier(self):
        t = np.arange(0.0, 3.0001, 0.01)
        z = (np.exp(-0.5 * ((t - 1.0) / 0.08) ** 2)
             + np.exp(-0.5 * ((t - 2.0) / 0.08) ** 2))
        events = ev.count_events(z, 0.5, min_separation=5.0, dt=0.01)
        assert events.size == 1
        assert events[0] == pytest.approx(100, abs=1)  # the earlier peak

    def test_translation_invariance(self):
        t = np.arange(0.0, 60.0001, 0.1)
        z = np.sin(2 * np.pi * t / 10.0)
        base = ev.count_events(z, 0.5, 5.0, dt=0.1).size
        shifted = ev.count_events(np.roll(z, 120), 0.5, 5.0, dt=0.1)
        # interior translation keeps the count within one boundary peak
        assert abs(shifted.size - base) <= 1
        # adding a below-threshold offset in quiescent regions changes nothing
        z2 = z.copy()
        z2[z2 < 0.0] += 0.2
        assert ev.count_events(z2, 0.5, 5.0, dt=0.1).size == base

    def test_estimate_min_separation(self):
        t = np.arange(0.0, 100.0001, 0.1)
        z = np.sin(2 * np.pi * t / 10.0)
        sep = ev.estimate_min_separation(z, 0.5, dt=0.1)
        assert sep == pytest.approx(10.0, abs=0.2)


class TestTailDistance:
    def test_identical_samples(self):
        rng = np.random.default_rng(11)
        z = rng.standard_normal(500)
        assert ev.tail_distance(z, z.copy()) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(12)
        p = rng.standard_normal(400)
        q = rng.standard_normal(400) + 0.5
        assert ev.tail_distance(p, q) == pytest.approx(
            ev.tail_distance(q, p), rel=1e-12)

    def test_gap_monotonicity(self):
        rng = np.random.default_rng(13)
        base = rng.standard_normal(4000)
        other = rng.standard_normal(4000)
        d_small = ev.tail_distance(base, other + 0.3)
        d_large = ev.tail_distance(base, other + 1.0)
        assert 0.0 < d_small < d_large

    def test_disjoint_ranges(self):
        assert ev.tail_distance(np.zeros(50) + np.arange(50) * 0.01,
                                10.0 + np.arange(50) * 0.01) == np.inf


class TestReports:
    def test_metric_report_roundtrip(self, tmp_path):
        metrics = dict(f1=0.8, auc=0.9, alpha_star=0.55, n_ee_true=12,
                       n_ee_pred=10, delta_n_ee=2, tail_distance_D=0.07,
                       tau=10.0, z_star=0.3127)
        path = tmp_path / "metrics.txt"
        ev.write_metric_report(path, metrics)
        back = ev.read_metric_report(path)
        for k, v in metrics.items():
            assert back[k] == pytest.approx(v, rel=1e-15)

    def test_missing_key_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            ev.write_metric_report(tmp_path / "m.txt", {"f1": 1.0})

    def test_pr_csv(self, tmp_path):
        rng = np.random.default_rng(14)
        z = rng.standard_normal(100)
        curve = ev.pr_curve(z, z + rng.standard_normal(100), 0.8)
        path = tmp_path / "pr.csv"
        ev.write_pr_curve_csv(path, curve)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "threshold,precision,recall"
        assert len(lines) == len(curve.thresholds) + 1
