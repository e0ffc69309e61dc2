"""Metric tests: examples, the exhaustive EER oracle, and report structure."""

import numpy as np
import pytest

from labelaware.evalkit import (
    ScoredTrial,
    accuracy,
    eer,
    eer_from_scores,
    format_report,
    macro_f1,
    pooled_trials,
    report_to_csv,
    split_report,
    trials_from_csv,
    trials_to_csv,
)


def trial(uid, true, scores):
    scores = np.asarray(scores, dtype=np.float64)
    return ScoredTrial(uid, true, scores / scores.sum())


def one_hot_trial(uid, true, pred, n=4, confidence=0.97):
    scores = np.full(n, (1 - confidence) / (n - 1))
    scores[pred] = confidence
    return ScoredTrial(uid, true, scores)


class TestAccuracy:
    def test_all_correct(self):
        trials = [one_hot_trial(i, i % 4, i % 4) for i in range(8)]
        assert accuracy(trials) == 1.0

    def test_uniform_ties_break_to_class_zero(self):
        trials = [trial(i, 0, np.ones(5)) for i in range(6)]
        assert accuracy(trials) == 1.0
        trials = [trial(i, 2, np.ones(5)) for i in range(6)]
        assert accuracy(trials) == 0.0

    def test_three_of_four(self):
        trials = [one_hot_trial(0, 1, 1), one_hot_trial(1, 2, 2),
                  one_hot_trial(2, 3, 3), one_hot_trial(3, 0, 1)]
        assert accuracy(trials) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accuracy([])


class TestMacroF1:
    def test_perfect(self):
        trials = [one_hot_trial(i, i % 3, i % 3) for i in range(9)]
        assert macro_f1(trials) == 1.0

    def test_hand_computed_confusion(self):
        # class 0: TP=1, FN=1 (predicted as 1); class 1: TP=2, FP=1
        trials = [
            one_hot_trial(0, 0, 0),
            one_hot_trial(1, 0, 1),
            one_hot_trial(2, 1, 1),
            one_hot_trial(3, 1, 1),
        ]
        f1_0 = 2 * (1 / 1 * 1 / 2) / (1 + 1 / 2)      # 0.6667
        f1_1 = 2 * (2 / 3 * 1) / (2 / 3 + 1)          # 0.8
        expected = (f1_0 + f1_1) / 2                   # 0.7333
        assert abs(macro_f1(trials) - expected) < 1e-9
        assert abs(expected - 0.73333333) < 1e-6

    def test_never_predicted_class_contributes_zero(self):
        # class 2 has true trials but is never predicted
        trials = [
            one_hot_trial(0, 0, 0, n=3),
            one_hot_trial(1, 1, 1, n=3),
            one_hot_trial(2, 2, 0, n=3),
            one_hot_trial(3, 2, 1, n=3),
        ]
        f1_0 = 2 * 1 / (2 * 1 + 1 + 0)
        f1_1 = 2 * 1 / (2 * 1 + 1 + 0)
        expected = (f1_0 + f1_1 + 0.0) / 3
        assert abs(macro_f1(trials) - expected) < 1e-9

    def test_absent_class_not_in_mean(self):
        # scores have 4 classes but only classes 0/1 ever appear as truth
        trials = [one_hot_trial(0, 0, 0), one_hot_trial(1, 1, 1)]
        assert macro_f1(trials) == 1.0


def oracle_eer(tar, non):
    """Exhaustive threshold enumeration with the same crossing interpolation."""
    thresholds = sorted(set(list(tar) + list(non))) + [float("inf")]
    ops = []
    for th in thresholds:
        far = sum(1 for s in non if s >= th) / len(non)
        frr = sum(1 for s in tar if s < th) / len(tar)
        ops.append((far, frr))
    for i, (far, frr) in enumerate(ops):
        if far - frr <= 0.0:
            if far - frr == 0.0:
                return far
            f1, m1 = ops[i - 1]
            f2, m2 = far, frr
            d1, d2 = f1 - m1, f2 - m2
            alpha = d1 / (d1 - d2)
            return f1 + alpha * (f2 - f1)
    raise AssertionError("no crossing found")


class TestEER:
    def test_perfectly_separated(self):
        assert eer_from_scores(np.array([0.8, 0.9, 0.7]), np.array([0.1, 0.2, 0.3])) == 0.0

    def test_identical_distributions(self):
        s = np.array([0.2, 0.4, 0.6, 0.8])
        assert eer_from_scores(s, s.copy()) == 0.5

    def test_matches_exhaustive_oracle_on_seeded_pools(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            tar = rng.normal(loc=rng.uniform(0, 1.5), size=rng.integers(5, 120))
            non = rng.normal(size=rng.integers(5, 120))
            got = eer_from_scores(tar, non)
            want = oracle_eer(tar.tolist(), non.tolist())
            assert abs(got - want) < 1e-9

    def test_200_pooled_trials_oracle(self):
        rng = np.random.default_rng(99)
        trials = []
        for i in range(50):
            true = int(rng.integers(4))
            scores = rng.dirichlet(np.ones(4) * (3.0 if i % 2 else 0.7))
            trials.append(ScoredTrial(i, true, scores))
        tar, non = pooled_trials(trials)
        assert tar.size + non.size == 200
        assert abs(eer(trials) - oracle_eer(tar.tolist(), non.tolist())) < 1e-9

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(5)
        tar = rng.uniform(0.3, 1.0, size=40)
        non = rng.uniform(0.0, 0.7, size=60)
        base = eer_from_scores(tar, non)
        for f in (lambda x: 2 * x + 1, lambda x: x ** 3, np.exp):
            assert abs(eer_from_scores(f(tar), f(non)) - base) < 1e-12

    def test_chance_is_half_bound(self):
        rng = np.random.default_rng(6)
        tar = rng.normal(size=500)
        non = rng.normal(size=500)
        assert eer_from_scores(tar, non) <= 0.5 + 0.1

    def test_empty_side_rejected(self):
        with pytest.raises(ValueError):
            eer_from_scores(np.array([]), np.array([0.1]))
        with pytest.raises(ValueError):
            eer_from_scores(np.array([0.4]), np.array([]))


class TestTrialValidation:
    def test_scores_must_be_posteriors(self):
        with pytest.raises(ValueError):
            ScoredTrial(0, 0, np.array([0.9, 0.9]))
        with pytest.raises(ValueError):
            ScoredTrial(0, 0, np.array([1.2, -0.2]))


def make_trials(rng, overlap, nonoverlap, n_each=10, skill=3.0):
    trials = []
    classes = sorted(overlap | nonoverlap)
    uid = 0
    for c in classes:
        for _ in range(n_each):
            alpha = np.ones(len(classes))
            alpha[classes.index(c)] += skill
            trials.append(ScoredTrial(uid, c, rng.dirichlet(alpha)))
            uid += 1
    return trials


class TestSplitReport:
    OVERLAP = frozenset({0, 1, 2})
    NONOVER = frozenset({3, 4})

    def test_subset_cells_match_external_filtering(self):
        trials = make_trials(np.random.default_rng(0), self.OVERLAP, self.NONOVER)
        report = split_report(trials, self.OVERLAP, self.NONOVER)
        o = [t for t in trials if t.true_label in self.OVERLAP]
        n = [t for t in trials if t.true_label in self.NONOVER]
        assert report.overall.accuracy == accuracy(trials)
        assert report.overlap.accuracy == accuracy(o)
        assert report.nonoverlap.accuracy == accuracy(n)
        assert report.overlap.macro_f1 == macro_f1(o)
        assert report.nonoverlap.eer == eer(n)
        assert report.overall.num_trials == len(trials)

    def test_class_counts_reported(self):
        trials = make_trials(np.random.default_rng(1), self.OVERLAP, self.NONOVER)
        report = split_report(trials, self.OVERLAP, self.NONOVER)
        assert report.overlap.num_classes == 3
        assert report.nonoverlap.num_classes == 2

    def test_empty_subset_flagged_not_zero(self):
        trials = [t for t in make_trials(np.random.default_rng(2), self.OVERLAP,
                                         self.NONOVER)
                  if t.true_label in self.OVERLAP]
        report = split_report(trials, self.OVERLAP, self.NONOVER)
        assert report.nonoverlap.num_trials == 0
        assert report.nonoverlap.accuracy is None
        assert report.nonoverlap.eer is None
        assert report.overlap.accuracy is not None

    def test_unknown_label_rejected(self):
        bad = [one_hot_trial(0, 9, 1, n=10)]
        with pytest.raises(ValueError, match="outside"):
            split_report(bad, self.OVERLAP, self.NONOVER)

    def test_reorder_invariance(self):
        trials = make_trials(np.random.default_rng(3), self.OVERLAP, self.NONOVER)
        a = split_report(trials, self.OVERLAP, self.NONOVER)
        b = split_report(list(reversed(trials)), self.OVERLAP, self.NONOVER)
        assert a.overall == b.overall
        assert a.overlap == b.overlap
        assert a.nonoverlap == b.nonoverlap


class TestCsvIO:
    def test_trials_round_trip(self, tmp_path):
        trials = make_trials(np.random.default_rng(4), {0, 1}, {2})
        path = tmp_path / "trials.csv"
        trials_to_csv(trials, path)
        back = trials_from_csv(path)
        assert len(back) == len(trials)
        for a, b in zip(trials, back):
            assert a.utterance_id == b.utterance_id
            assert a.true_label == b.true_label
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_report_csv_and_table(self, tmp_path):
        trials = make_trials(np.random.default_rng(5), {0, 1}, {2})
        report = split_report(trials, {0, 1}, {2})
        path = tmp_path / "metrics.csv"
        report_to_csv(report, path)
        text = path.read_text()
        assert text.startswith("subset,num_classes,num_trials,accuracy,macro_f1,eer")
        assert "overall" in text and "nonoverlap" in text
        table = format_report(report)
        assert "overall" in table and "accuracy" in table

    def test_rewrite_is_byte_identical(self, tmp_path):
        trials = make_trials(np.random.default_rng(6), {0, 1}, {2})
        report = split_report(trials, {0, 1}, {2})
        report_to_csv(report, tmp_path / "a.csv")
        report_to_csv(report, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
