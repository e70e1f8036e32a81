import random

import pytest

from hkprompt.metrics import (
    constrained_f1,
    level_accuracy,
    metric_report,
    micro_macro_f1,
)
from hkprompt.taxonomy import load_taxonomy

# Hand-computed confusion tables below are the frozen oracle for these
# fixtures; the implementation must reproduce them exactly.


def two_level_tax():
    return load_taxonomy(["A\tROOT", "B\tROOT", "A1\tA", "A2\tA", "B1\tB"])


def ids(t, *names):
    return {t.id_of(n) for n in names}


class TestMicroMacro:
    def test_perfect(self):
        t = two_level_tax()
        gold = [ids(t, "A", "A1"), ids(t, "B", "B1")]
        micro, macro = micro_macro_f1(gold, gold, [n.id for n in t.nodes])
        assert micro == 1.0
        # A2 never occurs: per-label F1 0 by convention, so macro < 1 here.
        assert macro == pytest.approx(4 / 5)

    def test_disjoint(self):
        t = two_level_tax()
        gold = [ids(t, "A", "A1")]
        pred = [ids(t, "B", "B1")]
        micro, macro = micro_macro_f1(gold, pred, [n.id for n in t.nodes])
        assert micro == 0.0
        assert macro == 0.0

    def test_three_doc_fixture(self):
        # gold {A,A1}/{A,A2}/{B,B1}; pred {A,A1}/{A,A1}/{B,B1}
        # Pooled: TP=5, FP=1, FN=1 -> micro = 10/12 = 5/6.
        # Per label: A=1, A1=2/3, A2=0, B=1, B1=1 -> macro = 11/15.
        t = two_level_tax()
        gold = [ids(t, "A", "A1"), ids(t, "A", "A2"), ids(t, "B", "B1")]
        pred = [ids(t, "A", "A1"), ids(t, "A", "A1"), ids(t, "B", "B1")]
        micro, macro = micro_macro_f1(gold, pred, [n.id for n in t.nodes])
        assert micro == pytest.approx(5 / 6, abs=1e-12)
        assert macro == pytest.approx(11 / 15, abs=1e-12)

    def test_relabeling_permutation_invariance(self):
        t = two_level_tax()
        universe = [n.id for n in t.nodes]
        rng = random.Random(5)
        gold = [set(rng.sample(universe, 2)) for _ in range(6)]
        pred = [set(rng.sample(universe, 2)) for _ in range(6)]
        base = micro_macro_f1(gold, pred, universe)
        perm = {x: y for x, y in zip(universe, rng.sample(universe, len(universe)))}
        mapped = micro_macro_f1(
            [{perm[x] for x in g} for g in gold],
            [{perm[x] for x in p} for p in pred],
            [perm[x] for x in universe],
        )
        assert mapped == pytest.approx(base, abs=1e-12)

    def test_range(self):
        t = two_level_tax()
        universe = [n.id for n in t.nodes]
        rng = random.Random(9)
        for _ in range(50):
            gold = [set(rng.sample(universe, rng.randint(0, 3))) for _ in range(4)]
            pred = [set(rng.sample(universe, rng.randint(0, 3))) for _ in range(4)]
            micro, macro = micro_macro_f1(gold, pred, universe)
            assert 0.0 <= micro <= 1.0 and 0.0 <= macro <= 1.0


class TestConstrained:
    def test_consistent_preds_equal_plain(self):
        t = two_level_tax()
        gold = [ids(t, "A", "A1"), ids(t, "B", "B1")]
        pred = [ids(t, "A", "A2"), ids(t, "B", "B1")]
        assert constrained_f1(gold, pred, t) == micro_macro_f1(
            gold, pred, [n.id for n in t.nodes]
        )

    def test_orphan_prediction_scores_zero(self):
        t = two_level_tax()
        gold = [ids(t, "A", "A1")]
        pred = [ids(t, "A1")]
        c_micro, _ = constrained_f1(gold, pred, t)
        assert c_micro == 0.0

    def test_mixed_fixture_hand_pruned(self):
        # doc1 consistent {A,A1}; doc2 pred {A,B1}: B missing, so prune to {A}.
        # Pooled after prune: TP=2, FP=1, FN=2 -> c_micro = 4/7.
        # Per label: A=2/3, A1=1, A2=0, B=0, B1=0 -> c_macro = 1/3.
        t = two_level_tax()
        gold = [ids(t, "A", "A1"), ids(t, "B", "B1")]
        pred = [ids(t, "A", "A1"), ids(t, "A", "B1")]
        c_micro, c_macro = constrained_f1(gold, pred, t)
        assert c_micro == pytest.approx(4 / 7, abs=1e-12)
        assert c_macro == pytest.approx(1 / 3, abs=1e-12)


class TestLevelAccuracy:
    def test_all_correct(self):
        t = two_level_tax()
        gold = [ids(t, "A", "A1"), ids(t, "B", "B1")]
        assert level_accuracy(gold, gold, t, 2) == 1.0

    def test_three_of_four(self):
        t = two_level_tax()
        gold = [ids(t, "A", "A1")] * 4
        pred = [ids(t, "A", "A1")] * 3 + [ids(t, "A", "A2")]
        assert level_accuracy(gold, pred, t, 2) == 0.75

    def test_multi_gold_subset_rule(self):
        # Two deepest golds, only one predicted: subset fails, doc is wrong.
        t = two_level_tax()
        gold = [ids(t, "A", "A1", "A2")]
        pred = [ids(t, "A", "A1")]
        assert level_accuracy(gold, pred, t, 2) == 0.0
        assert level_accuracy(gold, pred, t, 1) == 1.0

    def test_bad_level(self):
        t = two_level_tax()
        with pytest.raises(ValueError):
            level_accuracy([], [], t, 3)


def test_report_schema():
    t = two_level_tax()
    gold = [ids(t, "A", "A1")]
    report = metric_report(gold, gold, t)
    assert set(report) == {"micro_f1", "macro_f1", "c_micro_f1", "c_macro_f1", "level_acc"}
    assert report["micro_f1"] == 1.0
    assert set(report["level_acc"]) == {"1", "2"}
