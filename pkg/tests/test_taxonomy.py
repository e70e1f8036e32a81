import random

import pytest

from hkprompt.taxonomy import (
    Taxonomy,
    TaxonomyError,
    ancestors,
    decode_predictions,
    is_valid_path,
    load_taxonomy,
    prune_to_consistent,
    siblings,
)


def make_depth3() -> Taxonomy:
    rows = [
        "A\tROOT",
        "B\tROOT",
        "A1\tA",
        "A2\tA",
        "A3\tA",
        "B1\tB",
        "B2\tB",
        "A1a\tA1",
        "B2a\tB2",
    ]
    return load_taxonomy(rows)


class TestLoad:
    def test_minimal_tree(self):
        t = load_taxonomy(["A\tROOT", "B\tROOT", "A1\tA"])
        assert t.depth == 2
        assert [t.name_of(x) for x in t.level_vocab[0]] == ["A", "B"]
        assert [t.name_of(x) for x in t.level_vocab[1]] == ["A1"]

    def test_wide_two_level_taxonomy(self):
        # 7 level-1 domains, 134 level-2 fields: 141 labels, depth 2.
        rows = []
        fields_per_domain = [20, 20, 20, 20, 20, 20, 14]
        k = 0
        for d, n_fields in enumerate(fields_per_domain):
            rows.append(f"domain{d}\tROOT")
            for _ in range(n_fields):
                rows.append(f"field{k:03d}\tdomain{d}")
                k += 1
        t = load_taxonomy(rows)
        assert t.depth == 2
        assert len(t) == 141

    def test_cycle_error(self):
        with pytest.raises(TaxonomyError, match="cycle"):
            load_taxonomy(["X\tY", "Y\tX"])

    def test_orphan_child_error(self):
        with pytest.raises(TaxonomyError, match="orphan"):
            load_taxonomy(["A\tROOT", "A1\tmissing"])

    def test_duplicate_child_error(self):
        with pytest.raises(TaxonomyError, match="duplicate"):
            load_taxonomy(["A\tROOT", "A1\tA", "A1\tA"])

    def test_multiple_parents_error(self):
        with pytest.raises(TaxonomyError, match="multiple parents"):
            load_taxonomy(["A\tROOT", "B\tROOT", "C\tA", "C\tB"])

    def test_id_assignment_is_order_invariant(self):
        rows = ["B\tROOT", "A\tROOT", "A2\tA", "A1\tA", "B1\tB"]
        base = load_taxonomy(rows)
        rng = random.Random(7)
        for _ in range(20):
            shuffled = rows[:]
            rng.shuffle(shuffled)
            t = load_taxonomy(shuffled)
            assert [(n.id, n.name, n.level, n.parent) for n in t.nodes] == [
                (n.id, n.name, n.level, n.parent) for n in base.nodes
            ]

    def test_every_label_in_exactly_one_level_vocab(self):
        t = make_depth3()
        seen = [x for vocab in t.level_vocab for x in vocab]
        assert sorted(seen) == sorted(n.id for n in t.nodes)
        assert len(seen) == len(t)


class TestSiblings:
    def test_three_children(self):
        t = make_depth3()
        sibs = siblings(t, t.id_of("A1"))
        assert [t.name_of(x) for x in sibs] == ["A2", "A3"]

    def test_only_child_empty(self):
        t = make_depth3()
        assert siblings(t, t.id_of("A1a")) == []

    def test_level_one_mutual_siblings(self):
        t = load_taxonomy(["A\tROOT", "B\tROOT", "A1\tA"])
        assert siblings(t, t.id_of("A")) == [t.id_of("B")]

    def test_never_contains_self_and_shares_parent(self):
        t = make_depth3()
        for node in t.nodes:
            sibs = siblings(t, node.id)
            assert node.id not in sibs
            assert all(t.node(s).parent == node.parent for s in sibs)

    def test_unknown_label(self):
        t = make_depth3()
        with pytest.raises(TaxonomyError):
            siblings(t, 999)


class TestAncestors:
    def test_single_ancestor(self):
        t = make_depth3()
        assert ancestors(t, t.id_of("A1")) == [t.id_of("A")]

    def test_level_one_empty(self):
        t = make_depth3()
        assert ancestors(t, t.id_of("A")) == []

    def test_depth3_chain(self):
        t = make_depth3()
        assert ancestors(t, t.id_of("A1a")) == [t.id_of("A"), t.id_of("A1")]


class TestPrune:
    def test_already_consistent(self):
        t = make_depth3()
        s = {t.id_of("A"), t.id_of("A1")}
        assert prune_to_consistent(t, s) == s

    def test_missing_parent_drops_child(self):
        t = make_depth3()
        assert prune_to_consistent(t, {t.id_of("A1")}) == set()

    def test_hand_walked_mixed_set(self):
        # {A, B, A1, B2a} with B2 missing: B2a's parent chain breaks at B2.
        t = make_depth3()
        s = {t.id_of("A"), t.id_of("B"), t.id_of("A1"), t.id_of("B2a")}
        assert prune_to_consistent(t, s) == {t.id_of("A"), t.id_of("B"), t.id_of("A1")}

    def test_idempotent(self):
        t = make_depth3()
        rng = random.Random(3)
        ids = [n.id for n in t.nodes]
        for _ in range(50):
            s = set(rng.sample(ids, rng.randint(0, len(ids))))
            once = prune_to_consistent(t, s)
            assert prune_to_consistent(t, once) == once


class TestDecode:
    def test_single_path_greedy(self):
        t = make_depth3()
        lvl1 = [0.0] * len(t.level_vocab[0])
        lvl1[t.level_index(t.id_of("A"))] = 5.0
        lvl2 = [0.0] * len(t.level_vocab[1])
        lvl2[t.level_index(t.id_of("A2"))] = 3.0
        # B1 scores higher than A2 but is not a child of A.
        lvl2[t.level_index(t.id_of("B1"))] = 9.0
        lvl3 = [0.0] * len(t.level_vocab[2])
        got = decode_predictions(t, [lvl1, lvl2, lvl3], mode="single_path")
        assert t.id_of("A") in got and t.id_of("A2") in got

    def test_single_path_truncates_without_children(self):
        # A2 has no children: depth-3 taxonomy yields a depth-2 path.
        t = make_depth3()
        lvl1 = [0.0] * len(t.level_vocab[0])
        lvl1[t.level_index(t.id_of("A"))] = 5.0
        lvl2 = [0.0] * len(t.level_vocab[1])
        lvl2[t.level_index(t.id_of("A2"))] = 5.0
        lvl3 = [0.0] * len(t.level_vocab[2])
        got = decode_predictions(t, [lvl1, lvl2, lvl3], mode="single_path")
        assert got == {t.id_of("A"), t.id_of("A2")}

    def test_multi_path_all_below_threshold(self):
        t = make_depth3()
        logits = [[-10.0] * len(v) for v in t.level_vocab]
        assert decode_predictions(t, logits, mode="multi_path") == set()

    def test_multi_path_prunes_orphans(self):
        t = make_depth3()
        logits = [[-10.0] * len(v) for v in t.level_vocab]
        logits[0][t.level_index(t.id_of("B"))] = 10.0
        logits[1][t.level_index(t.id_of("A1"))] = 10.0  # A absent: pruned
        got = decode_predictions(t, logits, mode="multi_path")
        assert got == {t.id_of("B")}

    def test_single_path_always_valid(self):
        t = make_depth3()
        rng = random.Random(11)
        for _ in range(200):
            logits = [[rng.gauss(0, 3) for _ in v] for v in t.level_vocab]
            got = decode_predictions(t, logits, mode="single_path")
            ordered = sorted(got, key=lambda x: t.node(x).level)
            assert is_valid_path(t, ordered)
