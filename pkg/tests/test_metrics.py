import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tisr.corpus import FINDINGS, generate_dataset
from tisr.metrics import (
    METRIC_COLUMNS,
    LabelRule,
    bleu,
    ce_labels,
    count_chunks,
    default_rules,
    evaluate_corpus,
    lcs_length,
    load_rules,
    meteor_exact,
    meteor_sentence,
    modified_precision,
    prf1,
    rouge_l,
    save_rules,
)

NAMES = [f.name for f in FINDINGS]
REPORTS = [s.report for s in generate_dataset(11, 40)]
WORDS = sorted({w for r in REPORTS for w in r.split()})


def onehot(*names):
    v = np.zeros(14, dtype=int)
    for n in names:
        v[NAMES.index(n)] = 1
    return v


class TestBleu:
    def test_clipped_unigram_precision(self):
        p = modified_precision("the the the the the the the", "the cat is on the mat", 1)
        assert abs(p - 2 / 7) < 1e-12

    def test_identical(self):
        assert bleu(["a b c d"], ["a b c d"]) == [1.0, 1.0, 1.0, 1.0]

    def test_empty_candidate(self):
        assert bleu([""], ["a b c"]) == [0.0, 0.0, 0.0, 0.0]

    def test_brevity_penalty(self):
        b = bleu(["a b"], ["a b c d"], max_n=1)
        assert abs(b[0] - math.exp(1 - 4 / 2)) < 1e-12

    def test_corpus_level_pooling(self):
        # corpus precision pools counts rather than averaging sentence scores
        b = bleu(["a b", "x y z w"], ["a b", "p q r s"], max_n=1)
        assert abs(b[0] - 2 / 6) < 1e-12

    def test_zero_order_floored(self):
        b = bleu(["a b c"], ["a x c"])
        assert b[1] == pytest.approx(math.sqrt(2 / 3 * 1e-9))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bleu(["a"], ["a", "b"])
        with pytest.raises(ValueError):
            bleu([], [])

    def test_mixed_length_corpus_need_not_be_monotone(self):
        # a one-token miss lowers unigram precision more than bigram precision
        b = bleu(["z", "a b"], ["q", "a b"], max_n=2)
        assert b[1] > b[0]


class TestRouge:
    def test_hand_lcs(self):
        assert lcs_length("a b c d e".split(), "a c e".split()) == 3
        assert abs(rouge_l(["a b c d e"], ["a c e"]) - 0.75) < 1e-12

    def test_disjoint(self):
        assert rouge_l(["a b"], ["c d"]) == 0.0

    def test_recall_weighted_beta(self):
        # P=0.6, R=1 with beta=2 favours recall
        assert rouge_l(["a b c d e"], ["a c e"], beta=2.0) == pytest.approx(5 * 0.6 / (1 + 4 * 0.6))


class TestMeteor:
    def test_identical_four_tokens(self):
        assert abs(meteor_exact(["a b c d"], ["a b c d"]) - 0.9921875) < 1e-12

    def test_reversed_pair(self):
        assert abs(meteor_sentence("b a", "a b") - 0.5) < 1e-12

    def test_zero_matches(self):
        assert meteor_exact(["x y"], ["a b"]) == 0.0

    def test_chunks(self):
        assert count_chunks([(0, 0), (1, 1), (3, 2), (4, 3)]) == 2

    def test_fmean_recall_weighted(self):
        # candidate "a", reference "a b": P=1, R=1/2, one chunk of one match
        expected = (1 * 0.5 / (0.9 * 1 + 0.1 * 0.5)) * (1 - 0.5)
        assert meteor_sentence("a", "a b") == pytest.approx(expected, abs=1e-12)

    def test_prefers_contiguous_alignment(self):
        # "a b" could align the first "a" or the second; the run keeps one chunk
        assert meteor_sentence("a b", "a x a b") == pytest.approx(
            (1 * 0.5 / (0.9 + 0.05)) * (1 - 0.5 * (1 / 2) ** 3)
        )


class TestLabels:
    def test_direct_trigger(self):
        np.testing.assert_array_equal(ce_labels("atelectasis present ."), onehot("atelectasis"))

    def test_negation(self):
        assert ce_labels("no pleural effusion .").sum() == 0

    def test_negation_is_sentence_scoped(self):
        out = ce_labels("no pneumothorax . there is a small pleural effusion .")
        np.testing.assert_array_equal(out, onehot("effusion"))

    def test_case_insensitive_and_idempotent(self):
        text = "Mild CARDIOMEGALY is seen . No edema ."
        a = ce_labels(text)
        np.testing.assert_array_equal(a, ce_labels(text.lower()))
        np.testing.assert_array_equal(a, ce_labels(text))
        np.testing.assert_array_equal(a, onehot("cardiomegaly"))

    def test_custom_rules_round_trip(self, tmp_path):
        rules = default_rules() + [LabelRule("extra", ("foo bar", "baz"), ("without",))]
        save_rules(rules, tmp_path / "rules.tsv")
        back = load_rules(tmp_path / "rules.tsv")
        assert back == rules
        np.testing.assert_array_equal(ce_labels("baz . without foo bar .", back)[-1:], [1])
        np.testing.assert_array_equal(ce_labels("without foo bar .", back)[-1:], [0])

    def test_corpus_consistency(self):
        for s in generate_dataset(21, 200, max_findings=4):
            np.testing.assert_array_equal(ce_labels(s.report), s.labels)


class TestPrf1:
    def test_hand_count(self):
        p, r, f = prf1([onehot("atelectasis", "cardiomegaly")], [onehot("atelectasis")])
        assert (p, r) == (0.5, 1.0)
        assert abs(f - 2 / 3) < 1e-12

    def test_perfect(self):
        g = np.array([onehot("edema"), onehot("mass", "nodule")])
        assert prf1(g, g) == (1.0, 1.0, 1.0)

    def test_zero_prediction(self):
        assert prf1(np.zeros((2, 14)), [onehot("edema"), onehot()]) == (0.0, 0.0, 0.0)

    def test_micro_average(self):
        pred = [onehot("edema"), onehot("mass", "nodule", "hernia")]
        gold = [onehot("edema", "mass"), onehot("nodule")]
        p, r, f = prf1(pred, gold)
        assert (p, r) == (2 / 4, 2 / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            prf1(np.zeros((2, 14)), np.zeros((3, 14)))


def test_identical_corpus_scores_one():
    rep = evaluate_corpus(REPORTS, REPORTS)
    for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "ce_precision", "ce_recall", "ce_f1"):
        assert getattr(rep, k) == 1.0, k
    assert METRIC_COLUMNS == ("bleu1", "bleu2", "bleu3", "bleu4", "meteor_exact", "rouge_l",
                              "ce_precision", "ce_recall", "ce_f1")


def perturb(report, edits, data):
    words = report.split()
    for _ in range(edits):
        kind = data.draw(st.sampled_from(["swap", "drop", "insert", "replace"]))
        i = data.draw(st.integers(0, max(len(words) - 1, 0)))
        w = data.draw(st.sampled_from(WORDS))
        if kind == "drop" and len(words) > 1:
            del words[i]
        elif kind == "insert":
            words.insert(i, w)
        elif kind == "replace":
            words[i] = w
        elif kind == "swap" and len(words) > 1:
            j = data.draw(st.integers(0, len(words) - 1))
            words[i], words[j] = words[j], words[i]
    return " ".join(words)



class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_ranges_and_order_invariance(self, data):
        idx = data.draw(st.lists(st.integers(0, len(REPORTS) - 1), min_size=1, max_size=8))
        refs = [REPORTS[i] for i in idx]
        cands = [perturb(r, data.draw(st.integers(0, 4)), data) for r in refs]
        rep = evaluate_corpus(cands, refs)
        for v in rep.as_dict().values():
            assert 0.0 <= v <= 1.0
        perm = data.draw(st.permutations(range(len(refs))))
        rep2 = evaluate_corpus([cands[i] for i in perm], [refs[i] for i in perm])
        for k, v in rep.as_dict().items():
            assert getattr(rep2, k) == pytest.approx(v, abs=1e-12), k

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_bleu_monotone_on_report_corpora(self, data):
        idx = data.draw(st.lists(st.integers(0, len(REPORTS) - 1), min_size=1, max_size=8))
        refs = [REPORTS[i] for i in idx]
        cands = [perturb(r, data.draw(st.integers(0, 4)), data) for r in refs]
        b = bleu(cands, refs)
        assert b[3] <= b[2] + 1e-12 and b[2] <= b[1] + 1e-12 and b[1] <= b[0] + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_perfect_score_iff_identical(self, data):
        idx = data.draw(st.lists(st.integers(0, len(REPORTS) - 1), min_size=1, max_size=5))
        refs = [REPORTS[i] for i in idx]
        cands = [perturb(r, data.draw(st.integers(0, 3)), data) for r in refs]
        same = all(c.split() == r.split() for c, r in zip(cands, refs))
        assert (rouge_l(cands, refs) == 1.0) == same
        assert (bleu(cands, refs)[3] == 1.0) == same
