import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from consistrad.labeler import extract_labels
from consistrad.labels import CATEGORIES, LabelValue, LabelVector
from consistrad.metrics import (
    MetricsReport,
    bleu_n,
    confusion_counts,
    corpus_bleu,
    evaluate_outputs,
    lcs_length,
    multilabel_f1,
    rouge_l,
    scs,
    tokenize,
)
from consistrad.protocol import parse_output, render_output

from oracles import bleu_oracle, f1_oracle, lcs_oracle, rouge_l_oracle

P, N, U = LabelValue.POSITIVE, LabelValue.NEGATIVE, LabelValue.UNCERTAIN
tokens = st.lists(st.sampled_from("a b c d e f".split()), max_size=8)


def vec(pos=(), unc=()):
    values = [N] * len(CATEGORIES)
    for c in pos:
        values[c] = P
    for c in unc:
        values[c] = U
    return LabelVector(tuple(values))


# --- BLEU ------------------------------------------------------------------

CAT = "the cat sat on the mat".split()
CAT_SUB = "the cat sat on a mat".split()


def test_bleu_substitution_fixture():
    # hand counts: unigrams 5/6, bigrams 3/5, trigrams 2/4, 4-grams 1/3; equal lengths so BP = 1
    hand = {1: 5 / 6, 2: math.sqrt(5 / 6 * 3 / 5), 3: (5 / 6 * 3 / 5 * 2 / 4) ** (1 / 3),
            4: (5 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** (1 / 4)}
    for n in range(1, 5):
        assert bleu_oracle(CAT_SUB, CAT, n) == pytest.approx(hand[n], abs=1e-15)
        assert bleu_n(CAT_SUB, CAT, n) == pytest.approx(hand[n], abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_bleu_identity_and_disjoint(n):
    assert bleu_n(CAT, CAT, n) == pytest.approx(1.0, abs=1e-12)
    assert bleu_n("x y z w v".split(), CAT, n) == 0.0
    assert bleu_n([], CAT, n) == 0.0


def test_bleu_rejects_bad_order():
    with pytest.raises(ValueError):
        bleu_n(CAT, CAT, 5)


@given(tokens, tokens, st.integers(1, 4))
@settings(max_examples=300, deadline=None)
def test_bleu_matches_oracle(cand, ref, n):
    assert bleu_n(cand, ref, n) == pytest.approx(bleu_oracle(cand, ref, n), abs=1e-12)


@given(tokens.filter(bool), tokens, st.integers(1, 4), st.integers(0, 100))
@settings(max_examples=300, deadline=None)
def test_bleu_monotone_when_a_match_is_knocked_out(cand, ref, n, pick):
    matched = [i for i, t in enumerate(cand) if t in ref]
    if not matched:
        return
    i = matched[pick % len(matched)]
    degraded = cand[:i] + ["<oov>"] + cand[i + 1:]
    assert bleu_n(degraded, ref, n) <= bleu_n(cand, ref, n) + 1e-12


def test_corpus_bleu_pools_counts():
    assert corpus_bleu([CAT, CAT], [CAT, CAT], 4) == pytest.approx(1.0)
    # a single pair reduces to sentence BLEU
    assert corpus_bleu([CAT_SUB], [CAT], 3) == pytest.approx(bleu_n(CAT_SUB, CAT, 3))


# --- ROUGE-L ---------------------------------------------------------------

def test_rouge_fixture():
    a, b = "a b c d".split(), "a c d e".split()
    assert lcs_oracle(a, b) == 3
    assert lcs_length(a, b) == 3
    assert rouge_l(a, b) == pytest.approx(0.75, abs=1e-12)
    assert rouge_l(a, a) == 1.0
    assert rouge_l(a, "x y".split()) == 0.0
    assert rouge_l([], a) == 0.0


@given(tokens, tokens)
@settings(max_examples=300, deadline=None)
def test_rouge_matches_oracle_and_is_symmetric(a, b):
    assert lcs_length(a, b) == lcs_oracle(a, b)
    assert rouge_l(a, b) == pytest.approx(rouge_l_oracle(a, b), abs=1e-12)
    assert rouge_l(a, b) == pytest.approx(rouge_l(b, a), abs=1e-12)


def test_tokenize():
    assert tokenize("No  pleural-effusion, 2 views.") == ["no", "pleural", "effusion", "2", "views"]


# --- F1 --------------------------------------------------------------------

# categories 0, 1, 2 are active; the other eleven are Negative everywhere
F1_PRED = [{0, 1}, {0}, {2}, set()]
F1_TRUTH = [{0}, {0, 1}, {1}, {2}]


def test_f1_fixture_against_confusion_oracle():
    preds = [vec(p) for p in F1_PRED]
    truths = [vec(t) for t in F1_TRUTH]
    # category 0: tp 2; category 1: fp 1 fn 2; category 2: fp 1 fn 1
    macro = f1_oracle(F1_PRED, F1_TRUTH, 14, "macro")
    micro = f1_oracle(F1_PRED, F1_TRUTH, 14, "micro")
    assert macro == (Fraction(1) + Fraction(0) + Fraction(0)) / 3
    assert micro == Fraction(4, 4 + 2 + 3)
    assert multilabel_f1(preds, truths, "macro") == pytest.approx(float(macro), abs=1e-12)
    assert multilabel_f1(preds, truths, "micro") == pytest.approx(float(micro), abs=1e-12)


def test_f1_trivial_cases():
    truths = [vec(range(13)), vec([13])]
    assert multilabel_f1(truths, truths, "macro") == 1.0
    assert multilabel_f1(truths, truths, "micro") == 1.0
    zeros = [vec(), vec()]
    assert multilabel_f1(zeros, truths, "macro") == 0.0
    assert multilabel_f1(zeros, truths, "micro") == 0.0
    assert multilabel_f1([None, None], truths, "micro") == 0.0


def test_f1_nothing_positive_anywhere():
    zeros = [vec(), vec()]
    assert multilabel_f1(zeros, zeros, "macro") == 1.0
    assert multilabel_f1(zeros, zeros, "micro") == 1.0


def test_f1_uncertain_policy():
    preds, truths = [vec(unc=[3])], [vec(pos=[3])]
    assert multilabel_f1(preds, truths, "micro") == 0.0
    assert multilabel_f1(preds, truths, "micro", uncertain="positive") == 1.0


def test_f1_errors():
    with pytest.raises(ValueError):
        multilabel_f1([vec()], [vec(), vec()])
    with pytest.raises(ValueError):
        multilabel_f1([vec()], [vec()], "weighted")


label_rows = st.lists(st.frozensets(st.integers(0, 13), max_size=4), min_size=1, max_size=6)


@given(label_rows, st.data())
@settings(max_examples=200, deadline=None)
def test_f1_matches_oracle(pred_rows, data):
    truth_rows = data.draw(st.lists(st.frozensets(st.integers(0, 13), max_size=4),
                                    min_size=len(pred_rows), max_size=len(pred_rows)))
    preds, truths = [vec(p) for p in pred_rows], [vec(t) for t in truth_rows]
    for mode in ("macro", "micro"):
        expected = f1_oracle(pred_rows, truth_rows, 14, mode)
        assert multilabel_f1(preds, truths, mode) == pytest.approx(float(expected), abs=1e-12)
    tp, fp, fn = confusion_counts(preds, truths)
    assert tp.sum() == sum(len(p & t) for p, t in zip(pred_rows, truth_rows))


# --- SCS -------------------------------------------------------------------

THINKS = [
    "Opacity is observed in the right lower lobe.",
    "There is no pleural effusion. Possible pneumonia.",
    "A small apical pneumothorax is present. Moderate cardiomegaly is seen.",
    "",
    "Findings are consistent with multifocal pneumonia.",
]


def test_scs_identity():
    outs = [parse_output(render_output(t or "x", extract_labels(t or "x"))) for t in THINKS]
    assert scs(outs) == (1.0, 1.0)


def test_scs_complement_is_zero_micro():
    outs = []
    for t in THINKS[:3] + THINKS[4:]:
        lab = extract_labels(t)
        flipped = [N if v is P else P if v is N else v for v in lab.values]
        outs.append(parse_output(render_output(t, LabelVector(tuple(flipped)))))
    assert scs(outs)[1] == 0.0


def test_scs_mixed_fixture_against_oracle():
    answers = [vec([CATEGORIES.index("Lung Opacity")]), vec([CATEGORIES.index("Pneumothorax")]), None]
    thinks = [THINKS[0], THINKS[2], THINKS[4]]
    outs = [parse_output(render_output(t, a)) if a else parse_output(f"<think>{t}</think>")
            for t, a in zip(thinks, answers)]
    pos = lambda v: frozenset(i for i, x in enumerate(v.values) if x is P) if v else frozenset()
    truth_rows = [pos(extract_labels(t)) for t in thinks]
    pred_rows = [pos(a) for a in answers]
    macro, micro = scs(outs)
    assert macro == pytest.approx(float(f1_oracle(pred_rows, truth_rows, 14, "macro")), abs=1e-12)
    assert micro == pytest.approx(float(f1_oracle(pred_rows, truth_rows, 14, "micro")), abs=1e-12)
    assert micro == pytest.approx(2 * 2 / (2 * 2 + 0 + 2))


@given(st.lists(st.sampled_from(THINKS[:3] + THINKS[4:]), min_size=1, max_size=10), st.randoms())
@settings(max_examples=50, deadline=None)
def test_scs_one_on_self_rendered_corpora(texts, rnd):
    joined = [" ".join(rnd.sample(texts, k=min(2, len(texts)))) for _ in texts]
    outs = [parse_output(render_output(t, extract_labels(t))) for t in joined]
    assert scs(outs) == (1.0, 1.0)


# --- report ------------------------------------------------------------------

def test_evaluate_outputs_and_report():
    truth = [extract_labels(t) for t in THINKS]
    outs = [parse_output(render_output(t or "x", lab)) for t, lab in zip(THINKS, truth)]
    refs = [t or "x" for t in THINKS]
    report = evaluate_outputs(outs, refs, truth)
    assert report.n_examples == 5
    assert report.bleu == pytest.approx((1.0, 1.0, 1.0, 1.0))
    assert report.rouge_l == pytest.approx(1.0)
    assert report.answer_micro_f1 == 1.0 and report.scs_macro == 1.0
    for name, value in report.to_dict().items():
        if isinstance(value, float):
            assert 0.0 <= value <= 1.0, name
    table = report.render_table()
    assert "SCS Macro-F1" in table and "100.00" in table
    assert json.loads(report.to_json())["n_examples"] == 5
    with pytest.raises(ValueError):
        evaluate_outputs(outs, refs[:2], truth)
    report.external["METEOR"] = 0.25
    assert "METEOR" in report.render_table()


def test_report_roundtrip_fields():
    r = MetricsReport((0.1, 0.2, 0.3, 0.4), 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 3)
    assert r.to_dict()["bleu"] == [0.1, 0.2, 0.3, 0.4]
