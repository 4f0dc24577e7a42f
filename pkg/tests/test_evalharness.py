"""Scoring, error-taxonomy, and report-rendering tests."""

import random

import pytest

from fundlink.doctree import Block, DocNode, OpportunityDoc
from fundlink.errors import MissingDocument, MissingPrediction
from fundlink.evalharness import (FALSE_NEGATIVE, FALSE_POSITIVE, FIELD_CONFUSION,
                                  HALLUCINATION, ORIGIN_ELSEWHERE_IN_BODY,
                                  ORIGIN_FABRICATED, ORIGIN_METADATA_TABLE,
                                  VALUE_MISMATCH, ErrorCase, EvalMetrics,
                                  FieldMetrics, GoldAnnotation, Prediction,
                                  ReportRow, classify_errors, render_report,
                                  report_to_dict, score_predictions,
                                  taxonomy_counts)
from fundlink.extraction import (MetadataField, duration_answer, money_answer,
                                 percent_answer, unknown_answer)

F = MetadataField


def gold(doc_id, field, answer, raw="x"):
    return GoldAnnotation(doc_id=doc_id, field=field, gold=answer,
                          gold_raw=None if answer.is_unknown else raw)


def pred(doc_id, field, answer):
    return Prediction(doc_id=doc_id, field=field,
                      raw=None if answer.is_unknown else answer.rendered(),
                      normalized=answer)


def simple_doc(doc_id, body_text="plain body", summary=None):
    root = DocNode("T", 1, [Block("paragraph", body_text)], [])
    return OpportunityDoc(doc_id, "T", summary or {}, root)


# -- scoring -------------------------------------------------------------------


def test_score_arithmetic_example():
    # 10 pairs on one field: 8 correct, 1 null prediction among the wrong ones
    golds, preds = [], []
    for i in range(8):
        golds.append(gold(f"d{i}", F.MINIMUM_AWARD, money_answer(100)))
        preds.append(pred(f"d{i}", F.MINIMUM_AWARD, money_answer(100)))
    golds.append(gold("d8", F.MINIMUM_AWARD, money_answer(100)))
    preds.append(pred("d8", F.MINIMUM_AWARD, unknown_answer()))  # false negative
    golds.append(gold("d9", F.MINIMUM_AWARD, money_answer(100)))
    preds.append(pred("d9", F.MINIMUM_AWARD, money_answer(999)))  # mismatch
    metrics = score_predictions(golds, preds)
    assert metrics.overall.n == 10
    assert metrics.overall.accuracy == pytest.approx(0.80)
    assert metrics.overall.unknown_rate == pytest.approx(0.10)
    assert metrics.per_field[F.MINIMUM_AWARD].accuracy == pytest.approx(0.80)


def test_score_all_correct():
    golds = [gold("d1", F.TOTAL_FUNDING, money_answer(5)),
             gold("d1", F.FUNDING_PERCENTAGE, unknown_answer())]
    preds = [pred("d1", F.TOTAL_FUNDING, money_answer(5)),
             pred("d1", F.FUNDING_PERCENTAGE, unknown_answer())]
    assert score_predictions(golds, preds).overall.accuracy == 1.0


def test_score_random_fixture_matches_counting_oracle():
    rng = random.Random(17)
    golds, preds = [], []
    correct = unknown = 0
    fields = list(MetadataField)
    for i in range(100):
        field = fields[i % 6]
        doc_id = f"d{i}"
        outcome = rng.choice(["ok_known", "ok_unknown", "fp", "fn", "vm"])
        if outcome == "ok_known":
            golds.append(gold(doc_id, field, money_answer(i)))
            preds.append(pred(doc_id, field, money_answer(i)))
            correct += 1
        elif outcome == "ok_unknown":
            golds.append(gold(doc_id, field, unknown_answer()))
            preds.append(pred(doc_id, field, unknown_answer()))
            correct += 1
            unknown += 1
        elif outcome == "fp":
            golds.append(gold(doc_id, field, unknown_answer()))
            preds.append(pred(doc_id, field, money_answer(i)))
        elif outcome == "fn":
            golds.append(gold(doc_id, field, money_answer(i)))
            preds.append(pred(doc_id, field, unknown_answer()))
            unknown += 1
        else:
            golds.append(gold(doc_id, field, money_answer(i)))
            preds.append(pred(doc_id, field, money_answer(i + 1)))
    metrics = score_predictions(golds, preds)
    assert metrics.overall.n == 100
    assert metrics.overall.accuracy == pytest.approx(correct / 100)
    assert metrics.overall.unknown_rate == pytest.approx(unknown / 100)


def test_missing_prediction_lists_pairs():
    golds = [gold("d1", F.MINIMUM_AWARD, money_answer(1)),
             gold("d2", F.MAXIMUM_AWARD, money_answer(2))]
    with pytest.raises(MissingPrediction) as err:
        score_predictions(golds, [pred("d1", F.MINIMUM_AWARD, money_answer(1))])
    assert err.value.pairs == [("d2", "maximum_award")]


def test_duration_equivalence_counts_as_correct():
    golds = [gold("d1", F.MAXIMUM_FUNDING_DURATION, duration_answer(2, "years"))]
    preds = [pred("d1", F.MAXIMUM_FUNDING_DURATION, duration_answer(24, "months"))]
    assert score_predictions(golds, preds).overall.accuracy == 1.0


# -- taxonomy -------------------------------------------------------------------


def test_field_confusion_classification():
    golds = [gold("d1", F.MAXIMUM_AWARD, unknown_answer()),
             gold("d1", F.TOTAL_FUNDING, money_answer(2_000_000))]
    preds = [pred("d1", F.MAXIMUM_AWARD, money_answer(2_000_000)),
             pred("d1", F.TOTAL_FUNDING, money_answer(2_000_000))]
    errors = classify_errors(golds, preds, {"d1": simple_doc("d1")})
    assert len(errors) == 1
    err = errors[0]
    assert err.category == FALSE_POSITIVE
    assert err.fp_subtype == FIELD_CONFUSION
    assert err.confused_with == F.TOTAL_FUNDING


def test_fabricated_hallucination():
    golds = [gold("d1", F.MINIMUM_AWARD, unknown_answer())]
    preds = [pred("d1", F.MINIMUM_AWARD, money_answer(123456))]
    docs = {"d1": simple_doc("d1", body_text="nothing numeric here")}
    err = classify_errors(golds, preds, docs)[0]
    assert err.fp_subtype == HALLUCINATION
    assert err.hallucination_origin == ORIGIN_FABRICATED


def test_metadata_table_hallucination_checked_before_body():
    golds = [gold("d1", F.MAXIMUM_AWARD, unknown_answer())]
    preds = [pred("d1", F.MAXIMUM_AWARD, money_answer(120000))]
    docs = {"d1": simple_doc("d1", body_text="range up to £120,000 here",
                             summary={"Funding range": "£60,000 to £120,000"})}
    err = classify_errors(golds, preds, docs)[0]
    assert err.hallucination_origin == ORIGIN_METADATA_TABLE


def test_elsewhere_in_body_hallucination():
    golds = [gold("d1", F.MINIMUM_AWARD, unknown_answer())]
    preds = [pred("d1", F.MINIMUM_AWARD, money_answer(999))]
    docs = {"d1": simple_doc("d1", body_text="call the helpline on 0300 999 456")}
    err = classify_errors(golds, preds, docs)[0]
    assert err.hallucination_origin == ORIGIN_ELSEWHERE_IN_BODY


def test_value_mismatch_and_false_negative():
    golds = [gold("d1", F.MAXIMUM_FUNDING_DURATION, duration_answer(36, "months")),
             gold("d1", F.FUNDING_PERCENTAGE, percent_answer(80))]
    preds = [pred("d1", F.MAXIMUM_FUNDING_DURATION, duration_answer(24, "months")),
             pred("d1", F.FUNDING_PERCENTAGE, unknown_answer())]
    errors = classify_errors(golds, preds, {"d1": simple_doc("d1")})
    categories = {e.field: e.category for e in errors}
    assert categories[F.MAXIMUM_FUNDING_DURATION] == VALUE_MISMATCH
    assert categories[F.FUNDING_PERCENTAGE] == FALSE_NEGATIVE


def test_classification_order_independent():
    golds = [gold("d2", F.MINIMUM_AWARD, unknown_answer()),
             gold("d1", F.MAXIMUM_AWARD, money_answer(5)),
             gold("d1", F.MINIMUM_AWARD, money_answer(4))]
    preds = [pred("d1", F.MINIMUM_AWARD, money_answer(9)),
             pred("d2", F.MINIMUM_AWARD, money_answer(123)),
             pred("d1", F.MAXIMUM_AWARD, money_answer(5))]
    docs = {d: simple_doc(d) for d in ("d1", "d2")}
    forward = classify_errors(golds, preds, docs)
    shuffled = classify_errors(list(reversed(golds)), list(reversed(preds)), docs)
    assert forward == shuffled
    assert [(e.doc_id, e.field) for e in forward] == \
        sorted((e.doc_id, e.field) for e in forward)


def test_classify_requires_documents_for_errors():
    golds = [gold("d1", F.MINIMUM_AWARD, unknown_answer())]
    preds = [pred("d1", F.MINIMUM_AWARD, money_answer(1))]
    with pytest.raises(MissingDocument):
        classify_errors(golds, preds, {})


# -- reporting -------------------------------------------------------------------


def _metrics(accuracy, unknown_rate=0.1, n=489):
    per_field = {f: FieldMetrics(field=f, n=n // 6, accuracy=accuracy,
                                 unknown_rate=unknown_rate)
                 for f in MetadataField}
    overall = FieldMetrics(field=None, n=n, accuracy=accuracy,
                           unknown_rate=unknown_rate)
    return EvalMetrics(per_field=per_field, overall=overall)


def test_report_formats_percent_to_one_decimal():
    rows = [ReportRow(chunker="hierarchical", alpha=0.25, reranker=False,
                      metrics=_metrics(0.877))]
    text = render_report(rows, [])
    assert "87.7" in text


def test_report_empty_errors_all_zero():
    rows = [ReportRow(chunker="none", alpha=None, reranker=None,
                      metrics=_metrics(1.0))]
    text = render_report(rows, [])
    assert "Error taxonomy: 0 errors" in text
    assert "false positives: 0 (0.0%)" in text


def test_report_taxonomy_totals_and_fp_share():
    errors = []
    for i in range(17):
        errors.append(ErrorCase(
            doc_id=f"d{i}", field=F.MAXIMUM_AWARD, category=FALSE_POSITIVE,
            fp_subtype=FIELD_CONFUSION, confused_with=F.TOTAL_FUNDING))
    for i, origin in enumerate([ORIGIN_FABRICATED] * 26
                               + [ORIGIN_METADATA_TABLE] * 3
                               + [ORIGIN_ELSEWHERE_IN_BODY]):
        errors.append(ErrorCase(
            doc_id=f"h{i}", field=F.MINIMUM_AWARD, category=FALSE_POSITIVE,
            fp_subtype=HALLUCINATION, hallucination_origin=origin))
    for i in range(9):
        errors.append(ErrorCase(doc_id=f"v{i}", field=F.TOTAL_FUNDING,
                                category=VALUE_MISMATCH))
    for i in range(4):
        errors.append(ErrorCase(doc_id=f"n{i}", field=F.FUNDING_PERCENTAGE,
                                category=FALSE_NEGATIVE))

    counts = taxonomy_counts(errors)
    assert counts["total"] == 60
    assert counts["false_positive"] == 47
    assert counts["field_confusion"] == 17
    assert counts["hallucination"] == 30
    assert counts["hallucination_origins"] == {ORIGIN_FABRICATED: 26,
                                               ORIGIN_METADATA_TABLE: 3,
                                               ORIGIN_ELSEWHERE_IN_BODY: 1}
    text = render_report([ReportRow(chunker="hierarchical", alpha=0.25,
                                    reranker=False, metrics=_metrics(0.877))],
                         errors)
    assert "false positives: 47 (78.3%)" in text
    assert "value mismatches: 9" in text
    assert "false negatives: 4" in text


def test_report_to_dict_mirrors_text():
    rows = [ReportRow(chunker="none", alpha=None, reranker=None,
                      metrics=_metrics(0.853, unknown_rate=0.534))]
    payload = report_to_dict(rows, [])
    assert payload["rows"][0]["overall"]["accuracy"] == pytest.approx(0.853)
    assert payload["taxonomy"]["total"] == 0
