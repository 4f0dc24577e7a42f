"""Scoring and error taxonomy for extraction predictions.

A prediction is correct when it and the gold annotation are both unknown,
or both known and equal under the normalized-value rules. Errors split
three ways: false positives (gold unknown, prediction known), value
mismatches (both known, unequal), and false negatives (gold known,
prediction unknown). False positives are subtyped as field confusion
(the prediction equals another field's gold value on the same document)
or hallucination, whose origin is traced to the summary-field table, to
the document body, or marked fabricated.

The unknown rate is the share of predictions that are null, regardless of
gold; report output carries that definition as a caption.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .doctree import OpportunityDoc, serialize_markdown
from .errors import MissingDocument, MissingPrediction
from .extraction import MetadataField, NormalizedAnswer, normalized_equal

FALSE_POSITIVE = "false_positive"
VALUE_MISMATCH = "value_mismatch"
FALSE_NEGATIVE = "false_negative"

FIELD_CONFUSION = "field_confusion"
HALLUCINATION = "hallucination"

ORIGIN_FABRICATED = "fabricated"
ORIGIN_METADATA_TABLE = "metadata_table"
ORIGIN_ELSEWHERE_IN_BODY = "elsewhere_in_body"


@dataclass(frozen=True)
class GoldAnnotation:
    doc_id: str
    field: MetadataField
    gold: NormalizedAnswer
    gold_raw: str | None = None


@dataclass(frozen=True)
class Prediction:
    doc_id: str
    field: MetadataField
    raw: str | None
    normalized: NormalizedAnswer


@dataclass(frozen=True)
class FieldMetrics:
    field: MetadataField | None  # None = overall
    n: int
    accuracy: float
    unknown_rate: float


@dataclass(frozen=True)
class EvalMetrics:
    per_field: dict[MetadataField, FieldMetrics]
    overall: FieldMetrics


@dataclass(frozen=True)
class ErrorCase:
    doc_id: str
    field: MetadataField
    category: str
    fp_subtype: str | None = None
    confused_with: MetadataField | None = None
    hallucination_origin: str | None = None

    def to_dict(self) -> dict:
        d: dict = {"doc_id": self.doc_id, "field": self.field.value,
                   "category": self.category}
        if self.fp_subtype:
            d["fp_subtype"] = self.fp_subtype
        if self.confused_with:
            d["confused_with"] = self.confused_with.value
        if self.hallucination_origin:
            d["hallucination_origin"] = self.hallucination_origin
        return d


# ---------------------------------------------------------------------------
# Loading


def load_gold(path: str | Path) -> list[GoldAnnotation]:
    gold = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        gold.append(GoldAnnotation(
            doc_id=d["doc_id"],
            field=MetadataField(d["field"]),
            gold=NormalizedAnswer.from_dict(d["gold_normalized"]),
            gold_raw=d.get("gold_raw"),
        ))
    return gold


def predictions_from_records(records: Iterable[dict]) -> list[Prediction]:
    return [Prediction(
        doc_id=d["doc_id"],
        field=MetadataField(d["field"]),
        raw=d.get("raw"),
        normalized=NormalizedAnswer.from_dict(d["normalized"]),
    ) for d in records]


def load_predictions(path: str | Path) -> list[Prediction]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return predictions_from_records(json.loads(line) for line in lines if line.strip())


# ---------------------------------------------------------------------------
# Scoring


def _pred_map(preds: Iterable[Prediction]) -> dict[tuple[str, MetadataField], Prediction]:
    return {(p.doc_id, p.field): p for p in preds}


def is_correct(gold: NormalizedAnswer, pred: NormalizedAnswer) -> bool:
    if gold.is_unknown or pred.is_unknown:
        return gold.is_unknown and pred.is_unknown
    return normalized_equal(gold, pred)


def score_predictions(gold: Sequence[GoldAnnotation],
                      preds: Sequence[Prediction]) -> EvalMetrics:
    """Per-field and pooled accuracy / unknown rate over the gold pairs.

    Raises MissingPrediction when any gold (doc_id, field) has no
    prediction; predictions without a gold pair are ignored.
    """
    by_key = _pred_map(preds)
    missing = [(g.doc_id, g.field.value) for g in gold
               if (g.doc_id, g.field) not in by_key]
    if missing:
        raise MissingPrediction(sorted(missing))

    counts: dict[MetadataField, list[int]] = {f: [0, 0, 0] for f in MetadataField}
    for g in gold:
        pred = by_key[(g.doc_id, g.field)]
        n_correct = int(is_correct(g.gold, pred.normalized))
        tallies = counts[g.field]
        tallies[0] += 1
        tallies[1] += n_correct
        tallies[2] += int(pred.normalized.is_unknown)

    per_field = {}
    total = correct = unknown = 0
    for f, (n, c, u) in counts.items():
        per_field[f] = FieldMetrics(
            field=f, n=n,
            accuracy=(c / n) if n else 0.0,
            unknown_rate=(u / n) if n else 0.0,
        )
        total, correct, unknown = total + n, correct + c, unknown + u
    overall = FieldMetrics(
        field=None, n=total,
        accuracy=(correct / total) if total else 0.0,
        unknown_rate=(unknown / total) if total else 0.0,
    )
    return EvalMetrics(per_field=per_field, overall=overall)


# ---------------------------------------------------------------------------
# Error taxonomy


_NON_DIGIT = re.compile(r"\D")
_STRIP_CHARS = re.compile(r"[,£$€]")


def _digit_string(rendered: str) -> str:
    return _NON_DIGIT.sub("", rendered)


def _value_in_text(rendered: str, text: str) -> bool:
    digits = _digit_string(rendered)
    if not digits:
        return False
    return digits in _STRIP_CHARS.sub("", text)


def classify_errors(gold: Sequence[GoldAnnotation], preds: Sequence[Prediction],
                    docs: Mapping[str, OpportunityDoc]) -> list[ErrorCase]:
    """Deterministic error cases ordered by (doc_id, field); input order
    never matters. Documents are only needed for erroneous predictions."""
    by_key = _pred_map(preds)
    gold_by_doc: dict[str, dict[MetadataField, NormalizedAnswer]] = {}
    for g in gold:
        gold_by_doc.setdefault(g.doc_id, {})[g.field] = g.gold

    field_order = {f: i for i, f in enumerate(MetadataField)}
    errors: list[ErrorCase] = []
    for g in sorted(gold, key=lambda g: (g.doc_id, field_order[g.field])):
        pred = by_key.get((g.doc_id, g.field))
        if pred is None:
            raise MissingPrediction([(g.doc_id, g.field.value)])
        if is_correct(g.gold, pred.normalized):
            continue
        if g.gold.is_unknown:
            errors.append(_classify_false_positive(g, pred, gold_by_doc, docs))
        elif pred.normalized.is_unknown:
            errors.append(ErrorCase(g.doc_id, g.field, FALSE_NEGATIVE))
        else:
            errors.append(ErrorCase(g.doc_id, g.field, VALUE_MISMATCH))
    return errors


def _classify_false_positive(g: GoldAnnotation, pred: Prediction,
                             gold_by_doc, docs) -> ErrorCase:
    for other in MetadataField:
        if other is g.field:
            continue
        other_gold = gold_by_doc.get(g.doc_id, {}).get(other)
        if other_gold is not None and not other_gold.is_unknown \
                and normalized_equal(pred.normalized, other_gold):
            return ErrorCase(g.doc_id, g.field, FALSE_POSITIVE,
                             fp_subtype=FIELD_CONFUSION, confused_with=other)
    doc = docs.get(g.doc_id)
    if doc is None:
        raise MissingDocument(f"no document supplied for {g.doc_id}")
    rendered = pred.normalized.rendered()
    if any(_value_in_text(rendered, value) for value in doc.summary_fields.values()):
        origin = ORIGIN_METADATA_TABLE
    elif _value_in_text(rendered, serialize_markdown(doc.root)):
        origin = ORIGIN_ELSEWHERE_IN_BODY
    else:
        origin = ORIGIN_FABRICATED
    return ErrorCase(g.doc_id, g.field, FALSE_POSITIVE,
                     fp_subtype=HALLUCINATION, hallucination_origin=origin)


# ---------------------------------------------------------------------------
# Reporting


@dataclass(frozen=True)
class ReportRow:
    """One configuration's metrics for the results table."""

    chunker: str  # "none" for the full-document baseline
    alpha: float | None
    reranker: bool | None
    metrics: EvalMetrics
    label: str = ""

    def config_label(self) -> str:
        if self.chunker == "none":
            return "none"
        rr = "on" if self.reranker else "off"
        return f"{self.chunker},alpha={self.alpha:g},rerank={rr}"


_FIELD_HEADERS = [
    (MetadataField.MINIMUM_AWARD, "MinAward"),
    (MetadataField.MAXIMUM_AWARD, "MaxAward"),
    (MetadataField.TOTAL_FUNDING, "Total"),
    (MetadataField.FUNDING_PERCENTAGE, "PctFund"),
    (MetadataField.MINIMUM_FUNDING_DURATION, "MinDur"),
    (MetadataField.MAXIMUM_FUNDING_DURATION, "MaxDur"),
]


def _pct(value: float) -> str:
    return f"{100.0 * value:.1f}"


def taxonomy_counts(errors: Sequence[ErrorCase]) -> dict:
    fp = [e for e in errors if e.category == FALSE_POSITIVE]
    confusion = [e for e in fp if e.fp_subtype == FIELD_CONFUSION]
    hallucination = [e for e in fp if e.fp_subtype == HALLUCINATION]
    pairs: dict[str, int] = {}
    for e in confusion:
        key = f"{e.field.value}->{e.confused_with.value}"
        pairs[key] = pairs.get(key, 0) + 1
    origins = {o: 0 for o in (ORIGIN_FABRICATED, ORIGIN_METADATA_TABLE,
                              ORIGIN_ELSEWHERE_IN_BODY)}
    for e in hallucination:
        origins[e.hallucination_origin] += 1
    return {
        "total": len(errors),
        "false_positive": len(fp),
        "false_positive_share": (len(fp) / len(errors)) if errors else 0.0,
        "field_confusion": len(confusion),
        "confusion_pairs": dict(sorted(pairs.items())),
        "hallucination": len(hallucination),
        "hallucination_origins": origins,
        "value_mismatch": sum(e.category == VALUE_MISMATCH for e in errors),
        "false_negative": sum(e.category == FALSE_NEGATIVE for e in errors),
    }


def render_report(rows: Sequence[ReportRow], errors: Sequence[ErrorCase],
                  taxonomy_label: str = "") -> str:
    """Fixed-width results table (one row per configuration, per-field and
    overall percentages to one decimal) plus the error-taxonomy block."""
    headers = (["Chunker", "Alpha", "RR"]
               + [h for _, h in _FIELD_HEADERS] + ["Acc", "Unk"])
    table_rows = []
    for row in rows:
        alpha = "---" if row.alpha is None else f"{row.alpha:.2f}"
        rr = "---" if row.reranker is None else ("yes" if row.reranker else "no")
        cells = [row.chunker, alpha, rr]
        for f, _ in _FIELD_HEADERS:
            fm = row.metrics.per_field.get(f)
            cells.append(_pct(fm.accuracy) if fm and fm.n else "---")
        cells.append(_pct(row.metrics.overall.accuracy))
        cells.append(_pct(row.metrics.overall.unknown_rate))
        table_rows.append(cells)

    widths = [max(len(h), *(len(r[i]) for r in table_rows)) if table_rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for cells in table_rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    lines.append("")
    lines.append("Acc/Unk = accuracy and unknown rate over all gold pairs;")
    lines.append("Unk counts predictions that are null, regardless of gold.")
    lines.append("")

    t = taxonomy_counts(errors)
    title = "Error taxonomy"
    if taxonomy_label:
        title += f" ({taxonomy_label})"
    lines.append(f"{title}: {t['total']} errors")
    share = _pct(t["false_positive_share"])
    lines.append(f"  false positives: {t['false_positive']} ({share}%)")
    lines.append(f"    field confusion: {t['field_confusion']}")
    for pair, count in t["confusion_pairs"].items():
        lines.append(f"      {pair}: {count}")
    lines.append(f"    hallucination: {t['hallucination']}")
    lines.append(f"      fabricated: {t['hallucination_origins'][ORIGIN_FABRICATED]}")
    lines.append(f"      metadata table: {t['hallucination_origins'][ORIGIN_METADATA_TABLE]}")
    lines.append(f"      elsewhere in body: {t['hallucination_origins'][ORIGIN_ELSEWHERE_IN_BODY]}")
    lines.append(f"  value mismatches: {t['value_mismatch']}")
    lines.append(f"  false negatives: {t['false_negative']}")
    return "\n".join(lines) + "\n"


def report_to_dict(rows: Sequence[ReportRow], errors: Sequence[ErrorCase],
                   taxonomy_label: str = "") -> dict:
    """Machine-readable mirror of render_report."""
    out_rows = []
    for row in rows:
        per_field = {
            f.value: {"n": m.n, "accuracy": m.accuracy, "unknown_rate": m.unknown_rate}
            for f, m in row.metrics.per_field.items()
        }
        out_rows.append({
            "chunker": row.chunker,
            "alpha": row.alpha,
            "reranker": row.reranker,
            "per_field": per_field,
            "overall": {
                "n": row.metrics.overall.n,
                "accuracy": row.metrics.overall.accuracy,
                "unknown_rate": row.metrics.overall.unknown_rate,
            },
        })
    return {
        "rows": out_rows,
        "taxonomy": taxonomy_counts(errors),
        "taxonomy_label": taxonomy_label,
        "errors": [e.to_dict() for e in errors],
    }
