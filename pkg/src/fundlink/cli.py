"""Command-line interface: reproducible commands over files.

Commands: parse, extract, eval, link, ingest, report, sweep. Exit code 0
on success, 1 on data errors (a machine-readable error report goes to
stderr), 2 on usage errors. Outputs are written atomically
(temp-then-rename) and every command is deterministic for fixed inputs:
logs go to stderr, data to files or stdout only.

Config precedence for retrieval settings: CLI flag > --config file >
built-in default.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import date
from pathlib import Path

from . import evalharness, linking, store
from .doctree import OpportunityDoc, doc_from_json, doc_to_json, parse_opportunity_html
from .errors import FundlinkError
from .extraction import (FULL_DOCUMENT, HttpCompletionClient,
                         ReplayCompletionClient, extract_fields,
                         prediction_records)
from .retrieval import HIERARCHICAL, SLIDING, RetrievalConfig

logger = logging.getLogger("fundlink")

SWEEP_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)


# ---------------------------------------------------------------------------
# Small file helpers


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_jsonl(path: Path, records: list[dict]) -> None:
    _atomic_write_text(
        path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line)
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()]


def _read_table(path: Path) -> list[dict]:
    """JSON-lines or CSV rows as dicts (empty CSV cells become None)."""
    if path.suffix.lower() == ".csv":
        with path.open(encoding="utf-8", newline="") as fh:
            return [{k: (v if v != "" else None) for k, v in row.items()}
                    for row in csv.DictReader(fh)]
    return _read_jsonl(path)


def _load_docs(path: Path) -> dict[str, OpportunityDoc]:
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    docs = {}
    for file in files:
        doc = doc_from_json(file.read_text(encoding="utf-8"))
        docs[doc.opportunity_id] = doc
    return docs


def _opt_date(value) -> date | None:
    return date.fromisoformat(value) if value else None


def _opt_int(value) -> int | None:
    return int(value) if value is not None and value != "" else None


# ---------------------------------------------------------------------------
# Retrieval config resolution


_CONFIG_FIELDS = ("alpha", "k", "k_final", "use_reranker", "chunker",
                  "window_words", "overlap_words")


def _resolve_config(args: argparse.Namespace) -> RetrievalConfig:
    base: dict = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    merged = dict(RetrievalConfig().to_dict())
    merged.update({k: v for k, v in base.items() if k in _CONFIG_FIELDS})
    for key in _CONFIG_FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return RetrievalConfig.from_dict(merged)


def _completion_port(args: argparse.Namespace):
    if getattr(args, "replay", None):
        return ReplayCompletionClient.from_jsonl(Path(args.replay))
    if getattr(args, "endpoint", None):
        return HttpCompletionClient(base_url=args.endpoint, model=args.model,
                                    api_key=os.environ.get("FUNDLINK_API_KEY"))
    raise FundlinkError("no completion port: pass --replay or --endpoint")


# ---------------------------------------------------------------------------
# Commands


def _cmd_parse(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs: list[Path] = []
    for raw in args.inputs:
        path = Path(raw)
        if path.is_dir():
            inputs.extend(sorted(path.glob("*.html")))
        else:
            inputs.append(path)
    failures = []
    for path in inputs:
        warnings: list[str] = []
        try:
            html = path.read_text(encoding="utf-8")
            doc = parse_opportunity_html(html, path.stem, warnings=warnings)
        except FundlinkError as exc:
            failures.append({"input": str(path), "error": type(exc).__name__,
                             "message": str(exc)})
            continue
        for message in warnings:
            logger.warning("%s: %s", path.name, message)
        _atomic_write_text(out_dir / f"{doc.opportunity_id}.json", doc_to_json(doc))
    if failures:
        json.dump({"error": "ParseFailures", "failures": failures}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


def _run_extraction(docs: dict[str, OpportunityDoc],
                    config: RetrievalConfig | None, port,
                    trace: list[dict] | None = None) -> list[dict]:
    records: list[dict] = []
    for doc_id in sorted(docs):
        result = extract_fields(docs[doc_id], config, port, trace=trace)
        records.extend(prediction_records(result))
    return records


def _cmd_extract(args: argparse.Namespace) -> int:
    docs = _load_docs(Path(args.input))
    config = None if args.full_document else _resolve_config(args)
    port = _completion_port(args)
    trace: list[dict] | None = [] if args.trace else None
    records = _run_extraction(docs, config, port, trace)
    _write_jsonl(Path(args.out), records)
    if args.trace:
        _write_jsonl(Path(args.trace), trace or [])
    return 0


def _rows_from_mode(mode: str) -> tuple[str, float | None, bool | None]:
    if mode == FULL_DOCUMENT:
        return ("none", None, None)
    chunker, alpha_part, rr_part = mode.split(",")
    return (chunker, float(alpha_part.split("=")[1]), rr_part.endswith("on"))


def _cmd_eval(args: argparse.Namespace) -> int:
    gold = evalharness.load_gold(Path(args.gold))
    preds = evalharness.load_predictions(Path(args.preds))
    docs = _load_docs(Path(args.docs))
    metrics = evalharness.score_predictions(gold, preds)
    errors = evalharness.classify_errors(gold, preds, docs)
    raw_records = _read_jsonl(Path(args.preds))
    mode = raw_records[0]["mode"] if raw_records else FULL_DOCUMENT
    chunker, alpha, rr = _rows_from_mode(mode)
    rows = [evalharness.ReportRow(chunker=chunker, alpha=alpha, reranker=rr,
                                  metrics=metrics)]
    text = evalharness.render_report(rows, errors, taxonomy_label=mode)
    if args.out:
        _atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if args.json_out:
        payload = evalharness.report_to_dict(rows, errors, taxonomy_label=mode)
        _atomic_write_text(Path(args.json_out),
                           json.dumps(payload, ensure_ascii=False, indent=2))
    return 0


# -- linking input loaders ---------------------------------------------------


def _load_applications(path: Path) -> list[linking.ApplicationRecord]:
    return [linking.ApplicationRecord(
        record_id=r["record_id"], council=r["council"],
        title=r.get("title") or "",
        application_id=r.get("application_id"), award_id=r.get("award_id"),
        pi_surname=r.get("pi_surname"), organisation=r.get("organisation"),
        opportunity_name=r.get("opportunity_name"),
        meeting_ref=r.get("meeting_ref") or "",
        route=r.get("route"), total_awarded=_opt_int(r.get("total_awarded")),
        outcome_status=r.get("outcome_status") or "")
        for r in _read_table(path)]


def _load_projects(path: Path) -> list[linking.ProjectRecord]:
    return [linking.ProjectRecord(
        project_id=r["project_id"], grant_reference=r["grant_reference"],
        title=r.get("title"), pi_surname=r.get("pi_surname"),
        organisation=r.get("organisation"))
        for r in _read_table(path)]


def _load_meetings(path: Path) -> dict[str, linking.MeetingRecord]:
    meetings = {}
    for r in _read_table(path):
        meeting = linking.MeetingRecord(
            meeting_id=r["meeting_id"], council=r["council"],
            name=r["name"], date=date.fromisoformat(r["date"]))
        meetings[meeting.meeting_id] = meeting
    return meetings


def _load_opportunities(path: Path) -> list[linking.OpportunityCandidate]:
    out = []
    for r in _read_table(path):
        funders = r["funders"]
        if isinstance(funders, str):
            funders = [f.strip() for f in funders.split(";") if f.strip()]
        out.append(linking.OpportunityCandidate(
            opportunity_id=r["opportunity_id"], title=r["title"],
            funders=frozenset(funders),
            opening_date=_opt_date(r.get("opening_date")),
            closing_date=_opt_date(r.get("closing_date")),
            funding_type=r.get("funding_type"),
            award_min=_opt_int(r.get("award_min")),
            award_max=_opt_int(r.get("award_max"))))
    return out


def _load_appearances(path: Path) -> list[linking.PanelAppearanceRecord]:
    return [linking.PanelAppearanceRecord(
        appearance_id=r["appearance_id"], council=r["council"],
        surname=r["surname"],
        first_name_or_initial=r["first_name_or_initial"],
        organisation=r.get("organisation"),
        meeting_ref=r.get("meeting_ref") or "")
        for r in _read_table(path)]


def _load_persons(path: Path) -> list[linking.GtrPersonRecord]:
    return [linking.GtrPersonRecord(
        person_id=r["person_id"], surname=r["surname"],
        first_name=r.get("first_name") or "",
        organisation=r.get("organisation"),
        has_memberships=bool(r.get("has_memberships", True)))
        for r in _read_table(path)]


def _cmd_link(args: argparse.Namespace) -> int:
    thresholds = linking.LinkingThresholds()
    if args.thresholds:
        thresholds = linking.LinkingThresholds.from_dict(
            json.loads(Path(args.thresholds).read_text(encoding="utf-8")))

    links: list[dict] = []
    ambiguous: list[dict] = []
    unresolved: list[dict] = []
    app_project: dict[str, str] = {}

    applications = _load_applications(Path(args.applications)) if args.applications else []
    projects = _load_projects(Path(args.projects)) if args.projects else []

    if applications and projects:
        for app in sorted(applications, key=lambda a: a.record_id):
            try:
                result = linking.link_application_project(app, projects)
            except linking.AmbiguousMatch as exc:
                ambiguous.append({"source_id": exc.source_id,
                                  "target_ids": exc.target_ids})
                continue
            if result:
                links.append(result.to_dict())
                app_project[result.source_id] = result.target_id

    if applications and args.meetings and args.opportunities:
        meetings = _load_meetings(Path(args.meetings))
        opportunities = _load_opportunities(Path(args.opportunities))
        for app in sorted(applications, key=lambda a: a.record_id):
            try:
                result = linking.link_application_opportunity(
                    app, meetings, opportunities, thresholds)
            except linking.UnresolvedMeeting as exc:
                unresolved.append({"source_id": app.record_id,
                                   "message": str(exc)})
                continue
            if result:
                links.append(result.to_dict())

    if args.appearances:
        appearances = _load_appearances(Path(args.appearances))
        clusters = linking.cluster_panel_attendance(appearances, thresholds)
        if args.persons:
            persons = [p for p in _load_persons(Path(args.persons))
                       if p.has_memberships]
            for cluster in clusters:
                result = linking.align_cluster_person(cluster, persons, thresholds)
                if result:
                    links.append(result.to_dict())

    _write_jsonl(Path(args.out), links)

    if args.validation_out:
        project_by_id = {p.project_id: p for p in projects}
        app_by_id = {a.record_id: a for a in applications}
        pairs = []
        for app_id, project_id in sorted(app_project.items()):
            app, project = app_by_id[app_id], project_by_id[project_id]
            pairs.append(linking.ValidationPair(
                source_organisation=app.organisation,
                target_organisation=project.organisation,
                source_surname=app.pi_surname,
                target_surname=project.pi_surname,
                source_title=app.title or None,
                target_title=project.title))
        report = linking.validate_links(pairs)
        payload = {"validation": report.to_dict(),
                   "ambiguous": ambiguous, "unresolved_meetings": unresolved}
        _atomic_write_text(Path(args.validation_out),
                           json.dumps(payload, ensure_ascii=False, indent=2))
    elif ambiguous or unresolved:
        for entry in ambiguous:
            logger.warning("ambiguous grant-reference match: %s", entry)
        for entry in unresolved:
            logger.warning("unresolved meeting: %s", entry)
    return 0


def _cmd_ingest(args: argparse.Namespace) -> int:
    with store.GtrStore(args.db) as gtr:
        summary = gtr.ingest(_read_jsonl(Path(args.records)))
        if args.export_dir:
            gtr.export(args.export_dir)
    sys.stdout.write(json.dumps(summary.to_dict(), ensure_ascii=False, indent=2) + "\n")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    with store.GtrStore(args.db) as gtr:
        report = gtr.orphan_report()
    sys.stdout.write(store.render_orphan_report(report))
    if args.json_out:
        _atomic_write_text(Path(args.json_out),
                           json.dumps(report.to_dict(), ensure_ascii=False, indent=2))
    return 0


def sweep_configs() -> list[RetrievalConfig | None]:
    """The evaluation grid: full-document baseline plus chunker x alpha x
    re-ranker (21 configurations)."""
    configs: list[RetrievalConfig | None] = [None]
    for chunker in (SLIDING, HIERARCHICAL):
        for alpha in SWEEP_ALPHAS:
            for use_reranker in (False, True):
                configs.append(RetrievalConfig(alpha=alpha, chunker=chunker,
                                               use_reranker=use_reranker))
    return configs


def _config_slug(config: RetrievalConfig | None) -> str:
    if config is None:
        return "baseline"
    rr = "rr" if config.use_reranker else "norr"
    return f"{config.chunker}_a{config.alpha:g}_{rr}"


def _cmd_sweep(args: argparse.Namespace) -> int:
    docs = _load_docs(Path(args.docs))
    gold = evalharness.load_gold(Path(args.gold))
    port = ReplayCompletionClient.from_jsonl(Path(args.replay))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    preds_by_config = {}
    for config in sweep_configs():
        records = _run_extraction(docs, config, port)
        slug = _config_slug(config)
        _write_jsonl(out_dir / f"predictions_{slug}.jsonl", records)
        preds = evalharness.predictions_from_records(records)
        metrics = evalharness.score_predictions(gold, preds)
        if config is None:
            rows.append(evalharness.ReportRow(chunker="none", alpha=None,
                                              reranker=None, metrics=metrics))
        else:
            rows.append(evalharness.ReportRow(chunker=config.chunker,
                                              alpha=config.alpha,
                                              reranker=config.use_reranker,
                                              metrics=metrics))
        preds_by_config[slug] = preds

    best_idx = max(range(len(rows)),
                   key=lambda i: (rows[i].metrics.overall.accuracy, -i))
    best_slug = _config_slug(sweep_configs()[best_idx])
    best_label = rows[best_idx].config_label()
    errors = evalharness.classify_errors(gold, preds_by_config[best_slug], docs)

    text = evalharness.render_report(rows, errors, taxonomy_label=best_label)
    _atomic_write_text(out_dir / "report.txt", text)
    payload = evalharness.report_to_dict(rows, errors, taxonomy_label=best_label)
    _atomic_write_text(out_dir / "report.json",
                       json.dumps(payload, ensure_ascii=False, indent=2))
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_retrieval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON retrieval-config file")
    parser.add_argument("--alpha", type=float,
                        help="hybrid weight on BM25 (default: 0.25)")
    parser.add_argument("--k", type=int, help="candidate pool size (default: 10)")
    parser.add_argument("--k-final", dest="k_final", type=int,
                        help="final context size (default: 5)")
    parser.add_argument("--chunker", choices=[HIERARCHICAL, SLIDING],
                        help="chunking strategy (default: hierarchical)")
    rr = parser.add_mutually_exclusive_group()
    rr.add_argument("--rerank", dest="use_reranker", action="store_true",
                    default=None, help="re-rank the candidate pool")
    rr.add_argument("--no-rerank", dest="use_reranker", action="store_false",
                    default=None, help="disable re-ranking (default)")
    parser.add_argument("--window-words", dest="window_words", type=int,
                        help="sliding window size in words (default: 200)")
    parser.add_argument("--overlap-words", dest="overlap_words", type=int,
                        help="sliding window overlap in words (default: 50)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fundlink",
        description="Funding-opportunity parsing, extraction, evaluation, "
                    "linkage, and storage.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse opportunity HTML into document JSON")
    p.add_argument("inputs", nargs="+", help="HTML files or directories")
    p.add_argument("--out", required=True, help="output directory for doc JSON")
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("extract", help="extract metadata fields from parsed docs")
    p.add_argument("--input", required=True, help="parsed doc JSON file or directory")
    p.add_argument("--out", required=True, help="predictions JSON-lines file")
    p.add_argument("--full-document", dest="full_document", action="store_true",
                   help="baseline mode: pass the whole document as context")
    p.add_argument("--replay", help="replay-fixture JSON-lines file")
    p.add_argument("--endpoint", help="chat-completions base URL")
    p.add_argument("--model", default="default",
                   help="model name for the HTTP endpoint (default: default)")
    p.add_argument("--trace", help="retrieval trace JSON-lines output")
    _add_retrieval_flags(p)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("eval", help="score predictions against gold annotations")
    p.add_argument("--gold", required=True, help="gold JSON-lines file")
    p.add_argument("--preds", required=True, help="predictions JSON-lines file")
    p.add_argument("--docs", required=True, help="parsed doc JSON file or directory")
    p.add_argument("--out", help="write the text report here instead of stdout")
    p.add_argument("--json-out", dest="json_out", help="machine-readable report")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("link", help="run the entity-linking procedures")
    p.add_argument("--applications", help="applications .jsonl/.csv")
    p.add_argument("--projects", help="project records .jsonl/.csv")
    p.add_argument("--meetings", help="meetings .jsonl/.csv")
    p.add_argument("--opportunities", help="opportunity candidates .jsonl/.csv")
    p.add_argument("--appearances", help="panel appearances .jsonl/.csv")
    p.add_argument("--persons", help="GtR persons .jsonl/.csv")
    p.add_argument("--thresholds",
                   help="JSON thresholds file (defaults: min_score 0.65, "
                        "route boost 0.1, award penalty 0.15, org split 0.7, "
                        "align min 0.6, align margin 0.15)")
    p.add_argument("--out", required=True, help="links JSON-lines file")
    p.add_argument("--validation-out", dest="validation_out",
                   help="cross-validation report JSON")
    p.set_defaults(func=_cmd_link)

    p = sub.add_parser("ingest", help="load entity records into the store")
    p.add_argument("--records", required=True, help="records JSON-lines file")
    p.add_argument("--db", required=True, help="sqlite database path")
    p.add_argument("--export-dir", dest="export_dir",
                   help="also export entity files here")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("report", help="orphan report for an ingested store")
    p.add_argument("--db", required=True, help="sqlite database path")
    p.add_argument("--json-out", dest="json_out", help="machine-readable report")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser(
        "sweep",
        help="run the 21-configuration evaluation grid "
             "(baseline + chunker x alpha {0,0.25,0.5,0.75,1} x re-ranker)")
    p.add_argument("--docs", required=True, help="parsed doc JSON directory")
    p.add_argument("--gold", required=True, help="gold JSON-lines file")
    p.add_argument("--replay", required=True, help="replay-fixture JSON-lines file")
    p.add_argument("--out-dir", dest="out_dir", required=True,
                   help="directory for predictions and reports")
    p.set_defaults(func=_cmd_sweep)

    return parser


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FundlinkError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


def main() -> None:
    sys.exit(run())
