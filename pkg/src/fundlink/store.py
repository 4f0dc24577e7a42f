"""Research-funding store: projects, people, organisations, and outcomes.

Backed by embedded sqlite. Outcomes use joined-table inheritance: a
generic base row plus one kind-specific child row, validated so an
outcome of kind K carries exactly kind-K payload fields. Ingestion runs
with referential constraints disabled (the PRAGMA stays off): records are
stored even when their references dangle, and every dangling reference is
recorded, reported, and exported rather than dropped.

Where source ids exist they are reused; otherwise ids are deterministic
UUID5 values over a canonical "{kind}|{council}|{source_key}" string
(lowercased) under the fixed namespace below. Changing the namespace is a
breaking change.
"""

from __future__ import annotations

import csv
import json
import sqlite3
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import IoFailure, SchemaViolation

NAMESPACE = uuid.UUID("b790140a-4173-5dc5-b0e9-be78d8d6ffb2")

OUTCOME_KINDS: dict[str, tuple[str, set[str], set[str]]] = {
    # kind -> (child table, required payload fields, optional payload fields)
    "publication": ("outcome_publications", {"title"}, {"doi", "journal", "year"}),
    "collaboration": ("outcome_collaborations", {"partner_name"}, {"country"}),
    "dissemination": ("outcome_disseminations", {"description"}, {"audience"}),
    "policy_influence": ("outcome_policy_influences", {"description"}, {"area"}),
    "intellectual_property": ("outcome_intellectual_property", {"title"},
                              {"protection", "granted"}),
    "spin_out": ("outcome_spin_outs", {"company_name"}, {"description"}),
    "other": ("outcome_others", {"description"}, set()),
}

_SCHEMA = """
CREATE TABLE IF NOT EXISTS projects (
    project_id TEXT PRIMARY KEY,
    grant_reference TEXT NOT NULL,
    title TEXT NOT NULL,
    abstract TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS funding_records (
    funding_id TEXT PRIMARY KEY,
    project_ref TEXT NOT NULL REFERENCES projects(project_id),
    amount INTEGER,
    funder TEXT,
    start_date TEXT,
    end_date TEXT
);
CREATE TABLE IF NOT EXISTS persons (
    person_id TEXT PRIMARY KEY,
    surname TEXT NOT NULL,
    first_name TEXT
);
CREATE TABLE IF NOT EXISTS organisations (
    organisation_id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    variant_names TEXT NOT NULL DEFAULT '[]'
);
CREATE TABLE IF NOT EXISTS person_affiliations (
    person_ref TEXT NOT NULL REFERENCES persons(person_id),
    organisation_ref TEXT NOT NULL REFERENCES organisations(organisation_id),
    PRIMARY KEY (person_ref, organisation_ref)
);
CREATE TABLE IF NOT EXISTS project_members (
    member_id TEXT PRIMARY KEY,
    project_ref TEXT NOT NULL REFERENCES projects(project_id),
    person_ref TEXT NOT NULL REFERENCES persons(person_id),
    role TEXT
);
CREATE TABLE IF NOT EXISTS project_partners (
    partner_id TEXT PRIMARY KEY,
    project_ref TEXT NOT NULL REFERENCES projects(project_id),
    organisation_ref TEXT NOT NULL REFERENCES organisations(organisation_id)
);
CREATE TABLE IF NOT EXISTS outcomes (
    outcome_id TEXT PRIMARY KEY,
    project_ref TEXT NOT NULL REFERENCES projects(project_id),
    outcome_kind TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS outcome_publications (
    outcome_id TEXT PRIMARY KEY REFERENCES outcomes(outcome_id),
    title TEXT NOT NULL, doi TEXT, journal TEXT, year INTEGER
);
CREATE TABLE IF NOT EXISTS outcome_collaborations (
    outcome_id TEXT PRIMARY KEY REFERENCES outcomes(outcome_id),
    partner_name TEXT NOT NULL, country TEXT
);
CREATE TABLE IF NOT EXISTS outcome_disseminations (
    outcome_id TEXT PRIMARY KEY REFERENCES outcomes(outcome_id),
    description TEXT NOT NULL, audience TEXT
);
CREATE TABLE IF NOT EXISTS outcome_policy_influences (
    outcome_id TEXT PRIMARY KEY REFERENCES outcomes(outcome_id),
    description TEXT NOT NULL, area TEXT
);
CREATE TABLE IF NOT EXISTS outcome_intellectual_property (
    outcome_id TEXT PRIMARY KEY REFERENCES outcomes(outcome_id),
    title TEXT NOT NULL, protection TEXT, granted TEXT
);
CREATE TABLE IF NOT EXISTS outcome_spin_outs (
    outcome_id TEXT PRIMARY KEY REFERENCES outcomes(outcome_id),
    company_name TEXT NOT NULL, description TEXT
);
CREATE TABLE IF NOT EXISTS outcome_others (
    outcome_id TEXT PRIMARY KEY REFERENCES outcomes(outcome_id),
    description TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS dangling_refs (
    source_table TEXT NOT NULL,
    source_id TEXT NOT NULL,
    missing_table TEXT NOT NULL,
    missing_id TEXT NOT NULL
);
"""


def make_uuid5(namespace_id: uuid.UUID, canonical: str) -> uuid.UUID:
    """RFC 4122 version-5 (SHA-1, name-based) UUID; stable across runs."""
    if not canonical:
        raise ValueError("canonical string must be non-empty")
    return uuid.uuid5(namespace_id, canonical)


def canonical_id(kind: str, council: str, source_key: str) -> str:
    return f"{kind}|{council}|{source_key}".lower()


@dataclass(frozen=True)
class DanglingRef:
    source_table: str
    source_id: str
    missing_table: str
    missing_id: str


@dataclass
class IngestSummary:
    ingested: dict[str, int] = field(default_factory=dict)
    skipped: int = 0
    violations: list[str] = field(default_factory=list)
    dangling: list[DanglingRef] = field(default_factory=list)

    @property
    def dangling_by_relation(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for ref in self.dangling:
            key = f"{ref.source_table}->{ref.missing_table}"
            counts[key] = counts.get(key, 0) + 1
        return counts

    def to_dict(self) -> dict:
        return {
            "ingested": dict(sorted(self.ingested.items())),
            "skipped": self.skipped,
            "violations": self.violations,
            "dangling_total": len(self.dangling),
            "dangling_by_relation": dict(sorted(self.dangling_by_relation.items())),
        }


@dataclass(frozen=True)
class OrphanReport:
    dangling_by_relation: dict[str, int]
    orphaned_records: dict[str, int]  # distinct source records with >=1 dangle
    projects_without_members: int
    entity_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "dangling_by_relation": dict(sorted(self.dangling_by_relation.items())),
            "orphaned_records": dict(sorted(self.orphaned_records.items())),
            "projects_without_members": self.projects_without_members,
            "entity_counts": dict(sorted(self.entity_counts.items())),
        }


def render_orphan_report(report: OrphanReport) -> str:
    rel = report.dangling_by_relation
    orphaned = report.orphaned_records
    lines = [
        "Orphan report",
        f"  orphaned project member records: {orphaned.get('project_members', 0)}",
        f"  orphaned project partner records: {orphaned.get('project_partners', 0)}",
        f"  projects with no associated team members: {report.projects_without_members}",
        "  dangling references by relation:",
    ]
    for key in sorted(rel):
        lines.append(f"    {key}: {rel[key]}")
    if not rel:
        lines.append("    (none)")
    lines.append("  entity counts:")
    for key in sorted(report.entity_counts):
        lines.append(f"    {key}: {report.entity_counts[key]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation


def _require(record: dict, keys: Sequence[str], kind: str) -> list[str]:
    problems = []
    for key in keys:
        value = record.get(key)
        if value is None or (isinstance(value, str) and not value.strip()):
            problems.append(f"{kind}: missing or empty {key!r}")
    return problems


def _validate(record: dict) -> list[str]:
    kind = record.get("kind")
    if kind == "project":
        return _require(record, ("grant_reference", "title", "abstract"), kind)
    if kind == "person":
        return _require(record, ("surname",), kind)
    if kind == "organisation":
        return _require(record, ("name",), kind)
    if kind == "member":
        return _require(record, ("project_id", "person_id"), kind)
    if kind == "partner":
        return _require(record, ("project_id", "organisation_id"), kind)
    if kind == "outcome":
        problems = _require(record, ("project_id", "outcome_kind"), kind)
        outcome_kind = record.get("outcome_kind")
        spec = OUTCOME_KINDS.get(outcome_kind)
        if spec is None:
            problems.append(f"outcome: unknown outcome_kind {outcome_kind!r}")
            return problems
        _, required, optional = spec
        payload = record.get("payload")
        if not isinstance(payload, dict):
            problems.append("outcome: missing payload object")
            return problems
        missing = required - payload.keys()
        unknown = payload.keys() - required - optional
        if missing:
            problems.append(f"outcome[{outcome_kind}]: missing payload fields {sorted(missing)}")
        if unknown:
            problems.append(f"outcome[{outcome_kind}]: unknown payload fields {sorted(unknown)}")
        return problems
    return [f"unknown record kind {kind!r}"]


# ---------------------------------------------------------------------------
# The store


_EXPORT_COLUMNS = {
    "projects": ("project_id", "grant_reference", "title", "abstract"),
    "funding_records": ("funding_id", "project_ref", "amount", "funder",
                        "start_date", "end_date"),
    "persons": ("person_id", "surname", "first_name"),
    "organisations": ("organisation_id", "name", "variant_names"),
    "person_affiliations": ("person_ref", "organisation_ref"),
    "project_members": ("member_id", "project_ref", "person_ref", "role"),
    "project_partners": ("partner_id", "project_ref", "organisation_ref"),
    "dangling_refs": ("source_table", "source_id", "missing_table", "missing_id"),
}

EXPORT_KINDS = ("project", "person", "organisation", "member", "partner", "outcome")


class GtrStore:
    """Single-writer store; reads are safe to share once ingest completes."""

    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        self._conn = sqlite3.connect(self.path)
        self._conn.executescript(_SCHEMA)
        self._conn.commit()

    def close(self) -> None:
        self._conn.close()

    def __enter__(self) -> "GtrStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- ingestion ----------------------------------------------------------

    def _record_id(self, record: dict, kind: str,
                   default_source_key: str | None = None) -> str:
        source_id = record.get("source_id")
        if source_id:
            return str(source_id)
        source_key = record.get("source_key") or default_source_key
        if not source_key:
            raise SchemaViolation(f"{kind}: needs source_id or source_key")
        council = record.get("council", "") or ""
        return str(make_uuid5(NAMESPACE, canonical_id(kind, council, source_key)))

    def ingest(self, records: Iterable[dict]) -> IngestSummary:
        """Load a record stream with constraints disabled.

        Malformed records raise-and-skip (counted); everything else is
        stored whether or not its references resolve, and the dangling
        reference set is recomputed and persisted at the end.
        """
        summary = IngestSummary()
        cur = self._conn.cursor()
        for record in records:
            problems = _validate(record) if isinstance(record, dict) \
                else ["record is not an object"]
            if problems:
                summary.skipped += 1
                summary.violations.extend(problems)
                continue
            try:
                self._insert(cur, record)
            except (SchemaViolation, sqlite3.IntegrityError) as exc:
                summary.skipped += 1
                summary.violations.append(f"{record.get('kind')}: {exc}")
                continue
            kind = record["kind"]
            summary.ingested[kind] = summary.ingested.get(kind, 0) + 1
        self._conn.commit()
        summary.dangling = self._recompute_dangling()
        return summary

    def _insert(self, cur: sqlite3.Cursor, record: dict) -> None:
        kind = record["kind"]
        if kind == "project":
            pid = self._record_id(record, kind, record.get("grant_reference"))
            cur.execute(
                "INSERT INTO projects VALUES (?, ?, ?, ?)",
                (pid, record["grant_reference"], record["title"], record["abstract"]))
            for i, funding in enumerate(record.get("funding", [])):
                fid = str(make_uuid5(NAMESPACE, canonical_id("funding", "", f"{pid}:{i}")))
                cur.execute(
                    "INSERT INTO funding_records VALUES (?, ?, ?, ?, ?, ?)",
                    (fid, pid, funding.get("amount"), funding.get("funder"),
                     funding.get("start_date"), funding.get("end_date")))
        elif kind == "person":
            # no default key: surnames collide, so persons must carry
            # source_id or an explicit source_key
            pid = self._record_id(record, kind)
            cur.execute("INSERT INTO persons VALUES (?, ?, ?)",
                        (pid, record["surname"], record.get("first_name")))
            for org_ref in record.get("affiliations", []):
                cur.execute("INSERT OR IGNORE INTO person_affiliations VALUES (?, ?)",
                            (pid, org_ref))
        elif kind == "organisation":
            oid = self._record_id(record, kind, record.get("name"))
            cur.execute("INSERT INTO organisations VALUES (?, ?, ?)",
                        (oid, record["name"],
                         json.dumps(record.get("variant_names", []))))
        elif kind == "member":
            default = f"{record['project_id']}:{record['person_id']}:{record.get('role', '')}"
            mid = self._record_id(record, kind, default)
            cur.execute("INSERT INTO project_members VALUES (?, ?, ?, ?)",
                        (mid, record["project_id"], record["person_id"],
                         record.get("role")))
        elif kind == "partner":
            default = f"{record['project_id']}:{record['organisation_id']}"
            pid = self._record_id(record, kind, default)
            cur.execute("INSERT INTO project_partners VALUES (?, ?, ?)",
                        (pid, record["project_id"], record["organisation_id"]))
        elif kind == "outcome":
            outcome_kind = record["outcome_kind"]
            table, required, optional = OUTCOME_KINDS[outcome_kind]
            default = f"{record['project_id']}:{outcome_kind}"
            oid = self._record_id(record, kind, default)
            cur.execute("INSERT INTO outcomes VALUES (?, ?, ?)",
                        (oid, record["project_id"], outcome_kind))
            payload = record["payload"]
            columns = sorted(required) + sorted(optional)
            placeholders = ", ".join("?" for _ in range(len(columns) + 1))
            cur.execute(
                f"INSERT INTO {table} (outcome_id, {', '.join(columns)}) "
                f"VALUES ({placeholders})",
                [oid] + [payload.get(c) for c in columns])

    def _recompute_dangling(self) -> list[DanglingRef]:
        checks = [
            ("project_members", "member_id", "project_ref", "projects", "project_id"),
            ("project_members", "member_id", "person_ref", "persons", "person_id"),
            ("project_partners", "partner_id", "project_ref", "projects", "project_id"),
            ("project_partners", "partner_id", "organisation_ref",
             "organisations", "organisation_id"),
            ("outcomes", "outcome_id", "project_ref", "projects", "project_id"),
            ("person_affiliations", "person_ref", "organisation_ref",
             "organisations", "organisation_id"),
        ]
        dangling: list[DanglingRef] = []
        cur = self._conn.cursor()
        for source, source_pk, ref_col, target, target_pk in checks:
            rows = cur.execute(
                f"SELECT s.{source_pk}, s.{ref_col} FROM {source} s "
                f"LEFT JOIN {target} t ON s.{ref_col} = t.{target_pk} "
                f"WHERE t.{target_pk} IS NULL ORDER BY s.{source_pk}").fetchall()
            dangling.extend(DanglingRef(source, sid, target, missing)
                            for sid, missing in rows)
        cur.execute("DELETE FROM dangling_refs")
        cur.executemany(
            "INSERT INTO dangling_refs VALUES (?, ?, ?, ?)",
            [(d.source_table, d.source_id, d.missing_table, d.missing_id)
             for d in dangling])
        self._conn.commit()
        return dangling

    # -- reporting ------------------------------------------------------------

    def counts(self) -> dict[str, int]:
        cur = self._conn.cursor()
        tables = list(_EXPORT_COLUMNS) + ["outcomes"]
        return {t: cur.execute(f"SELECT COUNT(*) FROM {t}").fetchone()[0]
                for t in sorted(tables)}

    def orphan_report(self) -> OrphanReport:
        """Dangling counts per relation and per source record, plus projects
        with no members."""
        cur = self._conn.cursor()
        rows = cur.execute(
            "SELECT source_table, missing_table, COUNT(*) FROM dangling_refs "
            "GROUP BY source_table, missing_table").fetchall()
        by_relation = {f"{s}->{m}": n for s, m, n in rows}
        orphaned = dict(cur.execute(
            "SELECT source_table, COUNT(DISTINCT source_id) FROM dangling_refs "
            "GROUP BY source_table").fetchall())
        no_members = cur.execute(
            "SELECT COUNT(*) FROM projects p WHERE NOT EXISTS "
            "(SELECT 1 FROM project_members m WHERE m.project_ref = p.project_id)"
        ).fetchone()[0]
        counts = self.counts()
        counts.pop("dangling_refs", None)
        return OrphanReport(dangling_by_relation=by_relation,
                            orphaned_records=orphaned,
                            projects_without_members=no_members,
                            entity_counts=counts)

    # -- export ---------------------------------------------------------------

    def export(self, out_dir: str | Path,
               selection: Sequence[str] | None = None) -> list[Path]:
        """Write per-entity JSON-lines (re-ingestable) and CSV mirrors with
        stable column order; link tables carry both endpoint ids."""
        kinds = tuple(selection) if selection else EXPORT_KINDS
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            written: list[Path] = []
            for kind in kinds:
                written.extend(self._export_kind(out, kind))
            written.append(self._export_csv(out, "dangling_refs"))
            return written
        except OSError as exc:
            raise IoFailure(f"export to {out} failed: {exc}") from exc

    def _rows(self, table: str) -> list[tuple]:
        columns = _EXPORT_COLUMNS[table]
        order = columns[0]
        return self._conn.execute(
            f"SELECT {', '.join(columns)} FROM {table} ORDER BY {order}").fetchall()

    def _export_csv(self, out: Path, table: str) -> Path:
        path = out / f"{table}.csv"
        tmp = path.with_suffix(".csv.tmp")
        with tmp.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_EXPORT_COLUMNS[table])
            writer.writerows(self._rows(table))
        tmp.replace(path)
        return path

    def _export_kind(self, out: Path, kind: str) -> list[Path]:
        if kind == "project":
            records = self._project_records()
            tables = ["projects", "funding_records"]
        elif kind == "person":
            records = self._person_records()
            tables = ["persons", "person_affiliations"]
        elif kind == "organisation":
            records = [
                {"kind": "organisation", "source_id": oid, "name": name,
                 "variant_names": json.loads(variants)}
                for oid, name, variants in self._rows("organisations")]
            tables = ["organisations"]
        elif kind == "member":
            records = [
                {"kind": "member", "source_id": mid, "project_id": pref,
                 "person_id": per, "role": role}
                for mid, pref, per, role in self._rows("project_members")]
            tables = ["project_members"]
        elif kind == "partner":
            records = [
                {"kind": "partner", "source_id": pid, "project_id": pref,
                 "organisation_id": oref}
                for pid, pref, oref in self._rows("project_partners")]
            tables = ["project_partners"]
        elif kind == "outcome":
            records = self._outcome_records()
            tables = []
        else:
            raise SchemaViolation(f"unknown export kind {kind!r}")

        path = out / f"{kind}s.jsonl"
        tmp = path.with_suffix(".jsonl.tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        tmp.replace(path)
        written = [path]
        for table in tables:
            written.append(self._export_csv(out, table))
        if kind == "outcome":
            written.append(self._export_outcomes_csv(out))
        return written

    def _project_records(self) -> list[dict]:
        funding: dict[str, list[dict]] = {}
        for _, pref, amount, funder, start, end in self._rows("funding_records"):
            funding.setdefault(pref, []).append(
                {"amount": amount, "funder": funder,
                 "start_date": start, "end_date": end})
        return [
            {"kind": "project", "source_id": pid, "grant_reference": ref,
             "title": title, "abstract": abstract,
             "funding": funding.get(pid, [])}
            for pid, ref, title, abstract in self._rows("projects")]

    def _person_records(self) -> list[dict]:
        affiliations: dict[str, list[str]] = {}
        for person_ref, org_ref in self._rows("person_affiliations"):
            affiliations.setdefault(person_ref, []).append(org_ref)
        return [
            {"kind": "person", "source_id": pid, "surname": surname,
             "first_name": first, "affiliations": sorted(affiliations.get(pid, []))}
            for pid, surname, first in self._rows("persons")]

    def _outcome_records(self) -> list[dict]:
        records = []
        for oid, pref, outcome_kind in self._conn.execute(
                "SELECT outcome_id, project_ref, outcome_kind FROM outcomes "
                "ORDER BY outcome_id"):
            table, required, optional = OUTCOME_KINDS[outcome_kind]
            columns = sorted(required) + sorted(optional)
            row = self._conn.execute(
                f"SELECT {', '.join(columns)} FROM {table} WHERE outcome_id = ?",
                (oid,)).fetchone()
            payload = {c: v for c, v in zip(columns, row or ()) if v is not None}
            records.append({"kind": "outcome", "source_id": oid,
                            "project_id": pref, "outcome_kind": outcome_kind,
                            "payload": payload})
        return records

    def _export_outcomes_csv(self, out: Path) -> Path:
        path = out / "outcomes.csv"
        tmp = path.with_suffix(".csv.tmp")
        with tmp.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("outcome_id", "project_ref", "outcome_kind", "payload"))
            for record in self._outcome_records():
                writer.writerow((record["source_id"], record["project_id"],
                                 record["outcome_kind"],
                                 json.dumps(record["payload"], sort_keys=True)))
        tmp.replace(path)
        return path
