"""Entity linking across applications, opportunities, panellists, and projects.

Three procedures, all tuned for precision over recall:

- application -> project: exact case-insensitive match of the application's
  application_id or award_id against a project grant_reference;
- application -> opportunity: fuzzy title match against council- and
  date-filtered candidates, with a route-match boost and an out-of-award-
  range penalty, accepted at a minimum score;
- panel attendance -> person: per-council (surname, initial) clustering
  split on conflicting first names or dissimilar organisations, then
  cluster-to-person alignment requiring either a unique candidate or a
  clear organisation-similarity margin.

Every threshold lives in LinkingThresholds with the published defaults.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from statistics import mean, median
from typing import Iterable, Mapping, Sequence

from .errors import AmbiguousMatch, UnresolvedMeeting

EXACT_GRANT_REF = "exact_grant_ref"
FUZZY_TITLE = "fuzzy_title"
CLUSTER_ALIGNMENT = "cluster_alignment"

WILSON_Z_95 = 1.959963984540054


@dataclass(frozen=True)
class LinkingThresholds:
    """Linkage constants; defaults are the published values."""

    min_score: float = 0.65
    route_boost: float = 0.1
    award_penalty: float = 0.15
    org_split: float = 0.7
    align_min: float = 0.6
    align_margin: float = 0.15

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinkingThresholds":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


@dataclass(frozen=True)
class ApplicationRecord:
    record_id: str
    council: str
    title: str = ""
    application_id: str | None = None
    award_id: str | None = None
    pi_surname: str | None = None
    organisation: str | None = None
    opportunity_name: str | None = None
    meeting_ref: str = ""
    route: str | None = None
    total_awarded: int | None = None
    outcome_status: str = ""


@dataclass(frozen=True)
class MeetingRecord:
    meeting_id: str
    council: str
    name: str
    date: date


@dataclass(frozen=True)
class OpportunityCandidate:
    opportunity_id: str
    title: str
    funders: frozenset[str]
    opening_date: date | None = None
    closing_date: date | None = None
    funding_type: str | None = None
    award_min: int | None = None
    award_max: int | None = None


@dataclass(frozen=True)
class PanelAppearanceRecord:
    appearance_id: str
    council: str
    surname: str
    first_name_or_initial: str
    organisation: str | None = None
    meeting_ref: str = ""


@dataclass(frozen=True)
class ProjectRecord:
    """Pre-normalized project row used for linkage and cross-validation."""

    project_id: str
    grant_reference: str
    title: str | None = None
    pi_surname: str | None = None
    organisation: str | None = None


@dataclass(frozen=True)
class GtrPersonRecord:
    """Pre-normalized person row; align only persons with memberships."""

    person_id: str
    surname: str
    first_name: str = ""
    organisation: str | None = None
    has_memberships: bool = True


@dataclass(frozen=True)
class LinkResult:
    source_id: str
    target_id: str
    score: float
    method: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"source_id": self.source_id, "target_id": self.target_id,
                "score": self.score, "method": self.method,
                "diagnostics": self.diagnostics}


# ---------------------------------------------------------------------------
# Fuzzy ratio


def _canon(text: str) -> str:
    return " ".join(text.lower().split())


def _lcs_length(a: str, b: str) -> int:
    if not a or not b:
        return 0
    if len(b) > len(a):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for ca in a:
        cur = [0] * (len(b) + 1)
        for j, cb in enumerate(b, start=1):
            if ca == cb:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[-1]


def indel_distance(a: str, b: str) -> int:
    """Minimum insertions plus deletions to turn a into b."""
    return len(a) + len(b) - 2 * _lcs_length(a, b)


def fuzzy_ratio(a: str, b: str) -> float:
    """Normalized indel similarity of the lowercased, whitespace-collapsed
    strings: 1 - distance/(len(a') + len(b')). Symmetric; 1.0 iff the
    canonical forms are equal (two empty strings count as equal)."""
    a2, b2 = _canon(a), _canon(b)
    total = len(a2) + len(b2)
    if total == 0:
        return 1.0
    return 1.0 - indel_distance(a2, b2) / total


def _org_similarity(a: str | None, b: str | None) -> float | None:
    if not a or not b:
        return None
    return fuzzy_ratio(a, b)


# ---------------------------------------------------------------------------
# Application -> project


def _norm_id(value: str | None) -> str | None:
    if value is None:
        return None
    value = value.strip().lower()
    return value or None


def link_application_project(app: ApplicationRecord,
                             projects: Iterable[ProjectRecord]) -> LinkResult | None:
    """Exact case-insensitive match of application_id or award_id against
    grant_reference. Raises AmbiguousMatch when several distinct projects
    share the reference."""
    wanted = {key: name for key, name in
              ((_norm_id(app.application_id), "application_id"),
               (_norm_id(app.award_id), "award_id")) if key}
    if not wanted:
        return None
    hits: dict[str, str] = {}
    for project in projects:
        ref = _norm_id(project.grant_reference)
        if ref in wanted:
            hits[project.project_id] = wanted[ref]
    if not hits:
        return None
    if len(hits) > 1:
        raise AmbiguousMatch(app.record_id, sorted(hits))
    project_id, matched_on = next(iter(hits.items()))
    return LinkResult(source_id=app.record_id, target_id=project_id,
                      score=1.0, method=EXACT_GRANT_REF,
                      diagnostics={"matched_on": matched_on})


# ---------------------------------------------------------------------------
# Application -> opportunity


def link_application_opportunity(
        app: ApplicationRecord,
        meetings: Mapping[str, MeetingRecord],
        opportunities: Iterable[OpportunityCandidate],
        thresholds: LinkingThresholds = LinkingThresholds()) -> LinkResult | None:
    """Fuzzy-title link with constraints: candidates must share the
    application's council and must not open after the linked meeting.
    Score = ratio(candidate text, title) + route boost - award-range
    penalty, clamped to [0, 1]; accepted at min_score. Ties break on
    opportunity_id."""
    meeting = meetings.get(app.meeting_ref)
    if meeting is None:
        raise UnresolvedMeeting(
            f"{app.record_id}: meeting_ref {app.meeting_ref!r} not found")
    candidate_text = app.opportunity_name or meeting.name

    best: tuple[float, str, dict] | None = None
    for opp in opportunities:
        if app.council not in opp.funders:
            continue
        if opp.opening_date is not None and meeting.date < opp.opening_date:
            continue
        base = fuzzy_ratio(candidate_text, opp.title)
        boost = 0.0
        if app.route and opp.funding_type \
                and _canon(app.route) == _canon(opp.funding_type):
            boost = thresholds.route_boost
        penalty = 0.0
        if app.total_awarded is not None and _outside_award_range(
                app.total_awarded, opp.award_min, opp.award_max):
            penalty = thresholds.award_penalty
        score = min(1.0, max(0.0, base + boost - penalty))
        diagnostics = {"base": base, "boost": boost, "penalty": penalty,
                       "candidate_text": candidate_text,
                       "meeting_date": meeting.date.isoformat()}
        key = (-score, opp.opportunity_id)
        if best is None or key < (-best[0], best[1]):
            best = (score, opp.opportunity_id, diagnostics)

    if best is None or best[0] < thresholds.min_score:
        return None
    score, opportunity_id, diagnostics = best
    return LinkResult(source_id=app.record_id, target_id=opportunity_id,
                      score=score, method=FUZZY_TITLE, diagnostics=diagnostics)


def _outside_award_range(amount: int, award_min: int | None,
                         award_max: int | None) -> bool:
    # one-sided ranges check the available bound only
    if award_min is not None and amount < award_min:
        return True
    if award_max is not None and amount > award_max:
        return True
    return False


# ---------------------------------------------------------------------------
# Panel attendance clustering and alignment


def _initial(name: str) -> str:
    stripped = name.strip().lstrip(".")
    return stripped[:1].lower()


def _full_first_name(name: str) -> str | None:
    """The full first name, or None when the record only has an initial."""
    cleaned = name.strip().rstrip(".")
    if len(cleaned) >= 2 and cleaned.isalpha():
        return cleaned.lower()
    return None


@dataclass
class PanelCluster:
    cluster_id: str
    council: str
    surname: str
    initial: str
    records: list[PanelAppearanceRecord] = field(default_factory=list)

    @property
    def organisations(self) -> list[str]:
        return [r.organisation for r in self.records if r.organisation]

    def representative_organisation(self) -> str | None:
        """Most frequent organisation string; ties break lexicographically."""
        orgs = self.organisations
        if not orgs:
            return None
        counts = Counter(orgs)
        return min(counts, key=lambda o: (-counts[o], o))

    def full_first_names(self) -> set[str]:
        names = (_full_first_name(r.first_name_or_initial) for r in self.records)
        return {n for n in names if n}


def cluster_panel_attendance(
        records: Iterable[PanelAppearanceRecord],
        thresholds: LinkingThresholds = LinkingThresholds()) -> list[PanelCluster]:
    """Disambiguate panel appearances per council by (surname, initial).

    Full-name records split when first names conflict or organisation
    similarity to a sub-cluster's representative organisation drops below
    the split threshold; initial-only records join the sub-cluster with
    the highest organisation similarity. Records are processed in a
    canonical sort order, so clustering is permutation-invariant.
    """
    groups: dict[tuple[str, str, str], list[PanelAppearanceRecord]] = {}
    for rec in records:
        key = (rec.council, rec.surname.strip().lower(),
               _initial(rec.first_name_or_initial))
        groups.setdefault(key, []).append(rec)

    clusters: list[PanelCluster] = []
    for (council, surname, initial) in sorted(groups):
        group = sorted(groups[(council, surname, initial)],
                       key=lambda r: (_full_first_name(r.first_name_or_initial) is None,
                                      _full_first_name(r.first_name_or_initial) or "",
                                      r.organisation or "", r.appearance_id))
        subclusters: list[PanelCluster] = []

        def new_cluster(rec: PanelAppearanceRecord) -> None:
            cluster = PanelCluster(
                cluster_id=f"{council}|{surname}|{initial}|{len(subclusters)}",
                council=council, surname=surname, initial=initial, records=[rec])
            subclusters.append(cluster)

        for rec in group:
            full = _full_first_name(rec.first_name_or_initial)
            if full is not None:
                target = _place_full_name(rec, full, subclusters, thresholds)
            else:
                target = _place_initial_only(rec, subclusters)
            if target is None:
                new_cluster(rec)
            else:
                target.records.append(rec)
        clusters.extend(subclusters)
    return clusters


def _place_full_name(rec, full, subclusters, thresholds) -> PanelCluster | None:
    for cluster in subclusters:
        names = cluster.full_first_names()
        if names and full not in names:
            continue  # conflicting full first names split
        similarity = _org_similarity(rec.organisation,
                                     cluster.representative_organisation())
        if similarity is not None and similarity < thresholds.org_split:
            continue
        return cluster
    return None


def _place_initial_only(rec, subclusters) -> PanelCluster | None:
    if not subclusters:
        return None
    scored = []
    for idx, cluster in enumerate(subclusters):
        similarity = _org_similarity(rec.organisation,
                                     cluster.representative_organisation())
        scored.append((-(similarity if similarity is not None else -1.0), idx))
    _, idx = min(scored)
    return subclusters[idx]


def alignment_accepts(best: float, second: float | None,
                      thresholds: LinkingThresholds = LinkingThresholds()) -> bool:
    """Multi-candidate decision rule: best similarity must exceed the
    minimum and clear the runner-up by the margin."""
    if best <= thresholds.align_min:
        return False
    return second is None or best - second >= thresholds.align_margin


def align_cluster_person(
        cluster: PanelCluster,
        persons: Iterable[GtrPersonRecord],
        thresholds: LinkingThresholds = LinkingThresholds()) -> LinkResult | None:
    """Link a panellist cluster to a GtR person by (surname, initial).

    A unique candidate links directly; among several, the organisation
    similarity of the best must pass the alignment rule. Callers supply
    only persons that hold project membership records.
    """
    candidates = [p for p in persons
                  if p.has_memberships
                  and p.surname.strip().lower() == cluster.surname
                  and _initial(p.first_name) == cluster.initial]
    if not candidates:
        return None
    rep_org = cluster.representative_organisation()
    if len(candidates) == 1:
        person = candidates[0]
        similarity = _org_similarity(rep_org, person.organisation)
        return LinkResult(
            source_id=cluster.cluster_id, target_id=person.person_id,
            score=similarity if similarity is not None else 1.0,
            method=CLUSTER_ALIGNMENT,
            diagnostics={"unique_candidate": True, "org_similarity": similarity})

    scored = []
    for person in candidates:
        similarity = _org_similarity(rep_org, person.organisation)
        scored.append((similarity if similarity is not None else 0.0, person))
    scored.sort(key=lambda t: (-t[0], t[1].person_id))
    best_sim, best_person = scored[0]
    second_sim = scored[1][0]
    if not alignment_accepts(best_sim, second_sim, thresholds):
        return None
    return LinkResult(
        source_id=cluster.cluster_id, target_id=best_person.person_id,
        score=best_sim, method=CLUSTER_ALIGNMENT,
        diagnostics={"unique_candidate": False, "best": best_sim,
                     "second": second_sim, "margin": best_sim - second_sim,
                     "candidates": len(candidates)})


# ---------------------------------------------------------------------------
# Cross-validation of linked pairs


@dataclass(frozen=True)
class ValidationPair:
    """Whatever metadata both sides of a linked pair expose."""

    source_organisation: str | None = None
    target_organisation: str | None = None
    source_surname: str | None = None
    target_surname: str | None = None
    source_title: str | None = None
    target_title: str | None = None


@dataclass(frozen=True)
class ValidationReport:
    organisation_agreement: float | None
    organisation_n: int
    surname_agreement: float | None
    surname_n: int
    title_similarity_mean: float | None
    title_similarity_median: float | None
    title_n: int
    precision: float | None
    precision_ci: tuple[float, float] | None
    pooled_n: int

    def to_dict(self) -> dict:
        return {
            "organisation_agreement": self.organisation_agreement,
            "organisation_n": self.organisation_n,
            "surname_agreement": self.surname_agreement,
            "surname_n": self.surname_n,
            "title_similarity_mean": self.title_similarity_mean,
            "title_similarity_median": self.title_similarity_median,
            "title_n": self.title_n,
            "precision": self.precision,
            "precision_ci": list(self.precision_ci) if self.precision_ci else None,
            "pooled_n": self.pooled_n,
        }


def wilson_interval(successes: int, n: int, z: float = WILSON_Z_95) -> tuple[float, float]:
    """Two-sided Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def _agree(a: str, b: str) -> bool:
    return fuzzy_ratio(a, b) == 1.0


def validate_links(pairs: Sequence[ValidationPair]) -> ValidationReport:
    """Agreement statistics over linked pairs. Precision is the pooled
    organisation + surname agreement rate with a 95% Wilson interval."""
    org = [(p.source_organisation, p.target_organisation) for p in pairs
           if p.source_organisation and p.target_organisation]
    surname = [(p.source_surname, p.target_surname) for p in pairs
               if p.source_surname and p.target_surname]
    titles = [fuzzy_ratio(p.source_title, p.target_title) for p in pairs
              if p.source_title and p.target_title]

    org_agree = sum(_agree(a, b) for a, b in org)
    surname_agree = sum(_agree(a, b) for a, b in surname)
    pooled_n = len(org) + len(surname)
    pooled_successes = org_agree + surname_agree
    return ValidationReport(
        organisation_agreement=(org_agree / len(org)) if org else None,
        organisation_n=len(org),
        surname_agreement=(surname_agree / len(surname)) if surname else None,
        surname_n=len(surname),
        title_similarity_mean=mean(titles) if titles else None,
        title_similarity_median=median(titles) if titles else None,
        title_n=len(titles),
        precision=(pooled_successes / pooled_n) if pooled_n else None,
        precision_ci=wilson_interval(pooled_successes, pooled_n) if pooled_n else None,
        pooled_n=pooled_n,
    )
