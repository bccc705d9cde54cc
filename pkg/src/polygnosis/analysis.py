"""Analysis agent: per-cluster InsightRecords under the four reasoning tracks.

``global``           one call over a compressed brief of every cluster
``dnc``              one isolated call per cluster
``dnc_cot``          per cluster, a free-form reasoning call then an extraction call
``dnc_cot_reflect``  ``dnc_cot`` followed by one batched audit pass
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from . import schemas
from .gateway import BackendTimeout, ExtractionFailed, Gateway, extract_json, validate_shape
from .gdelt import GdeltSignals
from .ingestion import describe
from .model import (
    CATEGORICAL_FIELDS,
    Alert,
    Cluster,
    InsightRecord,
    InvalidRecord,
    UnknownLabel,
    format_utc,
    parse_label,
    sentinel_record,
)

log = logging.getLogger(__name__)

TRACKS = ("global", "dnc", "dnc_cot", "dnc_cot_reflect")
REFLECTION_BATCH = 5
GLOBAL_TOP_ALERTS = 5


class MalformedVerdict(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisInputBundle:
    cluster: Cluster
    alerts: tuple[Alert, ...]  # member alerts, in cluster member order
    signals: GdeltSignals
    track: str

    def __post_init__(self):
        if self.track not in TRACKS:
            raise ValueError(f"unknown track {self.track!r}")
        if len(self.alerts) != len(self.cluster.members):
            raise ValueError("bundle alerts must match cluster members")


def make_bundles(clusters, alerts: Sequence[Alert], signals: dict[str, GdeltSignals], track: str):
    return [
        AnalysisInputBundle(c, tuple(alerts[i] for i in c.indices), signals[c.cluster_id], track)
        for c in clusters
    ]


def _direction_line(c: Cluster) -> str:
    up = sum(1 for _, d in c.members if d == "intensifying")
    down = len(c.members) - up
    return f"direction score {c.net_direction:+d} ({up} intensifying, {down} easing)"


def render_cluster_block(b: AnalysisInputBundle) -> str:
    c = b.cluster
    lines = [
        f"cluster_id: {c.cluster_id}",
        f"theme: {c.theme}",
        f"summary: {c.summary or 'n/a'}",
        _direction_line(c),
        "",
        f"Polymarket alerts ({len(b.alerts)}):",
    ]
    for (_, d), a in zip(c.members, b.alerts):
        lines.append(f"- ({d}) {describe(a)}")
    lines += ["", b.signals.prompt_lines()]
    return "\n".join(lines)


# -- global track -------------------------------------------------------------


def top_alerts(b: AnalysisInputBundle, k: int = GLOBAL_TOP_ALERTS) -> list[tuple[str, Alert]]:
    """Whale buys by size first, then price shocks by |delta|; member order breaks ties."""
    rows = list(enumerate(zip((d for _, d in b.cluster.members), b.alerts)))

    def key(row):
        pos, (_, a) = row
        if a.whale_usd is not None:
            return (0, -a.whale_usd, pos)
        return (1, -abs(a.delta), pos)

    return [da for _, da in sorted(rows, key=key)[:k]]


def _fmt(v, spec):
    return "n/a" if v is None else format(v, spec)


def compress_bundle(b: AnalysisInputBundle) -> str:
    c, s = b.cluster, b.signals
    lines = [
        f"[{c.cluster_id}] {c.theme} | {len(b.alerts)} alerts | {_direction_line(c)}",
        f"  summary: {c.summary or 'n/a'}",
    ]
    for d, a in top_alerts(b):
        lines.append(f"  - ({d}) {describe(a)}")
    lines.append(
        f"  media: mentions_24h={s.mentions_24h} total_30d={s.total_mentions_30d} "
        f"trend={_fmt(s.trend_24h_vs_3d, '.2f')} tone_delta={_fmt(s.tone_24h_vs_3d, '+.4f')} "
        f"gkg_24h={s.gkg_articles_24h} gkg_trend={_fmt(s.gkg_volume_trend, '.2f')} "
        f"gkg_tone={_fmt(s.gkg_avg_tone, '+.4f')}"
    )
    return "\n".join(lines)


def _records_from_global(value: dict, wanted: set[str]) -> dict[str, InsightRecord]:
    got: dict[str, InsightRecord] = {}
    for entry in value.get("clusters", []):
        cid = str(entry.get("cluster_id", "")).strip()
        if cid not in wanted or cid in got:
            continue
        try:
            got[cid] = InsightRecord.from_dict(entry, cluster_id=cid)
        except (UnknownLabel, InvalidRecord, KeyError, ValueError) as exc:
            log.info("global reply for %s unusable: %s", cid, exc)
    return got


def analyze_global(
    bundles: Sequence[AnalysisInputBundle], gateway: Gateway, window: Optional[tuple] = None
) -> list[InsightRecord]:
    if not bundles:
        raise ValueError("analyze_global needs at least one cluster")

    def ask(subset):
        bindings = {
            "WINDOW_START": format_utc(window[0]) if window else "n/a",
            "WINDOW_END": format_utc(window[1]) if window else "n/a",
            "N_CLUSTERS": str(len(subset)),
            "CLUSTERS": "\n\n".join(compress_bundle(b) for b in subset),
        }
        value = gateway.complete("global_system", bindings, schemas.GLOBAL).value
        return _records_from_global(value, {b.cluster.cluster_id for b in subset})

    got = ask(bundles)
    missing = [b for b in bundles if b.cluster.cluster_id not in got]
    if missing:
        log.info("global reply omitted %s; re-requesting", [b.cluster.cluster_id for b in missing])
        got.update(ask(missing))
    out = []
    for b in bundles:
        cid = b.cluster.cluster_id
        out.append(got.get(cid) or sentinel_record(cid, "omitted from global reply"))
    return out


# -- divide and conquer -------------------------------------------------------


def _record(value, cluster_id: str) -> InsightRecord:
    try:
        return InsightRecord.from_dict(value, cluster_id=cluster_id)
    except (UnknownLabel, InvalidRecord, KeyError, ValueError, TypeError) as exc:
        raise ExtractionFailed(f"{cluster_id}: {exc}") from exc


def analyze_cluster(
    bundle: AnalysisInputBundle,
    gateway: Gateway,
    with_cot: bool,
    reservations: tuple = (None, None),
) -> tuple[InsightRecord, Optional[str]]:
    """Classify one cluster from its own bundle only.

    With CoT, the extraction call's output wins; if it cannot be used the
    reasoning text is scanned for a trailing JSON object. A cluster that
    still has no usable record comes back as an incomplete sentinel.
    """
    if bundle.track == "global":
        raise ValueError("analyze_cluster does not serve the global track")
    cid = bundle.cluster.cluster_id
    block = {"CLUSTER_BLOCK": render_cluster_block(bundle)}
    try:
        if not with_cot:
            value = gateway.complete("analysis_system", block, schemas.ANALYSIS, reservation=reservations[0]).value
            return _record(value, cid), None
        cot = gateway.complete("cot_wrapper", block, expect_json=False, reservation=reservations[0]).value
    except (ExtractionFailed, BackendTimeout) as exc:
        log.warning("analysis of %s failed: %s", cid, exc)
        return sentinel_record(cid, f"analysis failed: {exc}"), None

    try:
        value = gateway.complete(
            "cot_extract", {"COT_TEXT": cot}, schemas.ANALYSIS, reservation=reservations[1]
        ).value
        return _record(value, cid), cot
    except (ExtractionFailed, BackendTimeout) as exc:
        log.info("extract for %s failed (%s); scanning reasoning text", cid, exc)
    try:
        value = extract_json(cot, last=True)
        validate_shape(value, schemas.ANALYSIS)
        return _record(value, cid), cot
    except ExtractionFailed as exc:
        log.warning("no usable classification for %s: %s", cid, exc)
        return sentinel_record(cid, "no usable classification"), cot


def analyze_dnc(
    bundles: Sequence[AnalysisInputBundle], gateway: Gateway, with_cot: bool, max_in_flight: int = 1
) -> tuple[list[InsightRecord], dict[str, str]]:
    """Fan out per-cluster analyses.

    Ordinals are reserved in cluster-id order, so a cluster's trace entries
    do not depend on where it sits in the input.
    """
    order = sorted(range(len(bundles)), key=lambda i: bundles[i].cluster.cluster_id)
    first = "cot_wrapper" if with_cot else "analysis_system"
    res: dict[int, tuple] = {i: (gateway.reserve(first),) for i in order}
    if with_cot:
        for i in order:
            res[i] += (gateway.reserve("cot_extract"),)
    else:
        res = {i: r + (None,) for i, r in res.items()}

    def run(i):
        return analyze_cluster(bundles[i], gateway, with_cot, res[i])

    if max_in_flight <= 1:
        results = [run(i) for i in range(len(bundles))]
    else:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            results = list(pool.map(run, range(len(bundles))))
    records = [r for r, _ in results]
    cots = {r.cluster_id: t for r, t in results if t is not None}
    return records, cots


# -- batched audit ------------------------------------------------------------


@dataclass(frozen=True)
class FlaggedCluster:
    cluster_id: str
    feedback: str
    suggested_changes: dict = field(default_factory=dict)  # field -> label (validated)

    def to_dict(self) -> dict:
        return {"cluster_id": self.cluster_id, "feedback": self.feedback, "suggested_changes": dict(self.suggested_changes)}


@dataclass(frozen=True)
class ReflectionVerdict:
    flagged: tuple[FlaggedCluster, ...] = ()
    overall_comment: str = ""

    def to_dict(self) -> dict:
        return {"flagged_clusters": [f.to_dict() for f in self.flagged], "overall_comment": self.overall_comment}


def parse_verdict(value: dict, batch_ids: Sequence[str]) -> ReflectionVerdict:
    """Keep flags for ids in the batch and suggestions inside the vocabularies."""
    if not isinstance(value, dict) or not isinstance(value.get("flagged_clusters"), list):
        raise MalformedVerdict("reply lacks a flagged_clusters list")
    flagged = []
    for item in value["flagged_clusters"]:
        if not isinstance(item, dict):
            continue
        cid = str(item.get("cluster_id", "")).strip()
        if cid not in batch_ids:
            log.info("verdict flags unknown cluster %r; ignored", cid)
            continue
        changes = {}
        for name, raw in (item.get("suggested_changes") or {}).items():
            if name not in CATEGORICAL_FIELDS or raw is None:
                continue
            if str(raw).strip().lower() in ("", "null", "none", "ok"):
                continue
            try:
                changes[name] = parse_label(name, raw)
            except UnknownLabel:
                log.info("dropping out-of-vocabulary suggestion %s=%r for %s", name, raw, cid)
        flagged.append(FlaggedCluster(cid, str(item.get("feedback") or ""), changes))
    comments = [str(v) for k, v in sorted(value.items()) if k.startswith("overall_comment") and v]
    return ReflectionVerdict(tuple(flagged), " ".join(comments))


def _render_item(r: InsightRecord, cot: str) -> str:
    classification = {k: v for k, v in r.to_dict().items() if k != "cluster_id"}
    return "\n".join(
        [
            f"=== cluster_id: {r.cluster_id} ===",
            "--- chain of thought ---",
            cot or "(none)",
            "--- classification ---",
            json.dumps(classification, indent=1, ensure_ascii=False),
        ]
    )


def reflect_batch(
    records: Sequence[InsightRecord],
    cot_texts: dict[str, str],
    gateway: Gateway,
    batch_size: int = REFLECTION_BATCH,
) -> tuple[list[InsightRecord], ReflectionVerdict]:
    """One audit call per batch; flagged suggestions overwrite categorical fields once."""
    out = list(records)
    applied: set[str] = set()
    flagged_all: list[FlaggedCluster] = []
    comments: list[str] = []
    for b, start in enumerate(range(0, len(out), batch_size), 1):
        batch = out[start : start + batch_size]
        ids = [r.cluster_id for r in batch]
        bindings = {
            "BATCH": str(b),
            "N_ITEMS": str(len(batch)),
            "ITEMS": "\n\n".join(_render_item(r, cot_texts.get(r.cluster_id, "")) for r in batch),
        }
        try:
            value = gateway.complete("analysis_reflection", bindings, schemas.VERDICT).value
            verdict = parse_verdict(value, ids)
        except (ExtractionFailed, BackendTimeout, MalformedVerdict) as exc:
            log.warning("audit batch %d unusable (%s); records kept as is", b, exc)
            continue
        if verdict.overall_comment:
            comments.append(verdict.overall_comment)
        pos = {cid: start + k for k, cid in enumerate(ids)}
        for f in verdict.flagged:
            flagged_all.append(f)
            if f.cluster_id in applied:
                log.info("duplicate flag for %s ignored", f.cluster_id)
                continue
            applied.add(f.cluster_id)
            rec = out[pos[f.cluster_id]]
            if f.suggested_changes and not rec.incomplete:
                out[pos[f.cluster_id]] = replace(rec, **f.suggested_changes)
    assert len(applied) == len(set(applied)) <= len(records)
    return out, ReflectionVerdict(tuple(flagged_all), " ".join(comments))


# -- track dispatch -----------------------------------------------------------


@dataclass
class AnalysisResult:
    records: list[InsightRecord]
    cot_texts: dict[str, str] = field(default_factory=dict)
    pre_reflection: Optional[list[InsightRecord]] = None
    verdict: Optional[ReflectionVerdict] = None


def run_track(
    track: str,
    bundles: Sequence[AnalysisInputBundle],
    gateway: Gateway,
    window: Optional[tuple] = None,
    max_in_flight: int = 1,
) -> AnalysisResult:
    if track not in TRACKS:
        raise ValueError(f"unknown track {track!r}")
    if not bundles:
        return AnalysisResult([])
    if track == "global":
        result = AnalysisResult(analyze_global(bundles, gateway, window))
    else:
        records, cots = analyze_dnc(bundles, gateway, track != "dnc", max_in_flight)
        result = AnalysisResult(records, cots)
        if track == "dnc_cot_reflect":
            result.pre_reflection = records
            result.records, result.verdict = reflect_batch(records, cots, gateway)
    wanted = [b.cluster.cluster_id for b in bundles]
    assert [r.cluster_id for r in result.records] == wanted
    return result
