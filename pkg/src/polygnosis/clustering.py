"""Clustering agent: alert batch -> ClusterSet, per-cluster summaries and GDELT
keyword bundles."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, Optional, Sequence, TypeVar

from . import schemas
from .gateway import ExtractionFailed, Gateway, GatewayError
from .ingestion import describe
from .model import (
    BANNED_CLUSTER_IDS,
    CLUSTER_ID_RE,
    Alert,
    Cluster,
    ClusterSet,
    KeywordBundle,
    format_utc,
    slugify,
)

log = logging.getLogger(__name__)

MAX_ACTOR_PAIRS = 5
MAX_GKG_KEYWORDS = 6


class IncompleteAssignment(RuntimeError):
    """Raised only in strict mode; by default unassigned alerts become singletons."""


def default_direction(alert: Alert) -> str:
    # used when the model's direction label is unusable
    return "intensifying" if alert.outcome_side == "yes" else "easing"


def _render_alert_list(alerts: Sequence[Alert]) -> str:
    return "\n".join(
        f"{i}. {a.market_title} — outcome: {a.outcome_side.capitalize()}" for i, a in enumerate(alerts)
    )


def _normalise_id(raw: str) -> str:
    cid = str(raw).strip().lower().replace("-", "_").replace(" ", "_")
    return cid if CLUSTER_ID_RE.match(cid) else slugify(cid, max_words=8)


def unique_id(base: str, taken: set[str]) -> str:
    cid = base if base not in BANNED_CLUSTER_IDS else f"{base}_alerts"
    if cid not in taken:
        return cid
    k = 2
    while f"{cid}_{k}" in taken:
        k += 1
    return f"{cid}_{k}"


def _parse_response(value: list, alerts: Sequence[Alert]):
    """Turn a raw clustering response into ordered (id, theme, members) groups.

    Out-of-range and already-assigned indices are dropped (first listing
    wins); duplicate ids are folded into their first occurrence.
    """
    n = len(alerts)
    groups: dict[str, tuple[str, list[tuple[int, str]]]] = {}
    assigned: set[int] = set()
    for entry in value:
        cid = _normalise_id(entry.get("cluster_id", ""))
        theme = str(entry.get("theme") or cid.replace("_", " "))
        members = groups.setdefault(cid, (theme, []))[1]
        for m in entry.get("alerts", []):
            idx = m.get("index")
            if not isinstance(idx, int) or isinstance(idx, bool) or not 0 <= idx < n or idx in assigned:
                continue
            direction = str(m.get("direction", "")).strip().lower()
            if direction not in ("intensifying", "easing"):
                direction = default_direction(alerts[idx])
            members.append((idx, direction))
            assigned.add(idx)
    return [(cid, theme, members) for cid, (theme, members) in groups.items() if members]


def _singleton(idx: int, alert: Alert, taken: set[str]) -> Cluster:
    cid = unique_id(slugify(alert.market_title, max_words=5), taken)
    taken.add(cid)
    return Cluster(cid, alert.market_title, ((idx, default_direction(alert)),))


def cluster_alerts(
    alerts: Sequence[Alert],
    gateway: Gateway,
    window: Optional[tuple] = None,
    strict: bool = False,
) -> ClusterSet:
    """Cluster a batch of alerts, guaranteeing a partition of 0..n-1.

    One corrective re-request is made when the reply uses catch-all ids or
    leaves alerts unassigned. Whatever is still wrong afterwards falls back
    to singleton clusters named from the market title.
    """
    if not alerts:
        return ClusterSet((), window)
    n = len(alerts)
    bindings = {
        "WINDOW_START": format_utc(window[0]) if window else "n/a",
        "WINDOW_END": format_utc(window[1]) if window else "n/a",
        "ALERTS": _render_alert_list(alerts),
        "CORRECTION": "",
    }
    groups = _parse_response(
        gateway.complete("clustering_system", bindings, schemas.CLUSTERING).value, alerts
    )

    def problems(gs):
        banned = [cid for cid, _, _ in gs if cid in BANNED_CLUSTER_IDS]
        covered = {i for _, _, ms in gs for i, _ in ms}
        return banned, [i for i in range(n) if i not in covered]

    banned, missing = problems(groups)
    if banned or missing:
        notes = []
        if banned:
            notes.append(f"Do not use catch-all cluster ids: {', '.join(banned)}.")
        if missing:
            notes.append(f"These alert indices were not assigned: {missing}.")
        bindings["CORRECTION"] = (
            "\n\nYour previous clustering was rejected. "
            + " ".join(notes)
            + " Return the complete clustering again."
        )
        log.info("clustering re-request: banned=%s missing=%s", banned, missing)
        groups = _parse_response(
            gateway.complete("clustering_system", bindings, schemas.CLUSTERING).value, alerts
        )
        banned, missing = problems(groups)

    taken: set[str] = set()
    clusters: list[Cluster] = []
    orphans: list[int] = list(missing)
    for cid, theme, members in groups:
        if cid in BANNED_CLUSTER_IDS:
            orphans.extend(i for i, _ in members)
            continue
        cid = unique_id(cid, taken)
        taken.add(cid)
        clusters.append(Cluster(cid, theme, tuple(members)))
    if orphans:
        if strict:
            raise IncompleteAssignment(f"unassigned alert indices: {sorted(orphans)}")
        log.warning("singleton fallback for alert indices %s", sorted(orphans))
        for idx in sorted(orphans):
            clusters.append(_singleton(idx, alerts[idx], taken))
    result = ClusterSet(tuple(clusters), window)
    assert result.covers(n)
    return result


# -- summaries ----------------------------------------------------------------


def _member_lines(cluster: Cluster, alerts: Sequence[Alert]) -> str:
    return "\n".join(f"- ({d}) {describe(alerts[i])}" for i, d in cluster.members)


def fallback_summary(cluster: Cluster) -> str:
    return f"{cluster.theme}: signal {cluster.dominant_direction}"


def _clean_sentence(text: str) -> str:
    lines = [ln for ln in text.strip().splitlines() if not ln.strip().startswith("```")]
    s = " ".join(ln.strip() for ln in lines).strip()
    while len(s) >= 2 and s[0] in "\"'“‘" and s[-1] in "\"'”’":
        s = s[1:-1].strip()
    return s


def summarize_cluster(cluster: Cluster, alerts: Sequence[Alert], gateway: Gateway, reservation=None) -> str:
    bindings = {
        "THEME": cluster.theme,
        "SCORE": str(cluster.net_direction),
        "ALERTS": _member_lines(cluster, alerts),
    }
    try:
        text = gateway.complete(
            "summary_system", bindings, expect_json=False, reservation=reservation
        ).value
    except GatewayError as exc:
        log.warning("summary for %s failed (%s); using fallback", cluster.cluster_id, exc)
        return fallback_summary(cluster)
    sentence = _clean_sentence(text)
    if not sentence or sentence[0] in "{[":
        log.warning("summary for %s is not plain text; using fallback", cluster.cluster_id)
        return fallback_summary(cluster)
    return sentence


# -- keywords -----------------------------------------------------------------


def clean_keywords(value: dict) -> KeywordBundle:
    """Enforce the bundle invariants on a raw keyword response."""
    pairs: list[tuple[str, ...]] = []
    for raw in value.get("actor_pairs", []):
        if not isinstance(raw, list) or not 1 <= len(raw) <= 2:
            log.info("dropping malformed actor pair %r", raw)
            continue
        toks = tuple(" ".join(str(t).split()).upper() for t in raw)
        if any(not t for t in toks) or any(len(t.split()) > 2 for t in toks):
            log.info("dropping actor pair with overlong phrase %r", raw)
            continue
        if toks not in pairs:
            pairs.append(toks)
    keywords: list[str] = []
    for kw in value.get("gkg_keywords", []):
        kw = " ".join(str(kw).split())
        if kw and kw not in keywords:
            keywords.append(kw)
    if not pairs:
        raise ExtractionFailed("keyword response has no usable actor pairs")
    if not keywords:
        raise ExtractionFailed("keyword response has no gkg keywords")
    if len(keywords) < 3:
        log.info("only %d gkg keywords returned", len(keywords))
    return KeywordBundle(tuple(pairs[:MAX_ACTOR_PAIRS]), tuple(keywords[:MAX_GKG_KEYWORDS]))


def extract_keywords(
    cluster: Cluster, alerts: Sequence[Alert], gateway: Gateway, reservation=None
) -> KeywordBundle:
    bindings = {
        "CLUSTER_ID": cluster.cluster_id,
        "THEME": cluster.theme,
        "ALERTS": _member_lines(cluster, alerts),
    }
    value = gateway.complete("keyword_system", bindings, schemas.KEYWORDS, reservation=reservation).value
    return clean_keywords(value)


# -- fan-out ------------------------------------------------------------------

T = TypeVar("T")


def fan_out(
    gateway: Gateway,
    template_id: str,
    clusters: Sequence[Cluster],
    fn: Callable[..., T],
    max_workers: int = 1,
) -> list[T]:
    """Run ``fn(cluster, reservation)`` for each cluster, possibly in parallel.

    Ordinals are reserved in cluster order before dispatch so scripted
    replays see the same keys whatever the completion order.
    """
    reservations = [gateway.reserve(template_id) for _ in clusters]
    if max_workers <= 1 or len(clusters) <= 1:
        return [fn(c, r) for c, r in zip(clusters, reservations)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, clusters, reservations))


def summarize_all(cs: ClusterSet, alerts: Sequence[Alert], gateway: Gateway, max_workers: int = 1) -> ClusterSet:
    todo = [c for c in cs.clusters if c.summary is None]
    texts = fan_out(
        gateway, "summary_system", todo,
        lambda c, r: summarize_cluster(c, alerts, gateway, reservation=r), max_workers,
    )
    done = {c.cluster_id: t for c, t in zip(todo, texts)}
    return cs.replace_clusters(
        replace(c, summary=done[c.cluster_id]) if c.cluster_id in done else c for c in cs.clusters
    )


def keywords_all(
    cs: ClusterSet,
    alerts: Sequence[Alert],
    gateway: Gateway,
    max_workers: int = 1,
    only: Optional[set[str]] = None,
) -> ClusterSet:
    """Attach keyword bundles to clusters lacking one (or those named in ``only``).

    A cluster whose extraction fails keeps ``keywords=None``.
    """
    todo = [
        c for c in cs.clusters
        if (c.cluster_id in only if only is not None else c.keywords is None)
    ]

    def one(c, r):
        try:
            return extract_keywords(c, alerts, gateway, reservation=r)
        except ExtractionFailed as exc:
            # no bundle means no media filter; the cluster reads as no_coverage
            log.warning("keywords for %s failed: %s", c.cluster_id, exc)
            return None

    bundles = fan_out(gateway, "keyword_system", todo, one, max_workers)
    done = {c.cluster_id: b for c, b in zip(todo, bundles) if b is not None}
    return cs.replace_clusters(
        replace(c, keywords=done[c.cluster_id]) if c.cluster_id in done else c for c in cs.clusters
    )
