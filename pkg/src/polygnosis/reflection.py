"""Clustering reflection loop: an auditor proposes merge/split/rename actions,
the harness applies them, for at most three rounds."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Optional, Protocol, Sequence

from . import schemas
from .clustering import cluster_alerts, keywords_all, unique_id
from .gateway import ExtractionFailed, Gateway
from .model import (
    Alert,
    Cluster,
    ClusterSet,
    TemporalViolation,
    format_utc,
    parse_utc,
    valid_cluster_id,
)
from .prompts import REFLECTION_SEARCH_ADDON

log = logging.getLogger(__name__)

MAX_CLUSTER_REFLECTIONS = 3
MAX_SEARCH_RESULTS = 5


class ReflectionError(ValueError):
    pass


class UnknownClusterId(ReflectionError):
    pass


class InvalidAction(ReflectionError):
    pass


class MalformedActions(ReflectionError):
    pass


class SearchUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class ReflectionAction:
    type: str
    clusters: tuple[str, ...] = ()
    cluster: Optional[str] = None
    new_id: Optional[str] = None
    new_theme: Optional[str] = None
    reason: str = ""

    def to_dict(self) -> dict:
        d: dict = {"type": self.type, "reason": self.reason}
        if self.type == "merge":
            d["clusters"] = list(self.clusters)
        else:
            d["cluster"] = self.cluster
        if self.new_id is not None:
            d["new_id"] = self.new_id
        if self.new_theme is not None:
            d["new_theme"] = self.new_theme
        return d


def parse_action(raw: dict) -> ReflectionAction:
    if not isinstance(raw, dict):
        raise MalformedActions(f"action is not an object: {raw!r}")
    kind = str(raw.get("type", "")).strip().lower()
    reason = str(raw.get("reason", ""))
    new_theme = raw.get("new_theme")
    new_theme = str(new_theme) if new_theme else None
    if kind == "merge":
        ids = raw.get("clusters")
        if not isinstance(ids, list) or len(ids) < 2 or not all(isinstance(x, str) for x in ids):
            raise MalformedActions(f"merge needs >=2 cluster ids: {raw!r}")
        new_id = raw.get("new_id")
        return ReflectionAction("merge", tuple(ids), new_id=new_id or None, new_theme=new_theme, reason=reason)
    if kind in ("split", "rename"):
        target = raw.get("cluster")
        if not isinstance(target, str):
            raise MalformedActions(f"{kind} needs a single cluster id: {raw!r}")
        new_id = raw.get("new_id")
        if kind == "rename":
            if new_id is not None:
                new_id = str(new_id).strip().lower()
                if not valid_cluster_id(new_id):
                    raise MalformedActions(f"rename to invalid id {new_id!r}")
            if new_id is None and new_theme is None:
                raise MalformedActions(f"rename without new_id or new_theme: {raw!r}")
        return ReflectionAction(kind, cluster=target, new_id=new_id, new_theme=new_theme, reason=reason)
    raise MalformedActions(f"unknown action type {kind!r}")


@dataclass(frozen=True)
class ActionLogEntry:
    iteration: int
    action: dict
    status: str  # applied | rejected
    reason: str

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "action": self.action, "status": self.status, "reason": self.reason}


@dataclass(frozen=True)
class ReflectionOutcome:
    iterations_used: int
    satisfied: bool
    action_log: tuple[ActionLogEntry, ...] = ()
    search_counts: tuple[int, ...] = ()
    max_iterations: int = MAX_CLUSTER_REFLECTIONS

    def __post_init__(self):
        if not 0 <= self.iterations_used <= self.max_iterations:
            raise ValueError(f"iterations_used {self.iterations_used} exceeds bound {self.max_iterations}")

    def to_dict(self) -> dict:
        return {
            "iterations_used": self.iterations_used,
            "satisfied": self.satisfied,
            "action_log": [e.to_dict() for e in self.action_log],
            "search_counts": list(self.search_counts),
        }


# -- applying actions ---------------------------------------------------------


def apply_action(
    cs: ClusterSet, action: ReflectionAction, alerts: Sequence[Alert], gateway: Optional[Gateway]
) -> ClusterSet:
    """Apply one action; the returned set is a new partition of the same alerts.

    Changed clusters lose their keyword bundle and summary so that callers
    know to recompute them.
    """
    ids = cs.ids
    if action.type == "merge":
        targets = list(dict.fromkeys(action.clusters))
        unknown = [t for t in targets if t not in ids]
        if unknown:
            raise UnknownClusterId(f"merge references unknown clusters {unknown}")
        if len(targets) < 2:
            raise InvalidAction("merge needs two distinct clusters")
        first = cs.get(targets[0])
        members = [m for t in targets for m in cs.get(t).members]
        merged = Cluster(first.cluster_id, action.new_theme or first.theme, tuple(members))
        out = []
        for c in cs.clusters:
            if c.cluster_id == first.cluster_id:
                out.append(merged)
            elif c.cluster_id not in targets:
                out.append(c)
        return cs.replace_clusters(out)

    if action.cluster not in ids:
        raise UnknownClusterId(f"{action.type} references unknown cluster {action.cluster!r}")
    target = cs.get(action.cluster)

    if action.type == "rename":
        new_id = action.new_id or target.cluster_id
        if new_id != target.cluster_id and new_id in ids:
            raise InvalidAction(f"rename target {new_id!r} already exists")
        renamed = replace(target, cluster_id=new_id, theme=action.new_theme or target.theme)
        return cs.replace_clusters(renamed if c is target else c for c in cs.clusters)

    if action.type == "split":
        if len(target.members) < 2:
            raise InvalidAction(f"cannot split singleton cluster {target.cluster_id!r}")
        if gateway is None:
            raise InvalidAction("split requires a gateway")
        idx = target.indices
        sub = cluster_alerts([alerts[i] for i in idx], gateway, cs.source_window)
        taken = {c for c in ids if c != target.cluster_id}
        pieces = []
        for c in sub.clusters:
            cid = unique_id(c.cluster_id, taken)
            taken.add(cid)
            pieces.append(Cluster(cid, c.theme, tuple((idx[j], d) for j, d in c.members)))
        out = []
        for c in cs.clusters:
            out.extend(pieces if c is target else [c])
        return cs.replace_clusters(out)

    raise InvalidAction(f"unknown action type {action.type!r}")


# -- search -------------------------------------------------------------------


@dataclass(frozen=True)
class SearchResult:
    title: str
    snippet: str
    published_at: Optional[datetime]
    url: str = ""


class SearchProvider(Protocol):
    def search(self, query: str, start: datetime, as_of: datetime) -> list[SearchResult]: ...


class BoundedSearch:
    """Enforces the as-of bound on a provider and records every request."""

    def __init__(self, provider: SearchProvider, start: datetime, as_of: datetime):
        self.provider = provider
        self.start = start
        self.as_of = as_of
        self.calls: list[dict] = []

    def search(self, query: str, end: Optional[datetime] = None) -> list[SearchResult]:
        end = end or self.as_of
        if end > self.as_of:
            raise TemporalViolation(f"search window end {end} exceeds as_of {self.as_of}")
        self.calls.append(
            {"kind": "search", "query": query, "start": format_utc(self.start),
             "end": format_utc(end), "as_of": format_utc(self.as_of)}
        )
        results = self.provider.search(query, self.start, end)
        kept = [
            r for r in results
            if r.published_at is not None and self.start <= r.published_at <= end
        ]
        return kept[:MAX_SEARCH_RESULTS]


class FixtureSearch:
    """Serves canned results from a JSONL file of {query, title, snippet, published_at, url}."""

    def __init__(self, path: str | Path):
        self.entries = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]

    def search(self, query, start, as_of):
        q = query.strip().lower()
        out = []
        for e in self.entries:
            eq = str(e.get("query", "*")).strip().lower()
            if eq == "*" or eq == q:
                pub = e.get("published_at")
                out.append(SearchResult(e.get("title", ""), e.get("snippet", ""),
                                        parse_utc(pub) if pub else None, e.get("url", "")))
        return out


class GoogleSearch:
    """Google Programmable Search, restricted by date to the evaluation window."""

    endpoint = "https://www.googleapis.com/customsearch/v1"

    def __init__(self, key_env: str = "GOOGLE_API_KEY", cx_env: str = "GOOGLE_CSE_ID", client=None):
        self.key = os.environ.get(key_env)
        self.cx = os.environ.get(cx_env)
        self._client = client

    def search(self, query, start, as_of):
        import httpx

        if not self.key or not self.cx:
            raise SearchUnavailable("search credentials not configured")
        client = self._client or httpx.Client(timeout=20.0)
        params = {
            "key": self.key, "cx": self.cx, "q": query, "num": MAX_SEARCH_RESULTS,
            "sort": f"date:r:{start:%Y%m%d}:{as_of:%Y%m%d}",
        }
        try:
            resp = client.get(self.endpoint, params=params)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise SearchUnavailable(str(exc)) from exc
        out = []
        for item in resp.json().get("items", []):
            meta = (item.get("pagemap", {}).get("metatags") or [{}])[0]
            pub = meta.get("article:published_time")
            try:
                when = parse_utc(pub) if pub else None
            except ValueError:
                when = None
            out.append(SearchResult(item.get("title", ""), item.get("snippet", ""), when, item.get("link", "")))
        return out


# -- loop ---------------------------------------------------------------------


def _render_clusters(cs: ClusterSet, alerts: Sequence[Alert]) -> str:
    blocks = []
    for k, c in enumerate(cs.clusters):
        lines = [f"[{k}] {c.cluster_id} — {c.theme} ({len(c.members)} alerts)"]
        for i, d in c.members[:10]:
            lines.append(f"    - {alerts[i].market_title} [{alerts[i].outcome_side.capitalize()}] ({d})")
        if len(c.members) > 10:
            lines.append(f"    - ... {len(c.members) - 10} more")
        if c.keywords:
            pairs = ", ".join("/".join(p) for p in c.keywords.actor_pairs)
            lines.append(f"    actor_pairs: {pairs}")
            lines.append(f"    gkg_keywords: {', '.join(c.keywords.gkg_keywords)}")
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


def _render_search(results: dict[str, list[SearchResult]]) -> str:
    if not results:
        return ""
    lines = ["\n\nSearch results (restricted to the evaluation period):"]
    for q, rs in results.items():
        lines.append(f'Query: "{q}"')
        if not rs:
            lines.append("  (no results)")
        for r in rs:
            when = format_utc(r.published_at) if r.published_at else "undated"
            lines.append(f"  - {r.title} | {r.snippet} | {when}")
    return "\n".join(lines)


def reflect_loop(
    cs: ClusterSet,
    alerts: Sequence[Alert],
    gateway: Gateway,
    mode: str = "internal",
    search: Optional[BoundedSearch] = None,
    max_iterations: int = MAX_CLUSTER_REFLECTIONS,
    max_queries: int = 8,
    max_workers: int = 1,
) -> tuple[ClusterSet, ReflectionOutcome]:
    if mode not in ("internal", "tool_calling"):
        raise ValueError(f"unknown reflection mode {mode!r}")
    if mode == "tool_calling" and search is None:
        raise ValueError("tool_calling mode needs a search handle")

    cs = keywords_all(cs, alerts, gateway, max_workers)
    window = cs.source_window
    log_entries: list[ActionLogEntry] = []
    search_counts: list[int] = []
    requested_queries: list[str] = []
    satisfied = False
    used = 0

    for iteration in range(1, max_iterations + 1):
        used = iteration
        suffix, search_text, n_search = "", "", 0
        if mode == "tool_calling":
            queries = requested_queries or [c.theme for c in cs.clusters]
            queries = list(dict.fromkeys(queries))[:max_queries]
            try:
                found = {}
                for q in queries:
                    found[q] = search.search(q)
                    n_search += 1
                suffix = REFLECTION_SEARCH_ADDON
                search_text = _render_search(found)
            except SearchUnavailable as exc:
                log.warning("search unavailable in round %d (%s); auditing without it", iteration, exc)
        search_counts.append(n_search)

        bindings = {
            "ITERATION": str(iteration),
            "MAX_ITERATIONS": str(max_iterations),
            "WINDOW_START": format_utc(window[0]) if window else "n/a",
            "WINDOW_END": format_utc(window[1]) if window else "n/a",
            "CLUSTERS": _render_clusters(cs, alerts),
            "SEARCH_RESULTS": search_text,
        }
        try:
            reply = gateway.complete("reflection_base", bindings, schemas.REFLECTION, system_suffix=suffix).value
        except ExtractionFailed as exc:
            log.warning("round %d: malformed auditor reply (%s); skipped", iteration, exc)
            log_entries.append(ActionLogEntry(iteration, {}, "rejected", f"malformed reply: {exc}"))
            continue

        requested_queries = [q for q in reply.get("search_queries", []) if isinstance(q, str) and q.strip()]
        for raw in reply.get("actions") or []:
            try:
                action = parse_action(raw)
            except MalformedActions as exc:
                log_entries.append(ActionLogEntry(iteration, raw if isinstance(raw, dict) else {}, "rejected", str(exc)))
                continue
            try:
                cs = apply_action(cs, action, alerts, gateway)
            except (ReflectionError, ExtractionFailed) as exc:
                log_entries.append(ActionLogEntry(iteration, action.to_dict(), "rejected", str(exc)))
                continue
            assert cs.covers(len(alerts))
            log_entries.append(ActionLogEntry(iteration, action.to_dict(), "applied", action.reason))

        changed = {c.cluster_id for c in cs.clusters if c.keywords is None}
        if changed:
            cs = keywords_all(cs, alerts, gateway, max_workers, only=changed)

        if reply.get("satisfied") is True:
            satisfied = True
            break

    assert used <= max_iterations
    outcome = ReflectionOutcome(used, satisfied, tuple(log_entries), tuple(search_counts), max_iterations)
    return cs, outcome
