"""Builders shared across the test modules."""

from __future__ import annotations

import json
from dataclasses import replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

import polygnosis

from polygnosis.config import RunConfig, load_config
from polygnosis.gateway import BackendReply, Gateway, RateCard, Rates, ScriptedBackend, TraceEntry
from polygnosis.gdelt import GdeltSignals
from polygnosis.model import Alert, Cluster, ClusterSet, InsightRecord, WhaleProfile

T0 = datetime(2026, 3, 25, 2, 0, tzinfo=timezone.utc)
DEMO = Path(polygnosis.__file__).parent / "data" / "demo"
DEMO_CONFIG = DEMO / "config.toml"
DEMO_WINDOWS = ("2026-03-25", "2026-03-26")


def demo_config(out: Path, **overrides) -> RunConfig:
    """The bundled demo configuration writing under ``out``."""
    cfg = load_config(DEMO_CONFIG)
    return replace(cfg, paths=replace(cfg.paths, out=Path(out)), **overrides)


def at(minutes: float = 0, hours: float = 0, days: float = 0) -> datetime:
    return T0 + timedelta(minutes=minutes, hours=hours, days=days)


def alert(i: int = 0, title: str = "Will the US strike Iran by March 31?", side: str = "yes", *,
          kind: str = "price_shock", price: float = 0.6, delta: float = 0.08,
          whale_usd: float | None = None, profile: WhaleProfile | None = None, minutes: float = 0) -> Alert:
    if kind == "whale_buy" and whale_usd is None:
        whale_usd = 25_000.0
    return Alert(f"a{i}", title, side, kind, price, delta, at(minutes=minutes or i), whale_usd, profile)


def text(value) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def scripted(*replies, rates: Rates | None = None, models=None, ledger=None) -> Gateway:
    """Gateway over a ScriptedBackend.

    Each reply is ``(template_id, ordinal, response)``; several replies for
    the same key are served to successive attempts.
    """
    entries = [TraceEntry(t, o, text(r), 100, 20, 5.0) for t, o, r in replies]
    card = RateCard({}, rates) if rates else RateCard()
    return Gateway(ScriptedBackend(entries), card, models, ledger)


class CapturingBackend:
    """Serves replies from a callable and records every prompt it was sent."""

    simulated = True

    def __init__(self, respond):
        self.respond = respond
        self.calls: list[dict] = []

    def chat(self, system, user, *, model, template_id, ordinal, attempt):
        self.calls.append(dict(system=system, user=user, template_id=template_id, ordinal=ordinal, attempt=attempt))
        return BackendReply(text(self.respond(template_id, ordinal, attempt, system, user)), 10, 5, 1.0)


def cluster(cid: str, members, theme: str | None = None, **kw) -> Cluster:
    ms = tuple((m, "intensifying") if isinstance(m, int) else tuple(m) for m in members)
    return Cluster(cid, theme or cid.replace("_", " "), ms, **kw)


def cluster_set(*clusters: Cluster) -> ClusterSet:
    return ClusterSet(tuple(clusters), (T0, T0 + timedelta(days=1)))


def record(cid: str = "c", poly: str = "intensifying", whale: str = "large_capital", media: str = "intensifying",
           align: str = "consensus", **kw) -> InsightRecord:
    return InsightRecord(cid, poly, whale, media, align, **kw)


def record_json(poly="intensifying", whale="large_capital", media="intensifying", align="consensus", score=5, **kw) -> dict:
    return {
        "poly_direction": poly, "whale_quality": whale, "media_direction": media,
        "poly_media_alignment": align, "poly_comment": "p", "media_comment": "m",
        "alignment_comment": "a", "importance_score": score, "importance_reason": "r", **kw,
    }


def signals(**kw) -> GdeltSignals:
    base = dict(mentions_24h=0, total_mentions_30d=0, trend_24h_vs_3d=None, tone_24h_vs_3d=None,
                gkg_articles_24h=0, gkg_volume_trend=None, gkg_avg_tone=None, as_of=T0 + timedelta(days=1))
    return GdeltSignals(**{**base, **kw})
