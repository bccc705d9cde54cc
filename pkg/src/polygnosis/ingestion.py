"""Trigger and collection: turns a market event stream into Alert records.

The detector is pure; ``monitor`` wires it to a reconnecting stream, an
optional whale-profile source and a durable JSONL journal.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Protocol

from .model import Alert, InvalidRecord, WhaleProfile, canonical_json, format_utc, parse_utc

log = logging.getLogger(__name__)

WINDOW_ANCHOR_HOUR = 2  # day windows run 02:00 UTC -> 02:00 UTC


class StreamDisconnected(ConnectionError):
    pass


class ProfileFetchFailed(RuntimeError):
    pass


class MalformedRecord(ValueError):
    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True)
class TriggerConfig:
    price_delta_threshold: float = 0.05
    whale_usd_threshold: float = 10_000.0
    window: timedelta = timedelta(minutes=15)

    def __post_init__(self):
        if self.price_delta_threshold <= 0 or self.whale_usd_threshold <= 0:
            raise ValueError("thresholds must be strictly positive")
        if self.window <= timedelta(0):
            raise ValueError("window must be positive")


@dataclass(frozen=True)
class MarketEvent:
    """A price update (``usd_size`` is None) or an executed trade."""

    market_id: str
    market_title: str
    outcome_side: str
    price: float
    observed_at: datetime
    usd_size: Optional[float] = None
    trader: Optional[str] = None


class ProfileSource(Protocol):
    def fetch(self, trader: str) -> WhaleProfile: ...


# -- windows ------------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    start: datetime
    end: datetime
    window_id: str

    def contains(self, t: datetime) -> bool:
        return self.start <= t < self.end


def day_window(day: str) -> Window:
    """The 24h window starting at 02:00 UTC on ``day`` (YYYY-MM-DD)."""
    d = datetime.strptime(day, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    start = d + timedelta(hours=WINDOW_ANCHOR_HOUR)
    return Window(start, start + timedelta(days=1), day)


def parse_window(text: str) -> Window:
    """Accepts ``YYYY-MM-DD`` (a day window) or ``<iso start>..<iso end>``."""
    if ".." not in text:
        return day_window(text)
    a, b = text.split("..", 1)
    start, end = parse_utc(a), parse_utc(b)
    if end <= start:
        raise ValueError(f"empty window: {text}")
    if start.hour == WINDOW_ANCHOR_HOUR and end - start == timedelta(days=1) and not start.minute:
        wid = start.strftime("%Y-%m-%d")
    else:
        wid = f"{start:%Y%m%dT%H%M}-{end:%Y%m%dT%H%M}"
    return Window(start, end, wid)


# -- detection ----------------------------------------------------------------


class AnomalyDetector:
    """Applies the price-shock and whale-buy rules to a stream of events.

    Price history is kept per (market, outcome) for the configured window. A
    price shock fires when the current price differs from any price seen in
    the window by at least the threshold; the reference is the price that
    maximises the move, and history restarts from the firing tick.
    """

    def __init__(self, config: TriggerConfig = TriggerConfig()):
        self.config = config
        self._history: dict[tuple[str, str], deque] = {}

    def _alert_id(self, kind: str, ev: MarketEvent) -> str:
        stamp = ev.observed_at.strftime("%Y%m%dT%H%M%S%f")
        return f"{kind}:{ev.market_id}:{ev.outcome_side}:{stamp}"

    def feed(self, ev: MarketEvent) -> list[Alert]:
        cfg = self.config
        hist = self._history.setdefault((ev.market_id, ev.outcome_side), deque())
        while hist and hist[0][0] < ev.observed_at - cfg.window:
            hist.popleft()

        ref_delta = 0.0
        for _, p in hist:
            d = ev.price - p
            if abs(d) > abs(ref_delta):
                ref_delta = d
        delta = round(ref_delta, 10)

        alerts = []
        if abs(delta) >= cfg.price_delta_threshold:
            alerts.append(
                Alert(
                    alert_id=self._alert_id("price_shock", ev),
                    market_title=ev.market_title,
                    outcome_side=ev.outcome_side,
                    alert_kind="price_shock",
                    price=ev.price,
                    delta=delta,
                    observed_at=ev.observed_at,
                )
            )
            hist.clear()
        if ev.usd_size is not None and ev.usd_size >= cfg.whale_usd_threshold:
            alerts.append(
                Alert(
                    alert_id=self._alert_id("whale_buy", ev),
                    market_title=ev.market_title,
                    outcome_side=ev.outcome_side,
                    alert_kind="whale_buy",
                    price=ev.price,
                    delta=delta,
                    observed_at=ev.observed_at,
                    whale_usd=ev.usd_size,
                    flags=(f"trader:{ev.trader}",) if ev.trader else (),
                )
            )
        hist.append((ev.observed_at, ev.price))
        return alerts


# -- journal ------------------------------------------------------------------


class AlertJournal:
    """Append-only JSONL journal; each append is fsynced before returning."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, alert: Alert) -> None:
        line = canonical_json(alert.to_dict()) + "\n"
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    __call__ = append


def _enrich(alert: Alert, profiles: Optional[ProfileSource]) -> Alert:
    trader = next((f.split(":", 1)[1] for f in alert.flags if f.startswith("trader:")), None)
    if profiles is None or trader is None:
        return alert
    try:
        profile = profiles.fetch(trader)
    except ProfileFetchFailed as exc:
        log.warning("profile fetch failed for %s: %s", trader, exc)
        return Alert(**{**alert.__dict__, "flags": alert.flags + ("profile_fetch_failed",)})
    return Alert(**{**alert.__dict__, "whale_profile": profile})


def monitor(
    connect: Callable[[], Iterable[MarketEvent]],
    config: TriggerConfig,
    sink: Callable[[Alert], None],
    profiles: Optional[ProfileSource] = None,
    *,
    max_reconnects: int = 5,
    base_delay: float = 1.0,
    max_delay: float = 60.0,
    sleep: Callable[[float], None] = time.sleep,
) -> int:
    """Consume events until the stream ends; returns the number of alerts.

    ``connect`` opens a fresh stream. On ``StreamDisconnected`` the monitor
    reconnects with exponential backoff; ``max_reconnects`` consecutive
    failures without an intervening event re-raise the disconnect.
    """
    detector = AnomalyDetector(config)
    emitted = 0
    failures = 0
    while True:
        try:
            for ev in connect():
                failures = 0
                for alert in detector.feed(ev):
                    if alert.alert_kind == "whale_buy":
                        alert = _enrich(alert, profiles)
                    sink(alert)
                    emitted += 1
            return emitted
        except StreamDisconnected as exc:
            if failures >= max_reconnects:
                raise
            delay = min(max_delay, base_delay * 2**failures)
            failures += 1
            log.warning("stream disconnected (%s); reconnect %d in %.1fs", exc, failures, delay)
            sleep(delay)


# -- replay -------------------------------------------------------------------


def iter_journal(path: str | Path) -> Iterator[tuple[int, Alert]]:
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, Alert.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError, InvalidRecord) as exc:
                raise MalformedRecord(lineno, str(exc)) from exc


def replay_fixture(path: str | Path, window: Optional[Window] = None) -> list[Alert]:
    """Load a journal, ordered by observed_at (file order breaks ties)."""
    alerts = [a for _, a in iter_journal(path)]
    if window is not None:
        alerts = [a for a in alerts if window.contains(a.observed_at)]
    return sorted(alerts, key=lambda a: a.observed_at)


def write_journal(alerts: Iterable[Alert], path: str | Path) -> None:
    text = "".join(canonical_json(a.to_dict()) + "\n" for a in alerts)
    Path(path).write_text(text, encoding="utf-8")


# -- live adapters ------------------------------------------------------------

POLYMARKET_WS = "wss://ws-subscriptions-clob.polymarket.com/ws/market"


@dataclass
class AssetInfo:
    market_id: str
    market_title: str
    outcome_side: str


def parse_ws_message(raw: str | dict, assets: dict[str, AssetInfo]) -> list[MarketEvent]:
    """Translate one market-channel message into MarketEvents.

    Handles ``last_trade_price`` (a trade) and ``price_change`` (a quote
    update); other event types are ignored. Unknown asset ids are dropped.
    """
    msgs = json.loads(raw) if isinstance(raw, str) else raw
    if isinstance(msgs, dict):
        msgs = [msgs]
    out = []
    for m in msgs:
        kind = m.get("event_type")
        if kind not in ("last_trade_price", "price_change"):
            continue
        ts = datetime.fromtimestamp(int(m.get("timestamp", 0)) / 1000, tz=timezone.utc)
        changes = m.get("price_changes") or [m]
        for ch in changes:
            info = assets.get(str(ch.get("asset_id", m.get("asset_id"))))
            if info is None or "price" not in ch:
                continue
            price = float(ch["price"])
            usd = None
            if kind == "last_trade_price":
                usd = price * float(ch.get("size", 0))
            out.append(
                MarketEvent(
                    market_id=info.market_id,
                    market_title=info.market_title,
                    outcome_side=info.outcome_side,
                    price=price,
                    observed_at=ts,
                    usd_size=usd,
                    trader=ch.get("maker_address") or ch.get("trader"),
                )
            )
    return out


def websocket_stream(assets: dict[str, AssetInfo], url: str = POLYMARKET_WS):
    """Return a ``connect`` callable for :func:`monitor` over the live feed."""

    def connect() -> Iterator[MarketEvent]:
        from websockets.exceptions import ConnectionClosed
        from websockets.sync.client import connect as ws_connect

        try:
            with ws_connect(url) as ws:
                ws.send(json.dumps({"assets_ids": list(assets), "type": "market"}))
                for raw in ws:
                    yield from parse_ws_message(raw, assets)
        except (ConnectionClosed, OSError) as exc:
            raise StreamDisconnected(str(exc)) from exc

    return connect


@dataclass
class HttpProfileSource:
    """Fetches trader history from a JSON endpoint.

    ``url_template`` is formatted with ``trader``; the response must carry
    name, win_rate, pnl, trades and position_usd.
    """

    url_template: str
    timeout: float = 10.0
    client: object = field(default=None, repr=False)

    def fetch(self, trader: str) -> WhaleProfile:
        import httpx

        client = self.client or httpx.Client(timeout=self.timeout)
        try:
            resp = client.get(self.url_template.format(trader=trader))
            resp.raise_for_status()
            return WhaleProfile.from_dict(resp.json())
        except (httpx.HTTPError, KeyError, ValueError, InvalidRecord) as exc:
            raise ProfileFetchFailed(str(exc)) from exc


def describe(alert: Alert) -> str:
    """One-line rendering used inside prompts."""
    side = alert.outcome_side.capitalize()
    parts = [f'"{alert.market_title}" [{side}]', f"{alert.alert_kind}", f"price={alert.price:.3f}"]
    parts.append(f"Delta={alert.delta:+.3f}")
    if alert.whale_usd is not None:
        parts.append(f"whale_usd={alert.whale_usd:,.0f}")
    p = alert.whale_profile
    if p is not None:
        parts.append(
            f"trader={p.name} win_rate={p.win_rate:.2f} pnl={p.pnl:,.0f} "
            f"trades={p.trades} position_usd={p.position_usd:,.0f}"
        )
    parts.append(f"at {format_utc(alert.observed_at)}")
    return " | ".join(parts)
