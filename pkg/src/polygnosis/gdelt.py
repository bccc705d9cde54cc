"""GDELT v2 Events / GKG retrieval, keyword filtering and media-signal derivation.

Every fetch is bounded by an as-of timestamp: a request whose window ends
after it is rejected outright, and ``derive_signals`` refuses records stamped
after it.
"""

from __future__ import annotations

import bisect
import io
import logging
import math
import os
import tempfile
import zipfile
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Protocol, Sequence

from .model import TemporalViolation, format_utc

log = logging.getLogger(__name__)

SLOT = timedelta(minutes=15)
STAMP_FMT = "%Y%m%d%H%M%S"

# column positions in the tab-delimited exports
EV_ID, EV_ACTOR1, EV_ACTOR2, EV_NUM_MENTIONS, EV_AVG_TONE, EV_DATEADDED = 0, 6, 16, 31, 34, 59
EV_MIN_COLS = 60
GKG_ID, GKG_DATE, GKG_THEMES, GKG_PERSONS, GKG_ORGS, GKG_TONE = 0, 1, 8, 12, 14, 15
GKG_MIN_COLS = 16


class FetchFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class EventRecord:
    event_id: str
    actor1: str
    actor2: str
    num_mentions: int
    avg_tone: float
    added_at: datetime


@dataclass(frozen=True)
class GkgRecord:
    record_id: str
    published_at: datetime
    persons: tuple[str, ...]
    organizations: tuple[str, ...]
    themes: tuple[str, ...]
    tone: float


def parse_stamp(text: str) -> datetime:
    return datetime.strptime(text.strip(), STAMP_FMT).replace(tzinfo=timezone.utc)


def _name_portions(field: str) -> tuple[str, ...]:
    names = []
    for item in field.split(";"):
        name = item.split(",", 1)[0].strip()
        if name:
            names.append(name)
    return tuple(names)


def parse_event_row(cols: Sequence[str]) -> EventRecord:
    if len(cols) < EV_MIN_COLS:
        raise ValueError(f"expected >= {EV_MIN_COLS} columns, got {len(cols)}")
    return EventRecord(
        event_id=cols[EV_ID],
        actor1=cols[EV_ACTOR1].strip().upper(),
        actor2=cols[EV_ACTOR2].strip().upper(),
        num_mentions=int(cols[EV_NUM_MENTIONS] or 0),
        avg_tone=float(cols[EV_AVG_TONE]),
        added_at=parse_stamp(cols[EV_DATEADDED]),
    )


def parse_gkg_row(cols: Sequence[str]) -> GkgRecord:
    if len(cols) < GKG_MIN_COLS:
        raise ValueError(f"expected >= {GKG_MIN_COLS} columns, got {len(cols)}")
    return GkgRecord(
        record_id=cols[GKG_ID],
        published_at=parse_stamp(cols[GKG_DATE]),
        persons=_name_portions(cols[GKG_PERSONS]),
        organizations=_name_portions(cols[GKG_ORGS]),
        themes=_name_portions(cols[GKG_THEMES]),
        tone=float(cols[GKG_TONE].split(",", 1)[0]),
    )


PARSERS = {"events": parse_event_row, "gkg": parse_gkg_row}


def parse_tsv(text: str, kind: str) -> tuple[list, int]:
    """Parse one export file; returns (records, number of malformed rows skipped)."""
    parse = PARSERS[kind]
    records, skipped = [], 0
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            records.append(parse(line.split("\t")))
        except (ValueError, IndexError):
            skipped += 1
    return records, skipped


def record_time(rec) -> datetime:
    return rec.added_at if isinstance(rec, EventRecord) else rec.published_at


# -- sources ------------------------------------------------------------------


class GdeltSource(Protocol):
    def files(self, kind: str, start: datetime, end: datetime) -> Iterator[str]:
        """Yield the text of every 15-minute file that may hold records in [start, end]."""


def slot_stamps(start: datetime, end: datetime) -> list[datetime]:
    """15-minute publication stamps covering [start, end]."""
    epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)
    first = epoch + math.ceil((start - epoch) / SLOT) * SLOT
    out = []
    t = first
    while t < end + SLOT:
        out.append(t)
        t += SLOT
    return out


class LocalGdeltSource:
    """Reads ``<root>/<kind>/<yyyymmddhhmmss>.tsv`` (the cache layout)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def files(self, kind, start, end):
        d = self.root / kind
        if not d.is_dir():
            return
        for p in sorted(d.glob("*.tsv")):
            try:
                stamp = parse_stamp(p.stem)
            except ValueError:
                continue
            if start <= stamp < end + SLOT:
                yield p.read_text(encoding="utf-8", errors="replace")


class HttpGdeltSource(LocalGdeltSource):
    """Downloads 15-minute export files on demand into the cache layout."""

    base_url = "http://data.gdeltproject.org/gdeltv2"
    suffix = {"events": "export.CSV.zip", "gkg": "gkg.csv.zip"}

    def __init__(self, cache_root: str | Path, client=None, timeout: float = 60.0):
        super().__init__(cache_root)
        self._client = client
        self.timeout = timeout

    def _download(self, kind: str, stamp: datetime) -> Optional[str]:
        import httpx

        client = self._client or httpx.Client(timeout=self.timeout)
        url = f"{self.base_url}/{stamp.strftime(STAMP_FMT)}.{self.suffix[kind]}"
        try:
            resp = client.get(url)
        except httpx.HTTPError as exc:
            raise FetchFailed(f"{url}: {exc}") from exc
        if resp.status_code == 404:
            log.info("missing GDELT slot %s", url)
            return None
        if resp.status_code != 200:
            raise FetchFailed(f"{url}: HTTP {resp.status_code}")
        with zipfile.ZipFile(io.BytesIO(resp.content)) as zf:
            return zf.read(zf.namelist()[0]).decode("utf-8", errors="replace")

    def files(self, kind, start, end):
        d = self.root / kind
        d.mkdir(parents=True, exist_ok=True)
        for stamp in slot_stamps(start, end):
            path = d / f"{stamp.strftime(STAMP_FMT)}.tsv"
            if not path.exists():
                text = self._download(kind, stamp)
                if text is None:
                    continue
                fd, tmp = tempfile.mkstemp(dir=d, suffix=".part")
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(text)
                os.replace(tmp, path)
            yield path.read_text(encoding="utf-8", errors="replace")


@dataclass
class FetchResult:
    records: list
    skipped: int

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def check_bound(start: datetime, end: datetime, as_of: datetime) -> None:
    if end > as_of:
        raise TemporalViolation(f"window end {format_utc(end)} is after as_of {format_utc(as_of)}")
    if end < start:
        raise ValueError("window end precedes start")


def fetch_window(
    source: GdeltSource, kind: str, window: tuple[datetime, datetime], as_of: datetime
) -> FetchResult:
    if kind not in PARSERS:
        raise ValueError(f"unknown GDELT table {kind!r}")
    start, end = window
    check_bound(start, end, as_of)
    records, skipped = [], 0
    for text in source.files(kind, start, end):
        recs, bad = parse_tsv(text, kind)
        skipped += bad
        records.extend(r for r in recs if start <= record_time(r) <= end)
    records.sort(key=lambda r: (record_time(r), r.event_id if kind == "events" else r.record_id))
    if skipped:
        log.info("%s %s..%s: skipped %d malformed rows", kind, format_utc(start), format_utc(end), skipped)
    return FetchResult(records, skipped)


# -- filters ------------------------------------------------------------------


def _nonempty_in(token: str, field: str) -> bool:
    return bool(field) and token in field


def filter_events(records: Iterable[EventRecord], actor_pairs: Sequence[Sequence[str]]) -> list[EventRecord]:
    """Events whose actor fields contain both sides of any pair (either order).

    An empty actor field never matches, so a record naming only one side is
    excluded.
    """
    pairs = [tuple(p) for p in actor_pairs if p]
    out = []
    for rec in records:
        for p in pairs:
            if len(p) == 1:
                tok = p[0].upper()
                hit = _nonempty_in(tok, rec.actor1) or _nonempty_in(tok, rec.actor2)
            else:
                a, b = p[0].upper(), p[1].upper()
                hit = (_nonempty_in(a, rec.actor1) and _nonempty_in(b, rec.actor2)) or (
                    _nonempty_in(a, rec.actor2) and _nonempty_in(b, rec.actor1)
                )
            if hit:
                out.append(rec)
                break
    return out


def _theme_tokens(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.upper().replace(" ", "_").split("_") if t)


def _contains_run(haystack: tuple[str, ...], needle: tuple[str, ...]) -> bool:
    k = len(needle)
    return k > 0 and any(haystack[i : i + k] == needle for i in range(len(haystack) - k + 1))


def filter_gkg(records: Iterable[GkgRecord], keywords: Sequence[str]) -> list[GkgRecord]:
    """Articles naming a keyword exactly (case-insensitive) in persons or
    organizations, or carrying it as a run of theme tokens."""
    kws = [k.strip() for k in keywords if k and k.strip()]
    if not kws:
        raise ValueError("filter_gkg needs at least one keyword")
    names = {k.casefold() for k in kws}
    theme_needles = [_theme_tokens(k) for k in kws]
    out = []
    for rec in records:
        if any(n.casefold() in names for n in rec.persons + rec.organizations):
            out.append(rec)
            continue
        if any(_contains_run(_theme_tokens(t), nd) for t in rec.themes for nd in theme_needles):
            out.append(rec)
    return out


# -- signals ------------------------------------------------------------------


@dataclass(frozen=True)
class GdeltSignals:
    mentions_24h: int
    total_mentions_30d: int
    trend_24h_vs_3d: Optional[float]
    tone_24h_vs_3d: Optional[float]
    gkg_articles_24h: int
    gkg_volume_trend: Optional[float]
    gkg_avg_tone: Optional[float]
    as_of: datetime

    def to_dict(self) -> dict:
        return {
            "mentions_24h": self.mentions_24h,
            "total_mentions_30d": self.total_mentions_30d,
            "trend_24h_vs_3d": self.trend_24h_vs_3d,
            "tone_24h_vs_3d": self.tone_24h_vs_3d,
            "gkg_articles_24h": self.gkg_articles_24h,
            "gkg_volume_trend": self.gkg_volume_trend,
            "gkg_avg_tone": self.gkg_avg_tone,
            "as_of": format_utc(self.as_of),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GdeltSignals":
        from .model import parse_utc

        return cls(**{**d, "as_of": parse_utc(d["as_of"])})

    def prompt_lines(self) -> str:
        def fmt(v, spec):
            return "n/a" if v is None else format(v, spec)

        return "\n".join(
            [
                "GDELT Events:",
                f"  mentions_24h       = {self.mentions_24h}",
                f"  total_mentions_30d = {self.total_mentions_30d}",
                f"  trend_24h_vs_3d    = {fmt(self.trend_24h_vs_3d, '.2f')}",
                f"  tone_24h_vs_3d     = {fmt(self.tone_24h_vs_3d, '+.4f')}",
                "GDELT GKG:",
                f"  gkg_articles_24h   = {self.gkg_articles_24h}",
                f"  gkg_volume_trend   = {fmt(self.gkg_volume_trend, '.2f')}",
                f"  gkg_avg_tone       = {fmt(self.gkg_avg_tone, '+.4f')}",
            ]
        )


def _window_slice(times: list[datetime], lo: datetime, hi: datetime) -> tuple[int, int]:
    """Index range of sorted ``times`` falling in (lo, hi]."""
    return bisect.bisect_right(times, lo), bisect.bisect_right(times, hi)


def _mean(values: Sequence[float]) -> Optional[float]:
    return math.fsum(values) / len(values) if values else None


def derive_signals(
    events: Sequence[EventRecord], gkg: Sequence[GkgRecord], as_of: datetime
) -> GdeltSignals:
    """Media metrics for one cluster.

    Windows are left-open: last 24h is (as_of-24h, as_of], the prior three
    days (as_of-4d, as_of-24h], the 30-day total (as_of-30d, as_of]. Ratios
    and tone deltas are None when their comparison window is empty.
    """
    ev = sorted(events, key=lambda r: r.added_at)
    gk = sorted(gkg, key=lambda r: r.published_at)
    ev_t = [r.added_at for r in ev]
    gk_t = [r.published_at for r in gk]
    if (ev_t and ev_t[-1] > as_of) or (gk_t and gk_t[-1] > as_of):
        raise TemporalViolation("record stamped after as_of reached derive_signals")

    day, prior, month = as_of - timedelta(hours=24), as_of - timedelta(days=4), as_of - timedelta(days=30)

    e_lo, e_hi = _window_slice(ev_t, day, as_of)
    p_lo, p_hi = _window_slice(ev_t, prior, day)
    m_lo, m_hi = _window_slice(ev_t, month, as_of)
    today = ev[e_lo:e_hi]
    before = ev[p_lo:p_hi]

    g_lo, g_hi = _window_slice(gk_t, day, as_of)
    gp_lo, gp_hi = _window_slice(gk_t, prior, day)
    g_today = gk[g_lo:g_hi]
    g_before = gk[gp_lo:gp_hi]

    def trend(n_today: int, n_before: int) -> Optional[float]:
        # one division of exact integers, so the ratio is correctly rounded
        return 3 * n_today / n_before if n_before else None

    tone_today = _mean([r.avg_tone for r in today])
    tone_before = _mean([r.avg_tone for r in before])
    return GdeltSignals(
        mentions_24h=len(today),
        total_mentions_30d=m_hi - m_lo,
        trend_24h_vs_3d=trend(len(today), len(before)),
        tone_24h_vs_3d=None if tone_today is None or tone_before is None else tone_today - tone_before,
        gkg_articles_24h=len(g_today),
        gkg_volume_trend=trend(len(g_today), len(g_before)),
        gkg_avg_tone=_mean([r.tone for r in g_today]),
        as_of=as_of,
    )
