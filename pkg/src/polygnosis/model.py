"""Shared domain types and the closed label vocabularies.

Every type here is a frozen dataclass with ``to_dict``/``from_dict`` so that
artifacts on disk are plain canonical JSON.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Any, Iterable, Optional

POLY_DIRECTIONS = ("intensifying", "easing", "mixed")
WHALE_QUALITIES = (
    "top_trader",
    "high_winrate",
    "large_capital",
    "mixed_quality",
    "no_whale_data",
    "speculative",
)
MEDIA_DIRECTIONS = ("intensifying", "easing", "mixed", "no_coverage")
ALIGNMENTS = ("consensus", "divergence", "market_leads_media", "media_leads_market")
MEMBER_DIRECTIONS = ("intensifying", "easing")

VOCABULARIES: dict[str, tuple[str, ...]] = {
    "poly_direction": POLY_DIRECTIONS,
    "whale_quality": WHALE_QUALITIES,
    "media_direction": MEDIA_DIRECTIONS,
    "poly_media_alignment": ALIGNMENTS,
}
CATEGORICAL_FIELDS = tuple(VOCABULARIES)
COMMENT_FIELDS = ("poly_comment", "media_comment", "alignment_comment")

BANNED_CLUSTER_IDS = frozenset({"other", "misc", "mixed", "general", "politics", "market"})
CLUSTER_ID_RE = re.compile(r"^[a-z0-9_]+$")


class UnknownLabel(ValueError):
    """A categorical value outside its closed vocabulary."""


class InvalidRecord(ValueError):
    pass


class TemporalViolation(ValueError):
    """A data request whose window extends past its as-of bound."""


def parse_label(field_name: str, raw: str) -> str:
    try:
        vocab = VOCABULARIES[field_name]
    except KeyError:
        raise UnknownLabel(f"not a categorical field: {field_name!r}") from None
    if not isinstance(raw, str):
        raise UnknownLabel(f"{field_name}: expected a string, got {raw!r}")
    label = raw.strip().lower().replace("-", "_").replace(" ", "_")
    if label not in vocab:
        raise UnknownLabel(f"{field_name}: {raw!r} not in {vocab}")
    return label


def parse_direction(raw: str) -> str:
    label = str(raw).strip().lower()
    if label not in MEMBER_DIRECTIONS:
        raise UnknownLabel(f"direction: {raw!r} not in {MEMBER_DIRECTIONS}")
    return label


def valid_cluster_id(cluster_id: str) -> bool:
    return bool(CLUSTER_ID_RE.match(cluster_id)) and cluster_id not in BANNED_CLUSTER_IDS


def slugify(text: str, max_words: int = 5) -> str:
    words = re.findall(r"[a-z0-9]+", text.lower())[:max_words]
    return "_".join(words) or "untitled"


# -- time helpers -----------------------------------------------------------


def parse_utc(value: str | datetime) -> datetime:
    """Parse an ISO-8601 timestamp; naive values are rejected."""
    if isinstance(value, datetime):
        dt = value
    else:
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        dt = datetime.fromisoformat(text)
    if dt.tzinfo is None or dt.utcoffset() is None:
        raise ValueError(f"timestamp is not timezone-qualified: {value!r}")
    return dt.astimezone(timezone.utc)


def format_utc(dt: datetime) -> str:
    dt = dt.astimezone(timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# -- alerts -----------------------------------------------------------------


@dataclass(frozen=True)
class WhaleProfile:
    name: str
    win_rate: float
    pnl: float
    trades: int
    position_usd: float

    def __post_init__(self):
        if not 0.0 <= self.win_rate <= 1.0:
            raise InvalidRecord(f"win_rate out of range: {self.win_rate}")
        if self.trades < 0:
            raise InvalidRecord(f"negative trade count: {self.trades}")
        if self.position_usd < 0:
            raise InvalidRecord(f"negative position: {self.position_usd}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "win_rate": self.win_rate,
            "pnl": self.pnl,
            "trades": self.trades,
            "position_usd": self.position_usd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WhaleProfile":
        return cls(
            name=str(d["name"]),
            win_rate=float(d["win_rate"]),
            pnl=float(d["pnl"]),
            trades=int(d["trades"]),
            position_usd=float(d["position_usd"]),
        )


@dataclass(frozen=True)
class Alert:
    alert_id: str
    market_title: str
    outcome_side: str
    alert_kind: str
    price: float
    delta: float
    observed_at: datetime
    whale_usd: Optional[float] = None
    whale_profile: Optional[WhaleProfile] = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.outcome_side not in ("yes", "no"):
            raise InvalidRecord(f"outcome_side must be yes/no: {self.outcome_side!r}")
        if self.alert_kind not in ("price_shock", "whale_buy"):
            raise InvalidRecord(f"unknown alert_kind: {self.alert_kind!r}")
        if not 0.0 <= self.price <= 1.0:
            raise InvalidRecord(f"price out of [0,1]: {self.price}")
        if self.alert_kind == "whale_buy" and self.whale_usd is None:
            raise InvalidRecord("whale_buy alert without whale_usd")
        if self.whale_usd is not None and self.whale_usd < 0:
            raise InvalidRecord(f"negative whale_usd: {self.whale_usd}")
        if self.observed_at.tzinfo is None:
            raise InvalidRecord("observed_at must be timezone-qualified")

    def to_dict(self) -> dict:
        d = {
            "alert_id": self.alert_id,
            "market_title": self.market_title,
            "outcome_side": self.outcome_side,
            "alert_kind": self.alert_kind,
            "price": self.price,
            "delta": self.delta,
            "whale_usd": self.whale_usd,
            "whale_profile": self.whale_profile.to_dict() if self.whale_profile else None,
            "observed_at": format_utc(self.observed_at),
        }
        if self.flags:
            d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Alert":
        profile = d.get("whale_profile")
        whale_usd = d.get("whale_usd")
        return cls(
            alert_id=str(d["alert_id"]),
            market_title=str(d["market_title"]),
            outcome_side=str(d["outcome_side"]).lower(),
            alert_kind=str(d["alert_kind"]),
            price=float(d["price"]),
            delta=float(d["delta"]),
            whale_usd=None if whale_usd is None else float(whale_usd),
            whale_profile=WhaleProfile.from_dict(profile) if profile else None,
            observed_at=parse_utc(d["observed_at"]),
            flags=tuple(d.get("flags", ())),
        )


# -- clusters ---------------------------------------------------------------


@dataclass(frozen=True)
class KeywordBundle:
    actor_pairs: tuple[tuple[str, ...], ...]
    gkg_keywords: tuple[str, ...]

    def __post_init__(self):
        if len(self.actor_pairs) > 5:
            raise InvalidRecord("at most 5 actor pairs")
        if len(self.gkg_keywords) > 6:
            raise InvalidRecord("at most 6 gkg keywords")
        for pair in self.actor_pairs:
            if len(pair) not in (1, 2):
                raise InvalidRecord(f"actor pair must have 1 or 2 tokens: {pair}")
            for tok in pair:
                if tok != tok.upper() or not tok.strip() or len(tok.split()) > 2:
                    raise InvalidRecord(f"bad actor token: {tok!r}")

    def to_dict(self) -> dict:
        return {
            "actor_pairs": [list(p) for p in self.actor_pairs],
            "gkg_keywords": list(self.gkg_keywords),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeywordBundle":
        return cls(
            actor_pairs=tuple(tuple(p) for p in d["actor_pairs"]),
            gkg_keywords=tuple(d["gkg_keywords"]),
        )


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    theme: str
    members: tuple[tuple[int, str], ...]
    summary: Optional[str] = None
    keywords: Optional[KeywordBundle] = None

    def __post_init__(self):
        if not valid_cluster_id(self.cluster_id):
            raise InvalidRecord(f"invalid cluster_id: {self.cluster_id!r}")
        if not self.members:
            raise InvalidRecord(f"empty cluster: {self.cluster_id}")
        for _, direction in self.members:
            if direction not in MEMBER_DIRECTIONS:
                raise InvalidRecord(f"bad member direction: {direction!r}")

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.members]

    @property
    def net_direction(self) -> int:
        """Intensifying minus easing member count."""
        return sum(1 if d == "intensifying" else -1 for _, d in self.members)

    @property
    def dominant_direction(self) -> str:
        net = self.net_direction
        if net > 0:
            return "intensifying"
        if net < 0:
            return "easing"
        return "mixed"

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "theme": self.theme,
            "alerts": [{"index": i, "direction": d} for i, d in self.members],
            "summary": self.summary,
            "keywords": self.keywords.to_dict() if self.keywords else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Cluster":
        kw = d.get("keywords")
        return cls(
            cluster_id=d["cluster_id"],
            theme=d["theme"],
            members=tuple((int(m["index"]), m["direction"]) for m in d["alerts"]),
            summary=d.get("summary"),
            keywords=KeywordBundle.from_dict(kw) if kw else None,
        )


@dataclass(frozen=True)
class ClusterSet:
    clusters: tuple[Cluster, ...]
    source_window: Optional[tuple[datetime, datetime]] = None

    def __post_init__(self):
        ids = [c.cluster_id for c in self.clusters]
        if len(ids) != len(set(ids)):
            raise InvalidRecord(f"duplicate cluster ids: {ids}")
        seen: set[int] = set()
        for c in self.clusters:
            for i in c.indices:
                if i in seen:
                    raise InvalidRecord(f"alert index {i} in more than one cluster")
                seen.add(i)

    @property
    def ids(self) -> list[str]:
        return [c.cluster_id for c in self.clusters]

    def get(self, cluster_id: str) -> Cluster:
        for c in self.clusters:
            if c.cluster_id == cluster_id:
                return c
        raise KeyError(cluster_id)

    def covers(self, n: int) -> bool:
        """True when the clusters partition exactly 0..n-1."""
        return sorted(i for c in self.clusters for i in c.indices) == list(range(n))

    def labels(self, n: int) -> list[str]:
        out: list[Optional[str]] = [None] * n
        for c in self.clusters:
            for i in c.indices:
                out[i] = c.cluster_id
        if any(x is None for x in out):
            raise InvalidRecord("cluster set does not cover every alert")
        return out  # type: ignore[return-value]

    def replace_clusters(self, clusters: Iterable[Cluster]) -> "ClusterSet":
        return replace(self, clusters=tuple(clusters))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"clusters": [c.to_dict() for c in self.clusters]}
        if self.source_window:
            d["source_window"] = [format_utc(t) for t in self.source_window]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSet":
        window = d.get("source_window")
        return cls(
            clusters=tuple(Cluster.from_dict(c) for c in d["clusters"]),
            source_window=(parse_utc(window[0]), parse_utc(window[1])) if window else None,
        )


# -- insights ---------------------------------------------------------------


@dataclass(frozen=True)
class InsightRecord:
    cluster_id: str
    poly_direction: str
    whale_quality: str
    media_direction: str
    poly_media_alignment: str
    poly_comment: str = ""
    media_comment: str = ""
    alignment_comment: str = ""
    importance_score: int = 1
    importance_reason: str = ""
    incomplete: bool = False

    def __post_init__(self):
        for name, vocab in VOCABULARIES.items():
            if getattr(self, name) not in vocab:
                raise UnknownLabel(f"{name}: {getattr(self, name)!r}")
        if not isinstance(self.importance_score, int) or not 1 <= self.importance_score <= 10:
            raise InvalidRecord(f"importance_score out of 1..10: {self.importance_score!r}")

    def labels(self) -> dict[str, str]:
        return {f: getattr(self, f) for f in CATEGORICAL_FIELDS}

    def to_dict(self) -> dict:
        d = {
            "cluster_id": self.cluster_id,
            "poly_direction": self.poly_direction,
            "poly_comment": self.poly_comment,
            "whale_quality": self.whale_quality,
            "media_direction": self.media_direction,
            "media_comment": self.media_comment,
            "poly_media_alignment": self.poly_media_alignment,
            "alignment_comment": self.alignment_comment,
            "importance_score": self.importance_score,
            "importance_reason": self.importance_reason,
        }
        if self.incomplete:
            d["incomplete"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict, cluster_id: Optional[str] = None) -> "InsightRecord":
        """Build from an agent response or a stored record; labels are normalised."""
        score = d.get("importance_score", 1)
        if isinstance(score, bool) or not isinstance(score, (int, float, str)):
            raise InvalidRecord(f"importance_score: {score!r}")
        score = int(float(score))
        return cls(
            cluster_id=cluster_id if cluster_id is not None else str(d["cluster_id"]),
            poly_direction=parse_label("poly_direction", d["poly_direction"]),
            whale_quality=parse_label("whale_quality", d["whale_quality"]),
            media_direction=parse_label("media_direction", d["media_direction"]),
            poly_media_alignment=parse_label("poly_media_alignment", d["poly_media_alignment"]),
            poly_comment=str(d.get("poly_comment") or ""),
            media_comment=str(d.get("media_comment") or ""),
            alignment_comment=str(d.get("alignment_comment") or ""),
            importance_score=score,
            importance_reason=str(d.get("importance_reason") or ""),
            incomplete=bool(d.get("incomplete", False)),
        )


@dataclass(frozen=True)
class GroundTruthLabel:
    cluster_id: str
    poly_direction: str
    whale_quality: str
    media_direction: str
    poly_media_alignment: str
    annotator_id: str = ""
    day_window: str = ""

    def __post_init__(self):
        for name, vocab in VOCABULARIES.items():
            if getattr(self, name) not in vocab:
                raise UnknownLabel(f"{name}: {getattr(self, name)!r}")

    def labels(self) -> dict[str, str]:
        return {f: getattr(self, f) for f in CATEGORICAL_FIELDS}

    def to_dict(self) -> dict:
        return {
            "window": self.day_window,
            "cluster_id": self.cluster_id,
            **self.labels(),
            "annotator_id": self.annotator_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthLabel":
        return cls(
            cluster_id=str(d["cluster_id"]).strip(),
            poly_direction=parse_label("poly_direction", d["poly_direction"]),
            whale_quality=parse_label("whale_quality", d["whale_quality"]),
            media_direction=parse_label("media_direction", d["media_direction"]),
            poly_media_alignment=parse_label("poly_media_alignment", d["poly_media_alignment"]),
            annotator_id=str(d.get("annotator_id", "")),
            day_window=str(d.get("window", d.get("day_window", ""))),
        )


def sentinel_record(cluster_id: str, reason: str) -> InsightRecord:
    """Placeholder for a cluster the agent never classified; scored as a miss."""
    return InsightRecord(
        cluster_id=cluster_id,
        poly_direction="mixed",
        whale_quality="no_whale_data",
        media_direction="no_coverage",
        poly_media_alignment="market_leads_media",
        importance_score=1,
        importance_reason=reason,
        incomplete=True,
    )
