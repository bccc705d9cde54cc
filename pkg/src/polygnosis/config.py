"""Run configuration: one TOML file, secrets only from environment variables.

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .gateway import RateCard
from .ingestion import TriggerConfig

CLUSTERING_TRACKS = ("direct", "reflection", "reflection_tools")
ANALYSIS_TRACKS = ("global", "dnc", "dnc_cot", "dnc_cot_reflect")
CLUSTER_REFLECTION_BOUND = 3
ANALYSIS_REFLECTION_BOUND = 1


class ConfigError(ValueError):
    pass


def load_toml(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class Paths:
    alerts: Optional[Path] = None
    gdelt: Optional[Path] = None
    trace: Optional[str] = None  # may contain {track}, {window} and {run}
    gt: Optional[Path] = None
    out: Path = Path("out")
    rubric: Optional[Path] = None
    search: Optional[Path] = None
    record_trace: Optional[Path] = None

    def trace_for(self, window: str, run: int, track: str = "") -> Optional[Path]:
        if self.trace is None:
            return None
        return Path(self.trace.format(window=window, run=run, track=track))


@dataclass(frozen=True)
class RunConfig:
    analysis_track: str = "dnc"
    clustering_track: str = "direct"
    models: dict = field(default_factory=lambda: {"default": "scripted"})
    rate_card: RateCard = field(default_factory=RateCard)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    cluster_reflection_max: int = CLUSTER_REFLECTION_BOUND
    analysis_reflection_max: int = ANALYSIS_REFLECTION_BOUND
    max_search_queries: int = 8
    unsafe_bounds: bool = False
    max_in_flight: int = 4
    use_gt_clusters: bool = False
    temperature: Optional[float] = None
    backend: str = "scripted"
    base_url: str = ""
    api_key_env: str = "LLM_API_KEY"
    gdelt_source: str = "local"
    search_kind: str = "fixture"
    embedding: str = "hash"
    embedding_model: str = ""
    paths: Paths = field(default_factory=Paths)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.analysis_track not in ANALYSIS_TRACKS:
            raise ConfigError(f"unknown analysis track {self.analysis_track!r}")
        if self.clustering_track not in CLUSTERING_TRACKS:
            raise ConfigError(f"unknown clustering track {self.clustering_track!r}")
        if not self.unsafe_bounds:
            if self.cluster_reflection_max != CLUSTER_REFLECTION_BOUND:
                raise ConfigError(
                    f"clustering reflection bound must be {CLUSTER_REFLECTION_BOUND} (use --unsafe-bounds to override)"
                )
            if self.analysis_reflection_max != ANALYSIS_REFLECTION_BOUND:
                raise ConfigError(
                    f"analysis reflection bound must be {ANALYSIS_REFLECTION_BOUND} (use --unsafe-bounds to override)"
                )
        if self.cluster_reflection_max < 1 or self.analysis_reflection_max < 0:
            raise ConfigError("reflection bounds must be positive")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.backend not in ("scripted", "http"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "scripted" and self.paths.trace is None:
            raise ConfigError("scripted backend needs paths.trace")
        if self.backend == "http" and not self.base_url:
            raise ConfigError("http backend needs backend.base_url")
        if self.clustering_track == "reflection_tools" and self.search_kind == "fixture" and self.paths.search is None:
            raise ConfigError("tool-calling reflection needs paths.search or search.kind = 'google'")

    @property
    def track_id(self) -> str:
        return f"{self.clustering_track}.{self.analysis_track}"

    def with_overrides(self, **kw) -> "RunConfig":
        from dataclasses import replace

        return replace(self, **kw)

    def describe(self) -> dict[str, Any]:
        """The full non-secret configuration, as embedded in run manifests."""
        p = self.paths
        return {
            "analysis_track": self.analysis_track,
            "clustering_track": self.clustering_track,
            "models": dict(sorted(self.models.items())),
            "rates": {
                k: [r.rate_in, r.rate_out]
                for k, r in sorted({**self.rate_card.rates, "default": self.rate_card.default}.items())
            },
            "trigger": {
                "price_delta_threshold": self.trigger.price_delta_threshold,
                "whale_usd_threshold": self.trigger.whale_usd_threshold,
                "window_minutes": self.trigger.window.total_seconds() / 60,
            },
            "reflection": {
                "clustering_max_iterations": self.cluster_reflection_max,
                "analysis_max_applications": self.analysis_reflection_max,
                "max_search_queries": self.max_search_queries,
                "unsafe_bounds": self.unsafe_bounds,
            },
            "max_in_flight": self.max_in_flight,
            "use_gt_clusters": self.use_gt_clusters,
            "temperature": self.temperature,
            "backend": self.backend,
            "base_url": self.base_url,
            "gdelt_source": self.gdelt_source,
            "search_kind": self.search_kind,
            "embedding": self.embedding,
            "embedding_model": self.embedding_model,
            # file names only, so manifests do not depend on where the run happened
            "paths": {k: None if v is None else Path(v).name for k, v in vars(p).items()},
        }


def _path(base: Path, value) -> Optional[Path]:
    if value in (None, ""):
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def from_mapping(data: dict, base: Path = Path(".")) -> RunConfig:
    known = {
        "track", "analysis_track", "clustering_track", "models", "rates", "trigger", "reflection",
        "paths", "backend", "gdelt", "search", "embedding", "max_in_flight", "use_gt_clusters",
        "temperature", "unsafe_bounds",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    trig = data.get("trigger", {})
    refl = data.get("reflection", {})
    paths = data.get("paths", {})
    backend = data.get("backend", {})
    trace = paths.get("trace")
    try:
        trigger = TriggerConfig(
            float(trig.get("price_delta_threshold", 0.05)),
            float(trig.get("whale_usd_threshold", 10_000)),
            timedelta(minutes=float(trig.get("window_minutes", 15))),
        )
        return RunConfig(
            analysis_track=data.get("analysis_track", data.get("track", "dnc")),
            clustering_track=data.get("clustering_track", "direct"),
            models=dict(data.get("models", {"default": "scripted"})),
            rate_card=RateCard.from_mapping(data.get("rates", {})),
            trigger=trigger,
            cluster_reflection_max=int(refl.get("clustering_max_iterations", CLUSTER_REFLECTION_BOUND)),
            analysis_reflection_max=int(refl.get("analysis_max_applications", ANALYSIS_REFLECTION_BOUND)),
            max_search_queries=int(refl.get("max_search_queries", 8)),
            unsafe_bounds=bool(data.get("unsafe_bounds", False)),
            max_in_flight=int(data.get("max_in_flight", 4)),
            use_gt_clusters=bool(data.get("use_gt_clusters", False)),
            temperature=data.get("temperature"),
            backend=backend.get("kind", "scripted"),
            base_url=backend.get("base_url", ""),
            api_key_env=backend.get("api_key_env", "LLM_API_KEY"),
            gdelt_source=data.get("gdelt", {}).get("source", "local"),
            search_kind=data.get("search", {}).get("kind", "fixture"),
            embedding=data.get("embedding", {}).get("kind", "hash"),
            embedding_model=data.get("embedding", {}).get("model", ""),
            paths=Paths(
                alerts=_path(base, paths.get("alerts")),
                gdelt=_path(base, paths.get("gdelt")),
                trace=None if trace is None else str(_path(base, trace)),
                gt=_path(base, paths.get("gt")),
                out=_path(base, paths.get("out", "out")),
                rubric=_path(base, paths.get("rubric")),
                search=_path(base, paths.get("search")),
                record_trace=_path(base, paths.get("record_trace")),
            ),
            raw=data,
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return from_mapping(load_toml(path), path.parent)
