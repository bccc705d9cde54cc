"""End-to-end run orchestration with stage-addressable artifacts.

A run directory ``<out>/<window>/<track>/run_<k>/`` holds every stage's
inputs and outputs, so any stage can be re-run from what is on disk. The
manifest records stage status and every external request with its as-of
bound; it carries no wall-clock timestamps, so scripted runs are
byte-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Optional

from . import analysis, clustering, gdelt, reflection
from .config import RunConfig
from .evaluation import RunOutput, load_cluster_gt
from .gateway import Gateway, HttpChatBackend, RecordingBackend, ScriptedBackend, UsageLedger
from .ingestion import Window, iter_journal, replay_fixture, write_journal
from .model import (
    Alert,
    Cluster,
    ClusterSet,
    InsightRecord,
    KeywordBundle,
    TemporalViolation,
    canonical_json,
    format_utc,
    parse_utc,
    slugify,
    valid_cluster_id,
)
from .validator import AlignmentRubric, validate_all

log = logging.getLogger(__name__)

STAGES = ("ingest", "cluster", "keywords", "gdelt", "analyze", "validate")
EVENTS_LOOKBACK = timedelta(days=30)
GKG_LOOKBACK = timedelta(days=4)
SEARCH_LOOKBACK = timedelta(days=4)


class StageError(RuntimeError):
    pass


class IncompatibleRuns(ValueError):
    pass


# -- artifact io --------------------------------------------------------------


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def write_records(path: Path, records) -> None:
    path.write_text("".join(canonical_json(r.to_dict()) + "\n" for r in records), encoding="utf-8")


def read_records(path: Path) -> list[InsightRecord]:
    return [InsightRecord.from_dict(json.loads(l)) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def read_alerts(path: Path) -> list[Alert]:
    return [a for _, a in iter_journal(path)]


# -- run context --------------------------------------------------------------


@dataclass
class RunContext:
    config: RunConfig
    window: Window
    as_of: datetime
    run: int
    run_dir: Path
    seed_note: str = ""
    backend_factory: Optional[Callable[[], object]] = None

    @classmethod
    def create(cls, config: RunConfig, window: Window, run: int = 0, as_of: Optional[datetime] = None,
               seed_note: str = "", backend_factory=None) -> "RunContext":
        as_of = as_of or window.end
        if as_of < window.start:
            raise TemporalViolation("as_of precedes the evaluation window")
        run_dir = config.paths.out / window.window_id / config.track_id / f"run_{run}"
        return cls(config, window, as_of, run, run_dir, seed_note, backend_factory)

    def path(self, name: str) -> Path:
        return self.run_dir / name

    # manifest -----------------------------------------------------------

    def load_manifest(self) -> dict:
        p = self.path("manifest.json")
        if p.exists():
            return read_json(p)
        return {
            "window": self.window.window_id,
            "window_start": format_utc(self.window.start),
            "window_end": format_utc(self.window.end),
            "track": self.config.track_id,
            "run": self.run,
            "as_of": format_utc(self.as_of),
            "config": self.config.describe(),
            "seed_note": self.seed_note,
            "stages": {},
            "external_calls": [],
        }

    def save_manifest(self, manifest: dict) -> None:
        write_json(self.path("manifest.json"), manifest)

    # gateway ------------------------------------------------------------

    def backend(self):
        if self.backend_factory is not None:
            return self.backend_factory()
        cfg = self.config
        if cfg.backend == "scripted":
            trace = cfg.paths.trace_for(self.window.window_id, self.run, cfg.track_id)
            if not trace.exists():
                raise StageError(f"trace not found: {trace}")
            return ScriptedBackend.from_file(trace)
        inner = HttpChatBackend(cfg.base_url, cfg.api_key_env, temperature=cfg.temperature)
        if cfg.paths.record_trace:
            return RecordingBackend(inner, cfg.paths.record_trace)
        return inner

    def gateway(self, stage: str, ledger: UsageLedger) -> Gateway:
        return Gateway(self.backend(), self.config.rate_card, self.config.models, ledger, stage)


def _ledger_before(ctx: RunContext, stage: str) -> UsageLedger:
    """Ledger entries of stages upstream of ``stage`` (a re-run discards its own)."""
    p = ctx.path("ledger.jsonl")
    if not p.exists():
        return UsageLedger()
    keep = set(STAGES[: STAGES.index(stage)])
    return UsageLedger(e for e in UsageLedger.load(p).entries if e.stage in keep)


# -- stages -------------------------------------------------------------------


def stage_ingest(ctx: RunContext, manifest: dict) -> None:
    src = ctx.config.paths.alerts
    if src is None or not src.exists():
        raise StageError(f"alert journal not found: {src}")
    alerts = [a for a in replay_fixture(src, ctx.window) if a.observed_at <= ctx.as_of]
    write_journal(alerts, ctx.path("alerts.jsonl"))


def _gt_clusters(ctx: RunContext, alerts: list[Alert]) -> ClusterSet:
    gt_dir = ctx.config.paths.gt
    table = load_cluster_gt(gt_dir / "clustering.csv")
    groups: dict[str, list[tuple[int, str]]] = {}
    taken: set[str] = set()
    orphans = []
    for i, a in enumerate(alerts):
        if a.alert_id not in table:
            orphans.append(i)
            continue
        label, direction = table[a.alert_id]
        cid = label if valid_cluster_id(label) else slugify(label)
        groups.setdefault(cid, []).append((i, direction or clustering.default_direction(a)))
    clusters = [Cluster(cid, cid.replace("_", " "), tuple(ms)) for cid, ms in groups.items()]
    taken.update(groups)
    for i in orphans:
        log.warning("alert %s has no ground-truth cluster; kept as singleton", alerts[i].alert_id)
        clusters.append(clustering._singleton(i, alerts[i], taken))
    return ClusterSet(tuple(clusters), (ctx.window.start, ctx.window.end))


def _search_provider(ctx: RunContext):
    if ctx.config.search_kind == "google":
        return reflection.GoogleSearch()
    return reflection.FixtureSearch(ctx.config.paths.search)


def stage_cluster(ctx: RunContext, manifest: dict, ledger: UsageLedger) -> None:
    cfg = ctx.config
    alerts = read_alerts(ctx.path("alerts.jsonl"))
    gw = ctx.gateway("cluster", ledger)
    window = (ctx.window.start, ctx.window.end)
    if cfg.use_gt_clusters:
        cs = _gt_clusters(ctx, alerts)
    else:
        cs = clustering.cluster_alerts(alerts, gw, window)
    rp = ctx.path("reflection.json")
    if cfg.clustering_track != "direct" and not cfg.use_gt_clusters and cs.clusters:
        search = None
        if cfg.clustering_track == "reflection_tools":
            search = reflection.BoundedSearch(_search_provider(ctx), ctx.as_of - SEARCH_LOOKBACK, ctx.as_of)
        cs, outcome = reflection.reflect_loop(
            cs, alerts, gw,
            mode="tool_calling" if search else "internal",
            search=search,
            max_iterations=cfg.cluster_reflection_max,
            max_queries=cfg.max_search_queries,
            max_workers=cfg.max_in_flight,
        )
        if search is not None:
            manifest["external_calls"] += [{**c, "stage": "cluster"} for c in search.calls]
        write_json(rp, outcome.to_dict())
    elif rp.exists():
        rp.unlink()
    cs = clustering.summarize_all(cs, alerts, gw, cfg.max_in_flight)
    write_json(ctx.path("clusters.json"), cs.to_dict())


def stage_keywords(ctx: RunContext, manifest: dict, ledger: UsageLedger) -> None:
    alerts = read_alerts(ctx.path("alerts.jsonl"))
    cs = ClusterSet.from_dict(read_json(ctx.path("clusters.json")))
    gw = ctx.gateway("keywords", ledger)
    cs = clustering.keywords_all(cs, alerts, gw, ctx.config.max_in_flight)
    write_json(
        ctx.path("keywords.json"),
        {c.cluster_id: c.keywords.to_dict() if c.keywords else None for c in cs.clusters},
    )


def _gdelt_source(ctx: RunContext):
    root = ctx.config.paths.gdelt
    if root is None:
        raise StageError("paths.gdelt is not configured")
    if ctx.config.gdelt_source == "http":
        return gdelt.HttpGdeltSource(root)
    return gdelt.LocalGdeltSource(root)


def stage_gdelt(ctx: RunContext, manifest: dict) -> None:
    keywords = read_json(ctx.path("keywords.json"))
    source = _gdelt_source(ctx)
    as_of = ctx.as_of
    requests = {"events": (as_of - EVENTS_LOOKBACK, as_of), "gkg": (as_of - GKG_LOOKBACK, as_of)}
    fetched = {}
    for kind, (start, end) in requests.items():
        manifest["external_calls"].append(
            {"kind": f"gdelt_{kind}", "start": format_utc(start), "end": format_utc(end),
             "as_of": format_utc(as_of), "stage": "gdelt"}
        )
        fetched[kind] = gdelt.fetch_window(source, kind, (start, end), as_of)
    signals = {}
    for cid, kw in keywords.items():
        if kw is None:
            ev, gk = [], []
        else:
            bundle = KeywordBundle.from_dict(kw)
            ev = gdelt.filter_events(fetched["events"].records, bundle.actor_pairs)
            gk = gdelt.filter_gkg(fetched["gkg"].records, bundle.gkg_keywords)
        signals[cid] = gdelt.derive_signals(ev, gk, as_of).to_dict()
    write_json(ctx.path("gdelt_signals.json"), {
        "signals": signals,
        "skipped_rows": {k: r.skipped for k, r in fetched.items()},
    })


def stage_analyze(ctx: RunContext, manifest: dict, ledger: UsageLedger) -> None:
    cfg = ctx.config
    alerts = read_alerts(ctx.path("alerts.jsonl"))
    cs = ClusterSet.from_dict(read_json(ctx.path("clusters.json")))
    raw = read_json(ctx.path("gdelt_signals.json"))["signals"]
    signals = {cid: gdelt.GdeltSignals.from_dict(s) for cid, s in raw.items()}
    bundles = analysis.make_bundles(cs.clusters, alerts, signals, cfg.analysis_track)
    gw = ctx.gateway("analyze", ledger)
    track = cfg.analysis_track
    # the reflect step runs below so that its bound comes from the config
    base_track = "dnc_cot" if track == "dnc_cot_reflect" else track
    result = analysis.run_track(base_track, bundles, gw, (ctx.window.start, ctx.window.end), cfg.max_in_flight)

    for p in ctx.run_dir.glob("cot_*.txt"):
        p.unlink()
    for name in ("insights_pre_reflection.jsonl", "verdict.json"):
        if ctx.path(name).exists():
            ctx.path(name).unlink()
    for cid, text in sorted(result.cot_texts.items()):
        ctx.path(f"cot_{cid}.txt").write_text(text, encoding="utf-8")

    records = result.records
    if track == "dnc_cot_reflect":
        write_records(ctx.path("insights_pre_reflection.jsonl"), records)
        verdicts = []
        for _ in range(cfg.analysis_reflection_max):
            records, verdict = analysis.reflect_batch(records, result.cot_texts, gw)
            verdicts.append(verdict.to_dict())
        write_json(ctx.path("verdict.json"), verdicts)
    write_records(ctx.path("insights.jsonl"), records)


def _rubric(ctx: RunContext) -> AlignmentRubric:
    p = ctx.config.paths.rubric
    return AlignmentRubric.load(p) if p else AlignmentRubric.default()


def stage_validate(ctx: RunContext, manifest: dict) -> None:
    rubric = _rubric(ctx)
    records, flipped = validate_all(read_records(ctx.path("insights.jsonl")), rubric)
    write_records(ctx.path("validated.jsonl"), records)
    write_json(ctx.path("validation.json"), {"rubric_version": rubric.version, "flipped": flipped})
    manifest["rubric_version"] = rubric.version


_LLM_STAGES = {"cluster": stage_cluster, "keywords": stage_keywords, "analyze": stage_analyze}
_PLAIN_STAGES = {"ingest": stage_ingest, "gdelt": stage_gdelt, "validate": stage_validate}


def run_stage(ctx: RunContext, stage: str) -> dict:
    """Run one stage from persisted upstream artifacts; returns the manifest.

    Downstream stage records, ledger entries and external-call records are
    dropped, since their artifacts no longer follow from this stage's output.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    manifest = ctx.load_manifest()
    if manifest["as_of"] != format_utc(ctx.as_of):
        raise StageError(f"run directory was created with as_of {manifest['as_of']}")
    downstream = set(STAGES[STAGES.index(stage):])
    manifest["stages"] = {k: v for k, v in manifest["stages"].items() if k not in downstream}
    manifest["external_calls"] = [c for c in manifest["external_calls"] if c["stage"] not in downstream]
    ledger = _ledger_before(ctx, stage)
    try:
        if stage in _LLM_STAGES:
            _LLM_STAGES[stage](ctx, manifest, ledger)
        else:
            _PLAIN_STAGES[stage](ctx, manifest)
        manifest["stages"][stage] = {"status": "completed"}
    except Exception as exc:
        log.error("stage %s failed: %s", stage, exc)
        manifest["stages"][stage] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    finally:
        ledger.dump(ctx.path("ledger.jsonl"))
        manifest["ledger_totals"] = ledger.totals()
        for call in manifest["external_calls"]:
            assert parse_utc(call["end"]) <= parse_utc(call["as_of"])
        ctx.save_manifest(manifest)
    return manifest


@dataclass
class RunResult:
    run_dir: Path
    manifest: dict

    @property
    def ok(self) -> bool:
        st = self.manifest["stages"]
        return all(st.get(s, {}).get("status") == "completed" for s in STAGES)

    @property
    def failed_stage(self) -> Optional[str]:
        return next((s for s in STAGES if self.manifest["stages"].get(s, {}).get("status") == "failed"), None)


def run_pipeline(ctx: RunContext, stages=STAGES) -> RunResult:
    """Run the stages in order, stopping at the first failure."""
    manifest = {}
    for stage in stages:
        manifest = run_stage(ctx, stage)
        if manifest["stages"][stage]["status"] != "completed":
            break
    return RunResult(ctx.run_dir, manifest)


def load_run_output(run_dir: str | Path) -> RunOutput:
    d = Path(run_dir)
    rp = d / "reflection.json"
    return RunOutput(
        alerts=read_alerts(d / "alerts.jsonl"),
        clusters=ClusterSet.from_dict(read_json(d / "clusters.json")),
        records=read_records(d / "validated.jsonl"),
        ledger=UsageLedger.load(d / "ledger.jsonl"),
        reflection_iterations=read_json(rp)["iterations_used"] if rp.exists() else None,
    )


# -- diff ---------------------------------------------------------------------


def diff_runs(
    run_a: str | Path,
    run_b: str | Path,
    gt: Optional[dict] = None,
    file_a: str = "validated.jsonl",
    file_b: str = "validated.jsonl",
) -> dict:
    """Field-level comparison of two record sets from the same track and window.

    With ``gt`` (cluster_id -> GroundTruthLabel) each changed field is also
    counted as a fix (a wrong, b right) or a break (a right, b wrong).
    """
    from .model import CATEGORICAL_FIELDS

    a_dir, b_dir = Path(run_a), Path(run_b)
    ma, mb = read_json(a_dir / "manifest.json"), read_json(b_dir / "manifest.json")
    for key in ("window", "track"):
        if ma[key] != mb[key]:
            raise IncompatibleRuns(f"{key} differs: {ma[key]} vs {mb[key]}")
    ra = {r.cluster_id: r for r in read_records(a_dir / file_a)}
    rb = {r.cluster_id: r for r in read_records(b_dir / file_b)}
    shared = sorted(set(ra) & set(rb))
    changes, counts = {}, {f: 0 for f in CATEGORICAL_FIELDS}
    fixes, breaks = {f: 0 for f in CATEGORICAL_FIELDS}, {f: 0 for f in CATEGORICAL_FIELDS}
    for cid in shared:
        diff = {}
        for f in CATEGORICAL_FIELDS:
            va, vb = getattr(ra[cid], f), getattr(rb[cid], f)
            if va == vb:
                continue
            diff[f] = [va, vb]
            counts[f] += 1
            if gt and cid in gt:
                truth = getattr(gt[cid], f)
                fixes[f] += va != truth and vb == truth
                breaks[f] += va == truth and vb != truth
        if diff:
            changes[cid] = diff

    def flips(d: Path) -> Optional[int]:
        p = d / "validation.json"
        return len(read_json(p)["flipped"]) if p.exists() else None

    report = {
        "window": ma["window"],
        "track": ma["track"],
        "shared": len(shared),
        "only_in_a": sorted(set(ra) - set(rb)),
        "only_in_b": sorted(set(rb) - set(ra)),
        "changes": changes,
        "changed_fields": counts,
        "validator_flips": {"a": flips(a_dir), "b": flips(b_dir)},
    }
    if gt:
        report["fixes"], report["breaks"] = fixes, breaks
    return report
