"""Command-line entry point: ``polygnosis <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ANALYSIS_TRACKS, CLUSTERING_TRACKS, ConfigError, RunConfig, from_mapping, load_toml
from .evaluation import (
    EmbeddingUnavailable,
    ExperimentPlan,
    GroundTruth,
    HashEmbedding,
    HttpEmbedding,
    RunFailed,
    SentenceTransformerEmbedding,
    load_label_gt,
    run_experiment,
)
from .ingestion import parse_window
from .model import parse_utc
from .pipeline import STAGES, RunContext, diff_runs, load_run_output, run_pipeline, run_stage

log = logging.getLogger("polygnosis")


def _config(args) -> RunConfig:
    path = Path(args.config)
    data = load_toml(path)
    if args.unsafe_bounds:
        # applied before validation so that non-default bounds load at all
        data["unsafe_bounds"] = True
    cfg = from_mapping(data, path.parent)
    kw = {}
    if args.trace:
        kw["paths"] = replace(cfg.paths, trace=str(Path(args.trace)))
    if args.out_root:
        kw["paths"] = replace(kw.get("paths", cfg.paths), out=Path(args.out_root))
    if getattr(args, "fixture", None):
        kw["paths"] = replace(kw.get("paths", cfg.paths), alerts=Path(args.fixture))
    return replace(cfg, **kw) if kw else cfg


def _context(args, cfg: RunConfig, window: str, run: int) -> RunContext:
    as_of = parse_utc(args.as_of) if args.as_of else None
    return RunContext.create(cfg, parse_window(window), run, as_of, args.seed_note or "")


def _embedder(cfg: RunConfig):
    if cfg.embedding == "http":
        return HttpEmbedding(cfg.base_url, cfg.embedding_model, cfg.api_key_env)
    if cfg.embedding == "sentence-transformers":
        return SentenceTransformerEmbedding(cfg.embedding_model or "all-MiniLM-L6-v2")
    return HashEmbedding()


def cmd_stage(args) -> int:
    cfg = _config(args)
    ctx = _context(args, cfg, args.window, args.run)
    manifest = run_stage(ctx, args.command)
    status = manifest["stages"][args.command]
    print(f"{args.command}: {status['status']}  ({ctx.run_dir})")
    if status["status"] != "completed":
        print(status.get("error", ""), file=sys.stderr)
        return 1
    return 0


def cmd_live_ingest(args) -> int:
    from .ingestion import AlertJournal, AssetInfo, HttpProfileSource, monitor, websocket_stream

    cfg = _config(args)
    assets = {k: AssetInfo(**v) for k, v in json.loads(Path(args.assets).read_text()).items()}
    profiles = HttpProfileSource(args.profile_url) if args.profile_url else None
    journal = AlertJournal(args.journal or cfg.paths.alerts)
    n = monitor(websocket_stream(assets), cfg.trigger, journal, profiles)
    print(f"{n} alerts written to {journal.path}")
    return 0


def cmd_replay(args) -> int:
    cfg = _config(args)
    failed = 0
    for k in range(args.runs):
        result = run_pipeline(_context(args, cfg, args.window, k))
        stage = result.failed_stage
        print(f"run_{k}: {'ok' if result.ok else 'failed at ' + str(stage)}  ({result.run_dir})")
        failed += not result.ok
    return 1 if failed else 0


def _track_override(cfg: RunConfig, track: str | None, clustering_track: str | None) -> RunConfig:
    kw = {}
    if track:
        if "." in track:
            clustering_track, track = track.split(".", 1)
        kw["analysis_track"] = track
    if clustering_track:
        kw["clustering_track"] = clustering_track
    return replace(cfg, **kw) if kw else cfg


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    gt_dir = Path(args.gt) if args.gt else cfg.paths.gt
    # validate before any stage runs
    if gt_dir is None or not gt_dir.is_dir():
        raise ConfigError(f"ground-truth directory not found: {gt_dir}")
    gt = GroundTruth.from_dir(gt_dir)
    cfg = _track_override(cfg, args.track, args.clustering_track)
    if cfg.use_gt_clusters and gt.clustering is None:
        raise ConfigError("use_gt_clusters needs clustering.csv in the ground-truth directory")
    windows = tuple(w for w in args.windows.split(",") if w)
    plan = ExperimentPlan(cfg.track_id, windows, args.runs)
    try:
        embed = _embedder(cfg)
    except EmbeddingUnavailable as exc:
        log.warning("consistency disabled: %s", exc)
        embed = None

    def runner(window: str, k: int):
        result = run_pipeline(_context(args, cfg, window, k))
        if not result.ok:
            raise RunFailed(f"stage {result.failed_stage} failed")
        return load_run_output(result.run_dir)

    res = run_experiment(plan, runner, args.out, gt, embed, meta={"config": cfg.describe()})
    all_row = res.summary_rows[-1]
    print(f"{len(res.metrics)} runs scored, {len(res.failures)} failed; summary in {Path(args.out) / 'summary.csv'}")
    for key in ("ari", "nmi", "acc_overall", "consistency", "tokens", "cost_usd"):
        if all_row.get(key) is not None:
            print(f"  {key:<12} {all_row[key]:.4f}")
    return 1 if res.failures else 0


def cmd_diff(args) -> int:
    gt = None
    if args.gt:
        a_manifest = json.loads((Path(args.run_a) / "manifest.json").read_text())
        gt = load_label_gt(Path(args.gt) / "labels.csv", a_manifest["window"])
    report = diff_runs(args.run_a, args.run_b, gt, args.file_a, args.file_b)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _common(defaults: bool) -> argparse.ArgumentParser:
    # subcommand copies suppress their defaults so flags given before the
    # subcommand are not reset
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d("config.toml"), help="run configuration (TOML)")
    common.add_argument("--as-of", default=d(None), help="upper bound on all external data requests (ISO-8601 UTC)")
    common.add_argument("--trace", default=d(None), help="scripted trace file; may contain {track}, {window} and {run}")
    common.add_argument("--seed-note", default=d(None), help="free-text note stored in the run manifest")
    common.add_argument("--out-root", default=d(None), help="root directory for run artifacts (overrides paths.out)")
    common.add_argument("--unsafe-bounds", action="store_true", default=d(False),
                        help="allow non-default reflection bounds")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    top, common = _common(True), _common(False)

    p = argparse.ArgumentParser(prog="polygnosis", description=__doc__, parents=[top])
    sub = p.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        if stage == "ingest":
            continue
        s = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage from persisted artifacts")
        s.add_argument("--window", required=True, help="YYYY-MM-DD or <iso>..<iso>")
        s.add_argument("--run", type=int, default=0)
        s.set_defaults(func=cmd_stage)

    s = sub.add_parser("ingest", parents=[common], help="replay the alert journal into a run, or monitor live")
    s.add_argument("--window", help="YYYY-MM-DD or <iso>..<iso>")
    s.add_argument("--run", type=int, default=0)
    s.add_argument("--live", action="store_true", help="subscribe to the market websocket instead")
    s.add_argument("--fixture", help="alert journal to replay (overrides paths.alerts)")
    s.add_argument("--assets", help="JSON map asset_id -> {market_id, market_title, outcome_side}")
    s.add_argument("--journal", help="alert journal to append to (live mode)")
    s.add_argument("--profile-url", help="trader profile endpoint, formatted with {trader}")
    s.set_defaults(func=lambda a: cmd_live_ingest(a) if a.live else cmd_stage(a))

    s = sub.add_parser("replay", parents=[common], help="run every stage for a window")
    s.add_argument("--window", required=True)
    s.add_argument("--runs", type=int, default=1)
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("evaluate", parents=[common], help="multi-run experiment with metrics")
    s.add_argument("--track", help=f"analysis track {ANALYSIS_TRACKS} or <clustering>.<analysis>")
    s.add_argument("--clustering-track", choices=CLUSTERING_TRACKS)
    s.add_argument("--windows", required=True, help="comma-separated window ids")
    s.add_argument("--runs", type=int, default=1, help="runs per window")
    s.add_argument("--gt", help="ground-truth directory (labels.csv, clustering.csv)")
    s.add_argument("--out", required=True, help="directory for runs.jsonl and summary.csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("diff", parents=[common], help="field-level diff of two runs")
    s.add_argument("run_a")
    s.add_argument("run_b")
    s.add_argument("--gt", help="ground-truth directory, for fix/break counts")
    s.add_argument("--file-a", default="validated.jsonl")
    s.add_argument("--file-b", default="validated.jsonl")
    s.set_defaults(func=cmd_diff)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "ingest" and not args.live and not args.window:
        print("ingest needs --window (or --live)", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
