"""Clustering and classification metrics, semantic consistency, ground-truth
loaders and the multi-run experiment orchestrator."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import re
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

from .gateway import UsageLedger
from .model import CATEGORICAL_FIELDS, Alert, ClusterSet, GroundTruthLabel, InsightRecord, canonical_json

log = logging.getLogger(__name__)

NMI_NORMALIZER = "arithmetic"


class IndexSetMismatch(ValueError):
    pass


class EmptyJoin(ValueError):
    pass


class EmbeddingUnavailable(RuntimeError):
    pass


class RunFailed(RuntimeError):
    pass


# -- clustering ---------------------------------------------------------------


def _as_labels(pred, truth) -> tuple[list, list]:
    if isinstance(pred, ClusterSet):
        n = len(truth)
        if not pred.covers(n):
            raise IndexSetMismatch("predicted clusters do not cover the truth index set")
        pred = pred.labels(n)
    if isinstance(pred, Mapping) or isinstance(truth, Mapping):
        if not (isinstance(pred, Mapping) and isinstance(truth, Mapping)) or set(pred) != set(truth):
            raise IndexSetMismatch("predicted and truth keys differ")
        keys = sorted(truth)
        return [pred[k] for k in keys], [truth[k] for k in keys]
    if len(pred) != len(truth):
        raise IndexSetMismatch(f"{len(pred)} predicted vs {len(truth)} truth labels")
    return list(pred), list(truth)


def _entropy(counts) -> float:
    n = sum(counts)
    return -math.fsum(c / n * math.log(c / n) for c in counts if c)


def clustering_scores(predicted, truth) -> dict[str, float]:
    """ARI, NMI (arithmetic-mean normalised), homogeneity and completeness.

    ``predicted`` is a ClusterSet or a label sequence; ``truth`` a label
    sequence over the same indices (or both are mappings with equal keys).
    """
    pred, true = _as_labels(predicted, truth)
    n = len(true)
    if n == 0:
        raise IndexSetMismatch("empty labelling")
    cells = Counter(zip(true, pred))
    a = Counter(true)  # classes
    b = Counter(pred)  # clusters

    sum_ij = sum(math.comb(v, 2) for v in cells.values())
    sum_a = sum(math.comb(v, 2) for v in a.values())
    sum_b = sum(math.comb(v, 2) for v in b.values())
    total = math.comb(n, 2)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2
    # the denominator vanishes only for identical partitions
    ari = 1.0 if max_index == expected else (sum_ij - expected) / (max_index - expected)

    h_c, h_k = _entropy(a.values()), _entropy(b.values())
    mi = math.fsum(v / n * math.log(n * v / (a[i] * b[j])) for (i, j), v in cells.items())
    mi = max(mi, 0.0)
    nmi = 1.0 if h_c + h_k == 0 else mi / ((h_c + h_k) / 2)
    h_c_given_k = -math.fsum(v / n * math.log(v / b[j]) for (_, j), v in cells.items())
    h_k_given_c = -math.fsum(v / n * math.log(v / a[i]) for (i, _), v in cells.items())
    homogeneity = 1.0 if h_c == 0 else 1 - h_c_given_k / h_c
    completeness = 1.0 if h_k == 0 else 1 - h_k_given_c / h_k
    return {
        "ari": ari,
        "nmi": min(nmi, 1.0),
        "homogeneity": min(max(homogeneity, 0.0), 1.0),
        "completeness": min(max(completeness, 0.0), 1.0),
    }


# -- classification -----------------------------------------------------------


def overall_accuracy(per_field: Mapping[str, float] | Sequence[float]) -> float:
    vals = list(per_field.values()) if isinstance(per_field, Mapping) else list(per_field)
    return math.fsum(vals) / len(vals)


@dataclass
class AccuracyReport:
    per_field: dict[str, float]
    overall: float
    n_joined: int
    unmatched_records: list[str] = field(default_factory=list)
    unmatched_truth: list[str] = field(default_factory=list)


def classification_accuracy(
    records: Sequence[InsightRecord], gt: Sequence[GroundTruthLabel] | Mapping[str, GroundTruthLabel]
) -> AccuracyReport:
    """Exact-match accuracy per categorical field over clusters present in both.

    Incomplete (sentinel) records are scored as misses on every field.
    """
    truth = gt if isinstance(gt, Mapping) else consolidate(gt)
    recs = {r.cluster_id: r for r in records}
    joined = sorted(set(recs) & set(truth))
    if not joined:
        raise EmptyJoin("no cluster_id shared between records and ground truth")
    per_field = {}
    for f in CATEGORICAL_FIELDS:
        hits = sum(
            1 for cid in joined if not recs[cid].incomplete and getattr(recs[cid], f) == getattr(truth[cid], f)
        )
        per_field[f] = hits / len(joined)
    return AccuracyReport(
        per_field,
        overall_accuracy(per_field),
        len(joined),
        sorted(set(recs) - set(truth)),
        sorted(set(truth) - set(recs)),
    )


def consolidate(labels: Sequence[GroundTruthLabel]) -> dict[str, GroundTruthLabel]:
    """One label per cluster: per-field majority across annotators, ties to the first listed."""
    by_id: dict[str, list[GroundTruthLabel]] = {}
    for g in labels:
        by_id.setdefault(g.cluster_id, []).append(g)
    out = {}
    for cid, gs in by_id.items():
        if len(gs) == 1:
            out[cid] = gs[0]
            continue
        vote = {}
        for f in CATEGORICAL_FIELDS:
            values = [getattr(g, f) for g in gs]
            counts = Counter(values)
            best = max(counts.values())
            vote[f] = next(v for v in values if counts[v] == best)
        out[cid] = GroundTruthLabel(cid, annotator_id="majority", day_window=gs[0].day_window, **vote)
    return out


# -- consistency --------------------------------------------------------------


class EmbeddingProvider(Protocol):
    name: str

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


_WORD = re.compile(r"[a-z0-9]+")


class HashEmbedding:
    """Deterministic hashed bag-of-words vectors; no model download needed."""

    name = "hash-bow"

    def __init__(self, dim: int = 512):
        self.dim = dim

    def _vector(self, text: str) -> list[float]:
        v = [0.0] * self.dim
        for tok in _WORD.findall(text.lower()):
            h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "big")
            v[h % self.dim] += 1.0 if (h >> 32) & 1 else -1.0
        return v

    def embed(self, texts):
        return [self._vector(t) for t in texts]


class MappingEmbedding:
    """Fixed vectors per text; for tests with hand-computed similarities."""

    name = "mapping"

    def __init__(self, vectors: Mapping[str, Sequence[float]]):
        self.vectors = vectors

    def embed(self, texts):
        try:
            return [list(self.vectors[t]) for t in texts]
        except KeyError as exc:
            raise EmbeddingUnavailable(f"no vector for {exc}") from exc


class HttpEmbedding:
    """OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, base_url: str, model: str, api_key_env: str = "LLM_API_KEY", client=None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.client = client
        self.name = f"http:{model}"

    def embed(self, texts):
        import httpx

        client = self.client or httpx.Client(timeout=60)
        headers = {"Authorization": f"Bearer {os.environ.get(self.api_key_env, '')}"}
        try:
            resp = client.post(
                f"{self.base_url}/embeddings", json={"model": self.model, "input": list(texts)}, headers=headers
            )
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise EmbeddingUnavailable(str(exc)) from exc
        return [d["embedding"] for d in data]


class SentenceTransformerEmbedding:
    def __init__(self, model_name: str = "all-MiniLM-L6-v2"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EmbeddingUnavailable("sentence-transformers is not installed") from exc
        self._model = SentenceTransformer(model_name)
        self.name = f"st:{model_name}"

    def embed(self, texts):
        return [list(map(float, v)) for v in self._model.encode(list(texts))]


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    nu = math.sqrt(math.fsum(x * x for x in u))
    nv = math.sqrt(math.fsum(x * x for x in v))
    if nu == 0 or nv == 0:
        return 0.0
    return math.fsum(x * y for x, y in zip(u, v)) / (nu * nv)


def comment_text(r: InsightRecord) -> str:
    return f"{r.poly_comment} {r.media_comment} {r.alignment_comment}"


def consistency_score(run_records: Sequence[Sequence[InsightRecord]], embed: EmbeddingProvider) -> float:
    """Mean pairwise cosine between runs, one term per (run pair, shared cluster)."""
    if len(run_records) < 2:
        raise ValueError("consistency needs at least two runs")
    runs = [{r.cluster_id: comment_text(r) for r in recs} for recs in run_records]
    texts = sorted({t for run in runs for t in run.values()})
    vectors = dict(zip(texts, embed.embed(texts)))
    sims = [
        cosine(vectors[a[cid]], vectors[b[cid]])
        for a, b in combinations(runs, 2)
        for cid in sorted(set(a) & set(b))
    ]
    if not sims:
        raise EmptyJoin("no cluster shared between any two runs")
    return math.fsum(sims) / len(sims)


# -- ground truth files -------------------------------------------------------


def load_label_gt(path: str | Path, window: Optional[str] = None) -> dict[str, GroundTruthLabel]:
    """``labels.csv``: window, cluster_id, the four fields, annotator_id."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [GroundTruthLabel.from_dict(r) for r in csv.DictReader(fh)]
    if window is not None:
        rows = [g for g in rows if g.day_window == window]
    return consolidate(rows)


def load_cluster_gt(path: str | Path) -> dict[str, tuple[str, Optional[str]]]:
    """``clustering.csv``: alert_id, cluster_label and an optional direction column."""
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out[r["alert_id"].strip()] = (r["cluster_label"].strip(), (r.get("direction") or "").strip() or None)
    return out


@dataclass
class GroundTruth:
    labels: Optional[Path] = None
    clustering: Optional[Path] = None

    @classmethod
    def from_dir(cls, d: str | Path) -> "GroundTruth":
        d = Path(d)
        if not d.is_dir():
            raise FileNotFoundError(f"ground-truth directory not found: {d}")
        lab, clu = d / "labels.csv", d / "clustering.csv"
        return cls(lab if lab.exists() else None, clu if clu.exists() else None)


# -- experiments --------------------------------------------------------------


@dataclass
class RunOutput:
    """What one pipeline run hands to the evaluator."""

    alerts: list[Alert]
    clusters: ClusterSet
    records: list[InsightRecord]
    ledger: UsageLedger
    reflection_iterations: Optional[int] = None


@dataclass
class RunMetrics:
    track: str
    window: str
    run: int
    clustering: Optional[dict] = None  # ari, nmi, homogeneity, completeness, n_clusters
    accuracy: Optional[dict] = None  # per-field plus "overall"
    wall_ms: float = 0.0
    tokens: int = 0
    cost_usd: float = 0.0
    reflection_iterations: Optional[int] = None

    def __post_init__(self):
        c = self.clustering
        if c:
            assert -1 - 1e-12 <= c["ari"] <= 1 + 1e-12
            assert all(0 <= c[k] <= 1 for k in ("nmi", "homogeneity", "completeness"))
        if self.accuracy:
            fields = [self.accuracy[f] for f in CATEGORICAL_FIELDS]
            assert abs(self.accuracy["overall"] - overall_accuracy(fields)) < 1e-12

    def to_dict(self) -> dict:
        return asdict(self)


def score_run(
    out: RunOutput, track: str, window: str, run: int, gt_labels=None, gt_clusters=None
) -> RunMetrics:
    m = RunMetrics(
        track, window, run,
        wall_ms=out.ledger.total_wall_ms(),
        tokens=out.ledger.total_tokens(),
        cost_usd=out.ledger.total_cost(),
        reflection_iterations=out.reflection_iterations,
    )
    if gt_clusters is not None:
        try:
            truth = [gt_clusters[a.alert_id][0] for a in out.alerts]
            scores = clustering_scores(out.clusters, truth)
            m.clustering = {**scores, "n_clusters": len(out.clusters.clusters)}
        except KeyError as exc:
            log.warning("%s run %d: alert %s missing from clustering GT", window, run, exc)
        except IndexSetMismatch as exc:
            log.warning("%s run %d: %s", window, run, exc)
    if gt_labels:
        try:
            rep = classification_accuracy(out.records, gt_labels)
            m.accuracy = {**rep.per_field, "overall": rep.overall}
            if rep.unmatched_records or rep.unmatched_truth:
                log.info(
                    "%s run %d: unmatched records %s, unmatched truth %s",
                    window, run, rep.unmatched_records, rep.unmatched_truth,
                )
        except EmptyJoin as exc:
            log.warning("%s run %d: %s", window, run, exc)
    m.__post_init__()
    return m


@dataclass(frozen=True)
class ExperimentPlan:
    track: str
    windows: tuple[str, ...]
    runs_per_window: int

    def __post_init__(self):
        if self.runs_per_window < 1 or not self.windows:
            raise ValueError("plan needs at least one window and one run")


METRIC_COLUMNS = (
    "ari", "nmi", "homogeneity", "completeness", "n_clusters",
    "acc_poly_direction", "acc_whale_quality", "acc_media_direction", "acc_poly_media_alignment",
    "acc_overall", "consistency", "wall_ms", "tokens", "cost_usd", "reflection_iterations",
)


def _flat(m: RunMetrics) -> dict[str, Optional[float]]:
    row: dict[str, Optional[float]] = {k: None for k in METRIC_COLUMNS}
    if m.clustering:
        row.update({k: m.clustering[k] for k in ("ari", "nmi", "homogeneity", "completeness", "n_clusters")})
    if m.accuracy:
        row.update({f"acc_{f}": m.accuracy[f] for f in CATEGORICAL_FIELDS})
        row["acc_overall"] = m.accuracy["overall"]
    row.update(wall_ms=m.wall_ms, tokens=m.tokens, cost_usd=m.cost_usd, reflection_iterations=m.reflection_iterations)
    return row


def _num(v) -> str:
    return "" if v is None else format(v, ".10g")


def _mean_std(values: list) -> tuple[Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = math.fsum(vals) / len(vals)
    return mean, (statistics.stdev(vals) if len(vals) >= 2 else None)


@dataclass
class ExperimentResult:
    metrics: list[RunMetrics]
    failures: list[dict]
    summary_rows: list[dict]


def run_experiment(
    plan: ExperimentPlan,
    runner: Callable[[str, int], RunOutput],
    out_dir: str | Path,
    gt: Optional[GroundTruth] = None,
    embed: Optional[EmbeddingProvider] = None,
    meta: Optional[dict] = None,
) -> ExperimentResult:
    """Execute every (window, run), score it, and write runs.jsonl / summary.csv.

    A run raising RunFailed (or any error from the runner) is recorded in
    runs.jsonl and left out of the aggregates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt_clusters = load_cluster_gt(gt.clustering) if gt and gt.clustering else None

    metrics: list[RunMetrics] = []
    failures: list[dict] = []
    consistency: dict[str, Optional[float]] = {}
    lines = []
    for window in plan.windows:
        gt_labels = load_label_gt(gt.labels, window) if gt and gt.labels else None
        window_records = []
        for k in range(plan.runs_per_window):
            try:
                out = runner(window, k)
            except Exception as exc:  # recorded, excluded from aggregates
                log.error("%s run %d failed: %s", window, k, exc)
                fail = {"track": plan.track, "window": window, "run": k, "status": "failed", "error": str(exc)}
                failures.append(fail)
                lines.append(canonical_json(fail))
                continue
            m = score_run(out, plan.track, window, k, gt_labels, gt_clusters)
            metrics.append(m)
            window_records.append(out.records)
            lines.append(canonical_json({**m.to_dict(), "status": "ok"}))
        consistency[window] = None
        if embed is not None and len(window_records) >= 2:
            try:
                consistency[window] = consistency_score(window_records, embed)
            except (EmptyJoin, EmbeddingUnavailable) as exc:
                log.warning("%s: consistency unavailable (%s)", window, exc)

    (out_dir / "runs.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")

    rows = []
    flat = [(m.window, _flat(m)) for m in metrics]
    groups = [(w, [r for ww, r in flat if ww == w]) for w in plan.windows] + [("all", [r for _, r in flat])]
    for w, rs in groups:
        row = {
            "track": plan.track,
            "window": w,
            "n_runs": len(rs),
            "n_failed": sum(1 for f in failures if w in ("all", f["window"])),
        }
        for col in METRIC_COLUMNS:
            if col == "consistency":
                vals = [consistency[w]] if w != "all" else [consistency[x] for x in plan.windows]
                mean, std = _mean_std(vals)
                if w != "all":
                    std = None
            else:
                mean, std = _mean_std([r[col] for r in rs])
            row[col], row[f"{col}_std"] = mean, std
        rows.append(row)

    header = ["track", "window", "n_runs", "n_failed"] + [c for col in METRIC_COLUMNS for c in (col, f"{col}_std")]
    with (out_dir / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[h] if h in ("track", "window", "n_runs", "n_failed") else _num(row[h]) for h in header])

    summary_meta = {
        "nmi_normalizer": NMI_NORMALIZER,
        "entropy_log": "natural",
        "consistency_weighting": "each shared (run pair, cluster) weighted equally; 'all' row averages windows",
        "embedding_provider": getattr(embed, "name", None),
        "plan": {"track": plan.track, "windows": list(plan.windows), "runs_per_window": plan.runs_per_window},
        "n_failed": len(failures),
        **(meta or {}),
    }
    (out_dir / "summary_meta.json").write_text(json.dumps(summary_meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ExperimentResult(metrics, failures, rows)
