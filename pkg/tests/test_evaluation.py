import csv
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import alert, cluster, cluster_set, record
from oracles import ari_by_pairs, entropy_scores
from polygnosis.evaluation import (
    EmptyJoin,
    EmbeddingUnavailable,
    ExperimentPlan,
    GroundTruth,
    HashEmbedding,
    IndexSetMismatch,
    MappingEmbedding,
    RunFailed,
    RunOutput,
    classification_accuracy,
    clustering_scores,
    comment_text,
    consistency_score,
    consolidate,
    overall_accuracy,
    run_experiment,
)
from polygnosis.gateway import UsageLedger, UsageLedgerEntry
from polygnosis.model import CATEGORICAL_FIELDS, VOCABULARIES, GroundTruthLabel

# -- clustering: independent reference implementations ------------------------


partitions = st.integers(1, 12).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 4), min_size=n, max_size=n),
                        st.lists(st.integers(0, 4), min_size=n, max_size=n)))


@settings(max_examples=1000)
@given(partitions)
def test_scores_match_brute_force(pair):
    truth, pred = pair
    got = clustering_scores(pred, truth)
    assert got["ari"] == pytest.approx(ari_by_pairs(truth, pred), abs=1e-9)
    for k, v in entropy_scores(truth, pred).items():
        assert got[k] == pytest.approx(v, abs=1e-9), k


@given(partitions, st.permutations(range(5)))
def test_relabeling_and_duality(pair, perm):
    truth, pred = pair
    base = clustering_scores(pred, truth)
    relabeled = clustering_scores([perm[x] for x in pred], [f"t{x}" for x in truth])
    assert relabeled["ari"] == pytest.approx(base["ari"], abs=1e-12)
    swapped = clustering_scores(truth, pred)
    assert swapped["homogeneity"] == pytest.approx(base["completeness"], abs=1e-12)
    assert swapped["completeness"] == pytest.approx(base["homogeneity"], abs=1e-12)


def test_sklearn_agrees():
    metrics = pytest.importorskip("sklearn.metrics")
    truth, pred = [0, 0, 1, 1, 2, 2, 2, 3], [1, 1, 0, 2, 2, 2, 3, 3]
    got = clustering_scores(pred, truth)
    assert got["ari"] == pytest.approx(metrics.adjusted_rand_score(truth, pred))
    assert got["nmi"] == pytest.approx(metrics.normalized_mutual_info_score(truth, pred, average_method="arithmetic"))
    assert got["homogeneity"] == pytest.approx(metrics.homogeneity_score(truth, pred))
    assert got["completeness"] == pytest.approx(metrics.completeness_score(truth, pred))


def test_clustering_examples():
    perm = clustering_scores([1, 1, 0, 0], [0, 0, 1, 1])
    assert perm["ari"] == 1.0 and perm["nmi"] == pytest.approx(1.0)
    assert clustering_scores([0, 0, 1, 2], [0, 0, 1, 1])["ari"] == pytest.approx(4 / 7, abs=1e-12)
    deg = clustering_scores([0, 0, 0, 0], [0, 1, 2, 3])
    assert (deg["homogeneity"], deg["completeness"]) == (0.0, 1.0)


def test_cluster_set_input_and_mismatch():
    cs = cluster_set(cluster("a", [0, 1]), cluster("b", [2, 3]))
    assert clustering_scores(cs, ["x", "x", "y", "y"])["ari"] == 1.0
    with pytest.raises(IndexSetMismatch):
        clustering_scores(cs, ["x"] * 5)
    with pytest.raises(IndexSetMismatch):
        clustering_scores([0, 1], [0, 1, 2])
    with pytest.raises(IndexSetMismatch):
        clustering_scores({"a": 0}, {"b": 0})


# -- classification -----------------------------------------------------------


def gt(cid, poly="intensifying", whale="large_capital", media="intensifying", align="consensus", ann="a1", window=""):
    return GroundTruthLabel(cid, poly, whale, media, align, ann, window)


TABLE3 = {
    "global": ((0.669, 0.366, 0.417, 0.335), 0.447),
    "dnc": ((0.795, 0.826, 0.869, 0.708), 0.799),
    "dnc_cot": ((0.786, 0.823, 0.860, 0.710), 0.795),
    "dnc_cot_reflect": ((0.710, 0.682, 0.802, 0.606), 0.700),
}


@pytest.mark.parametrize("column", sorted(TABLE3))
def test_overall_is_mean_of_fields_published_columns(column):
    fields, overall = TABLE3[column]
    # published values carry three decimals; the mean lands within rounding of them
    assert overall_accuracy(fields) == pytest.approx(overall, abs=5e-4 + 1e-12)
    assert overall_accuracy(dict(zip(CATEGORICAL_FIELDS, fields))) == overall_accuracy(fields)


def test_perfect_predictions():
    recs = [record("a"), record("b", poly="easing")]
    rep = classification_accuracy(recs, [gt("a"), gt("b", poly="easing")])
    assert rep.overall == 1.0 and set(rep.per_field.values()) == {1.0}


def test_partial_accuracy_and_unmatched():
    recs = [record("a"), record("b", media="mixed"), record("extra")]
    rep = classification_accuracy(recs, [gt("a"), gt("b"), gt("missing")])
    assert rep.n_joined == 2
    assert rep.per_field["media_direction"] == 0.5 and rep.per_field["poly_direction"] == 1.0
    assert rep.overall == pytest.approx((1 + 1 + 0.5 + 1) / 4)
    assert (rep.unmatched_records, rep.unmatched_truth) == (["extra"], ["missing"])


def test_incomplete_record_is_a_miss_on_every_field():
    rep = classification_accuracy([record("a", incomplete=True)], [gt("a")])
    assert rep.overall == 0.0


def test_empty_join():
    with pytest.raises(EmptyJoin):
        classification_accuracy([record("a")], [gt("b")])


def test_consolidate_majority_and_ties():
    out = consolidate([gt("a", poly="easing", ann="1"), gt("a", poly="mixed", ann="2"), gt("a", poly="mixed", ann="3"),
                       gt("b", media="easing", ann="1"), gt("b", media="mixed", ann="2")])
    assert out["a"].poly_direction == "mixed"
    assert out["b"].media_direction == "easing"  # tie goes to the first annotator


labels = st.fixed_dictionaries({f: st.sampled_from(VOCABULARIES[f]) for f in CATEGORICAL_FIELDS})


@given(st.lists(st.tuples(labels, labels, st.booleans()), min_size=1, max_size=15))
def test_overall_equals_field_mean(rows):
    recs = [record(f"c{i}", p["poly_direction"], p["whale_quality"], p["media_direction"], p["poly_media_alignment"],
                   incomplete=inc) for i, (p, _, inc) in enumerate(rows)]
    truth = [GroundTruthLabel(f"c{i}", **t) for i, (_, t, _) in enumerate(rows)]
    rep = classification_accuracy(recs, truth)
    assert rep.overall == pytest.approx(sum(rep.per_field.values()) / 4, abs=1e-15)
    for f in CATEGORICAL_FIELDS:
        hits = sum(1 for r, t in zip(recs, truth) if not r.incomplete and getattr(r, f) == getattr(t, f))
        assert rep.per_field[f] == hits / len(rows)


# -- consistency --------------------------------------------------------------


def rc(cid, text):
    return record(cid, poly_comment=text, media_comment="", alignment_comment="")


def test_identical_runs_score_one():
    runs = [[rc("a", "Iran strike odds up"), rc("b", "ETH rallies")]] * 3
    assert consistency_score(runs, HashEmbedding()) == pytest.approx(1.0, abs=1e-6)


def test_orthogonal_vectors_score_zero():
    r1, r2 = [rc("a", "x")], [rc("a", "y")]
    emb = MappingEmbedding({comment_text(r1[0]): [1, 0], comment_text(r2[0]): [0, 1]})
    assert consistency_score([r1, r2], emb) == 0.0


def test_hand_computed_two_runs():
    r1 = [rc("a", "a1"), rc("b", "b1"), rc("only1", "z")]
    r2 = [rc("a", "a2"), rc("b", "b2")]
    vec = {"a1": [1, 0], "a2": [1, 1], "b1": [3, 4], "b2": [4, 3], "z": [0, 1]}
    emb = MappingEmbedding({comment_text(rc("x", k)): v for k, v in vec.items()})
    # cos(a) = 1/sqrt(2); cos(b) = 24/25
    assert consistency_score([r1, r2], emb) == pytest.approx((1 / math.sqrt(2) + 24 / 25) / 2, abs=1e-12)
    assert consistency_score([r2, r1], emb) == consistency_score([r1, r2], emb)


@given(st.lists(st.lists(st.sampled_from(["up", "down", "flat", "Iran war", "ETH pump"]), min_size=2, max_size=2),
                min_size=2, max_size=4))
def test_consistency_symmetric(texts):
    runs = [[rc("a", t[0]), rc("b", t[1])] for t in texts]
    emb = HashEmbedding(64)
    assert consistency_score(runs, emb) == pytest.approx(consistency_score(list(reversed(runs)), emb), abs=1e-12)


def test_consistency_errors():
    with pytest.raises(ValueError):
        consistency_score([[rc("a", "x")]], HashEmbedding())
    with pytest.raises(EmptyJoin):
        consistency_score([[rc("a", "x")], [rc("b", "x")]], HashEmbedding())
    with pytest.raises(EmbeddingUnavailable):
        consistency_score([[rc("a", "x")], [rc("a", "y")]], MappingEmbedding({}))


# -- experiments --------------------------------------------------------------

ALERTS = [alert(i, minutes=i) for i in range(4)]


def write_gt(d, windows):
    d.mkdir()
    with (d / "labels.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "cluster_id", *CATEGORICAL_FIELDS, "annotator_id"])
        for win in windows:
            w.writerow([win, "iran", "intensifying", "large_capital", "intensifying", "consensus", "t1"])
            w.writerow([win, "eth", "easing", "top_trader", "mixed", "market_leads_media", "t1"])
    with (d / "clustering.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alert_id", "cluster_label"])
        for a in ALERTS:
            w.writerow([a.alert_id, "iran" if int(a.alert_id[1:]) < 2 else "eth"])
    return GroundTruth.from_dir(d)


def runner(window, k):
    if window == "2026-03-27" and k == 1:
        raise RunFailed("backend down")
    cs = cluster_set(cluster("iran", [0, 1]), cluster("eth", [2] if k % 2 else [2, 3]),
                     *([cluster("eth_extra", [3])] if k % 2 else []))
    recs = [record("iran", poly_comment=f"strike talk {k % 3}"),
            record("eth", "easing", "top_trader", "mixed" if k % 2 else "easing", "market_leads_media")]
    led = UsageLedger([UsageLedgerEntry("analysis", 1000 + k, 100, 10.0 * (k + 1), 0.001)])
    return RunOutput(ALERTS, cs, recs, led)


def test_five_by_ten_gives_fifty_rows(tmp_path):
    windows = tuple(f"2026-03-{d}" for d in range(20, 25))
    res = run_experiment(ExperimentPlan("direct.dnc", windows, 10), runner, tmp_path / "out",
                         write_gt(tmp_path / "gt", windows), HashEmbedding())
    assert len(res.metrics) == 50 and not res.failures
    lines = (tmp_path / "out" / "runs.jsonl").read_text().splitlines()
    assert len(lines) == 50
    allrow = res.summary_rows[-1]
    assert allrow["window"] == "all" and allrow["n_runs"] == 50
    # perfect ARI on even runs, lower on odd ones
    assert 0 < allrow["ari"] < 1 and allrow["ari_std"] > 0
    assert allrow["acc_poly_direction"] == 1.0
    assert allrow["acc_media_direction"] == pytest.approx(0.75)
    assert allrow["tokens"] == pytest.approx(1100 + 4.5)


def test_single_run_has_no_std(tmp_path):
    res = run_experiment(ExperimentPlan("direct.dnc", ("2026-03-25",), 1), runner, tmp_path)
    row = res.summary_rows[0]
    assert row["tokens"] == 1100 and row["tokens_std"] is None
    with (tmp_path / "summary.csv").open() as fh:
        first = next(csv.DictReader(fh))
    assert first["tokens_std"] == "" and first["consistency"] == ""


def test_failed_runs_recorded_and_excluded(tmp_path):
    res = run_experiment(ExperimentPlan("t", ("2026-03-27",), 3), runner, tmp_path)
    assert [m.run for m in res.metrics] == [0, 2]
    assert res.summary_rows[0]["n_failed"] == 1 and res.summary_rows[0]["n_runs"] == 2
    runs = [json.loads(l) for l in (tmp_path / "runs.jsonl").read_text().splitlines()]
    assert [r["status"] for r in runs] == ["ok", "failed", "ok"]
    assert json.loads((tmp_path / "summary_meta.json").read_text())["n_failed"] == 1


def test_experiment_is_deterministic(tmp_path):
    windows = ("2026-03-25", "2026-03-26")
    gtd = write_gt(tmp_path / "gt", windows)
    for name in ("a", "b"):
        run_experiment(ExperimentPlan("t", windows, 3), runner, tmp_path / name, gtd, HashEmbedding())
    for f in ("runs.jsonl", "summary.csv", "summary_meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan("t", (), 1)
    with pytest.raises(ValueError):
        ExperimentPlan("t", ("w",), 0)


def test_ground_truth_dir_required(tmp_path):
    with pytest.raises(FileNotFoundError):
        GroundTruth.from_dir(tmp_path / "nope")
