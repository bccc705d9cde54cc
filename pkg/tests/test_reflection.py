from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import T0, CapturingBackend, alert, cluster, cluster_set
from polygnosis.gateway import Gateway
from polygnosis.model import ClusterSet, TemporalViolation
from polygnosis.prompts import REFLECTION_SEARCH_ADDON
from polygnosis.reflection import (
    BoundedSearch,
    InvalidAction,
    MalformedActions,
    ReflectionAction,
    ReflectionOutcome,
    SearchResult,
    SearchUnavailable,
    UnknownClusterId,
    apply_action,
    parse_action,
    reflect_loop,
)

KW = {"actor_pairs": [["UNITED STATES", "IRAN"]], "gkg_keywords": ["Iran", "Pentagon", "IRGC"]}
ALERTS = [alert(i, f"Market {i}", "yes" if i % 2 else "no") for i in range(8)]


def auditor(replies, split_reply=None):
    """Backend whose reflection replies come from a list (last one repeats)."""

    def respond(template_id, ordinal, attempt, system, user):
        if template_id == "keyword_system":
            return KW
        if template_id == "clustering_system":
            return split_reply
        return replies[min(ordinal, len(replies) - 1)]

    return CapturingBackend(respond)


def base_set():
    return cluster_set(
        cluster("us_iran_military_escalation", [0, 1]),
        cluster("us_iran_conflict", [2, (3, "easing")]),
        cluster("eth_price", [4, 5, 6, 7]),
    )


def test_merge_unions_members_under_first_id():
    cs = apply_action(base_set(), ReflectionAction("merge", ("us_iran_military_escalation", "us_iran_conflict")),
                      ALERTS, None)
    assert cs.ids == ["us_iran_military_escalation", "eth_price"]
    assert cs.get("us_iran_military_escalation").indices == [0, 1, 2, 3]
    assert cs.covers(8)


def test_merge_new_theme():
    cs = apply_action(base_set(), parse_action(
        {"type": "merge", "clusters": ["us_iran_conflict", "us_iran_military_escalation"],
         "new_theme": "US-Iran war risk", "reason": "both focus on US military involvement"}), ALERTS, None)
    c = cs.get("us_iran_conflict")
    assert c.theme == "US-Iran war risk" and len(c.members) == 4


def test_rename_updates_id():
    cs = apply_action(base_set(), parse_action({"type": "rename", "cluster": "eth_price", "new_id": "btc_price_action"}),
                      ALERTS, None)
    assert "btc_price_action" in cs.ids and "eth_price" not in cs.ids
    assert cs.get("btc_price_action").indices == [4, 5, 6, 7]


def test_rename_collision_rejected():
    with pytest.raises(InvalidAction):
        apply_action(base_set(), ReflectionAction("rename", cluster="eth_price", new_id="us_iran_conflict"),
                     ALERTS, None)


def test_split_by_scoped_recluster():
    split = [{"cluster_id": "eth_up", "alerts": [{"index": 0}, {"index": 1}, {"index": 2}]},
             {"cluster_id": "eth_down", "alerts": [{"index": 3, "direction": "easing"}]}]
    five = cluster_set(cluster("mixed_bag", [0, 1, 2, 3, 4]), cluster("iran", [5]))
    be = auditor([], split_reply=split + [{"cluster_id": "eth_down", "alerts": [{"index": 4}]}])
    cs = apply_action(five, ReflectionAction("split", cluster="mixed_bag"), ALERTS, Gateway(be))
    assert cs.ids == ["eth_up", "eth_down", "iran"]
    assert sum(len(c.members) for c in cs.clusters if c.cluster_id != "iran") == 5
    assert cs.get("eth_down").indices == [3, 4]
    # the scoped prompt lists only the split cluster's alerts
    assert "Market 5" not in be.calls[0]["user"]


def test_unknown_ids_rejected():
    with pytest.raises(UnknownClusterId):
        apply_action(base_set(), ReflectionAction("merge", ("eth_price", "nope")), ALERTS, None)
    with pytest.raises(UnknownClusterId):
        apply_action(base_set(), ReflectionAction("rename", cluster="nope", new_id="x"), ALERTS, None)


@pytest.mark.parametrize("raw", [
    {"type": "merge", "clusters": ["only_one"]},
    {"type": "split"},
    {"type": "rename", "cluster": "a", "new_id": "other"},
    {"type": "rename", "cluster": "a"},
    {"type": "delete", "cluster": "a"},
    "merge everything",
])
def test_malformed_actions(raw):
    with pytest.raises(MalformedActions):
        parse_action(raw)


def test_satisfied_immediately_is_one_iteration():
    be = auditor([{"satisfied": True, "actions": []}])
    cs, out = reflect_loop(base_set(), ALERTS, Gateway(be))
    assert out.iterations_used == 1 and out.satisfied
    assert cs.ids == base_set().ids


def test_three_unsatisfied_rounds_stop_at_bound():
    be = auditor([{"satisfied": False, "actions": []}])
    _, out = reflect_loop(base_set(), ALERTS, Gateway(be))
    assert (out.iterations_used, out.satisfied) == (3, False)
    assert sum(1 for c in be.calls if c["template_id"] == "reflection_base") == 3


def test_merge_round_then_satisfied_recomputes_keywords():
    be = auditor([
        {"satisfied": False, "actions": [
            {"type": "merge", "clusters": ["us_iran_military_escalation", "us_iran_conflict"],
             "reason": "both focus on US military involvement"}]},
        {"satisfied": True},
    ])
    cs, out = reflect_loop(base_set(), ALERTS, Gateway(be))
    assert out.iterations_used == 2 and out.satisfied
    assert cs.get("us_iran_military_escalation").keywords is not None
    kw_calls = [c for c in be.calls if c["template_id"] == "keyword_system"]
    assert len(kw_calls) == 3 + 1  # initial bundles, then the merged cluster only
    assert [e.status for e in out.action_log] == ["applied"]


def test_malformed_reply_counts_toward_bound():
    be = auditor(["not json at all"])
    cs, out = reflect_loop(base_set(), ALERTS, Gateway(be))
    assert out.iterations_used == 3
    assert all(e.status == "rejected" for e in out.action_log)
    assert cs.ids == base_set().ids


def test_rejected_action_leaves_state_and_loop_continues():
    be = auditor([{"satisfied": False, "actions": [
        {"type": "merge", "clusters": ["eth_price", "ghost"]},
        {"type": "rename", "cluster": "eth_price", "new_id": "ethereum"},
    ]}, {"satisfied": True}])
    cs, out = reflect_loop(base_set(), ALERTS, Gateway(be))
    assert [e.status for e in out.action_log] == ["rejected", "applied"]
    assert "ethereum" in cs.ids


def test_outcome_bound_is_hard():
    with pytest.raises(ValueError):
        ReflectionOutcome(4, False)


class CountingSearch:
    def __init__(self, results=(), fail=False):
        self.results = list(results)
        self.fail = fail
        self.queries = []

    def search(self, query, start, as_of):
        self.queries.append((query, start, as_of))
        if self.fail:
            raise SearchUnavailable("quota")
        return self.results


def test_internal_mode_never_searches():
    provider = CountingSearch()
    be = auditor([{"satisfied": False}])
    reflect_loop(base_set(), ALERTS, Gateway(be))
    assert provider.queries == []
    assert {c["template_id"] for c in be.calls} <= {"keyword_system", "reflection_base"}
    assert all(REFLECTION_SEARCH_ADDON not in c["system"] for c in be.calls)


def test_tool_mode_filters_results_to_window_and_appends_addon():
    as_of = T0 + timedelta(days=1)
    provider = CountingSearch([
        SearchResult("inside", "s", T0 + timedelta(hours=3)),
        SearchResult("future", "s", as_of + timedelta(hours=1)),
        SearchResult("undated", "s", None),
        SearchResult("old", "s", T0 - timedelta(days=9)),
    ])
    be = auditor([{"satisfied": True, "search_queries": ["iran strike"]}])
    search = BoundedSearch(provider, as_of - timedelta(days=4), as_of)
    _, out = reflect_loop(base_set(), ALERTS, Gateway(be), mode="tool_calling", search=search)
    call = next(c for c in be.calls if c["template_id"] == "reflection_base")
    assert call["system"].endswith(REFLECTION_SEARCH_ADDON)
    assert "inside" in call["user"]
    assert "future" not in call["user"] and "undated" not in call["user"] and "old" not in call["user"]
    assert out.search_counts == (3,)
    assert all(q[2] <= as_of for q in provider.queries)


def test_tool_mode_degrades_when_search_unavailable():
    be = auditor([{"satisfied": True}])
    search = BoundedSearch(CountingSearch(fail=True), T0, T0 + timedelta(days=1))
    _, out = reflect_loop(base_set(), ALERTS, Gateway(be), mode="tool_calling", search=search)
    call = next(c for c in be.calls if c["template_id"] == "reflection_base")
    assert REFLECTION_SEARCH_ADDON not in call["system"]
    assert out.satisfied


def test_bounded_search_rejects_look_ahead():
    s = BoundedSearch(CountingSearch(), T0, T0 + timedelta(days=1))
    with pytest.raises(TemporalViolation):
        s.search("x", end=T0 + timedelta(days=1, seconds=1))


ids = st.sampled_from(["a", "b", "c", "d", "e", "ghost", "a_2"])
actions = st.one_of(
    st.builds(lambda xs, t: {"type": "merge", "clusters": xs, "new_theme": t},
              st.lists(ids, min_size=0, max_size=4), st.none() | st.just("merged")),
    st.builds(lambda c, n: {"type": "rename", "cluster": c, "new_id": n}, ids, st.sampled_from(["x1", "b", "misc", "a"])),
    st.builds(lambda c: {"type": "split", "cluster": c}, ids),
    st.just({"type": "explode"}),
)


@settings(max_examples=150, deadline=None)
@given(st.lists(actions, max_size=12), st.randoms(use_true_random=False))
def test_random_action_sequences_keep_partition(seq, rnd):
    cs = cluster_set(cluster("a", [0, 1]), cluster("b", [2]), cluster("c", [3, 4, 5]), cluster("d", [6]),
                     cluster("e", [7]))

    def respond(template_id, ordinal, attempt, system, user):
        n = user.count("\n") + 1
        labels = [rnd.choice(["p", "q", "other"]) for _ in range(n)]
        out = {}
        for i, lab in enumerate(labels):
            out.setdefault(lab, []).append({"index": i})
        return [{"cluster_id": k, "alerts": v} for k, v in out.items()]

    gw = Gateway(CapturingBackend(respond))
    for raw in seq:
        before = cs
        try:
            cs = apply_action(cs, parse_action(raw), ALERTS, gw)
        except (MalformedActions, UnknownClusterId, InvalidAction):
            assert cs is before
        assert cs.covers(8)
        assert len(set(cs.ids)) == len(cs.ids)
        assert isinstance(cs, ClusterSet)
