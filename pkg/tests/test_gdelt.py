import io
import math
import zipfile
from datetime import timedelta

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import T0
from oracles import EVENTS_FIXTURE, KEYWORDS, PAIRS, STAMP, ev_row, gkg_fixture, gkg_row, signals_oracle
from polygnosis.gdelt import (
    EventRecord,
    FetchFailed,
    GkgRecord,
    HttpGdeltSource,
    LocalGdeltSource,
    derive_signals,
    fetch_window,
    filter_events,
    filter_gkg,
    parse_tsv,
    slot_stamps,
)
from polygnosis.model import TemporalViolation



def ev(a1, a2, when=T0, tone=0.0, eid="e"):
    return EventRecord(eid, a1, a2, 1, tone, when)


def gk(when=T0, tone=0.0, persons=(), orgs=(), themes=(), rid="g"):
    return GkgRecord(rid, when, tuple(persons), tuple(orgs), tuple(themes), tone)


# -- parsing ------------------------------------------------------------------


def test_parse_skips_malformed_rows():
    rows = [ev_row(i, "UNITED STATES", "IRAN", T0 + timedelta(minutes=i % 90)) for i in range(1000)]
    rows[10] = "\t".join(rows[10].split("\t")[:30])  # truncated
    cols = rows[500].split("\t")
    cols[59] = "notadate"
    rows[500] = "\t".join(cols)
    cols = rows[900].split("\t")
    cols[34] = "tone?"
    rows[900] = "\t".join(cols)
    recs, skipped = parse_tsv("\n".join(rows) + "\n\n", "events")
    assert (len(recs), skipped) == (997, 3)


def test_parse_gkg_name_portions():
    row = gkg_row("g1", T0, themes="ARMEDCONFLICT,12;TAX_FNCACT_PRESIDENT,40",
                  persons="donald trump,100;xi jinping,220", orgs="federal reserve,5", tone=-3.25)
    (r,), skipped = parse_tsv(row, "gkg")
    assert skipped == 0
    assert r.persons == ("donald trump", "xi jinping")
    assert r.themes == ("ARMEDCONFLICT", "TAX_FNCACT_PRESIDENT")
    assert r.tone == -3.25


# -- fetch --------------------------------------------------------------------


@pytest.fixture
def cache(tmp_path):
    d = tmp_path / "events"
    d.mkdir()
    for k in range(8):
        stamp = T0 + timedelta(minutes=15 * k)
        (d / f"{stamp.strftime(STAMP)}.tsv").write_text(
            "\n".join(ev_row(f"{k}-{j}", "UNITED STATES", "IRAN", stamp) for j in range(2)))
    return LocalGdeltSource(tmp_path)


def test_fetch_window_is_closed_and_filtered(cache):
    res = fetch_window(cache, "events", (T0 + timedelta(minutes=15), T0 + timedelta(minutes=45)), as_of=T0 + timedelta(days=1))
    assert len(res) == 6
    assert all(T0 + timedelta(minutes=15) <= r.added_at <= T0 + timedelta(minutes=45) for r in res)


def test_fetch_past_as_of_is_rejected(cache):
    with pytest.raises(TemporalViolation):
        fetch_window(cache, "events", (T0, T0 + timedelta(hours=1, seconds=1)), as_of=T0 + timedelta(hours=1))


def test_fetch_empty_window(cache):
    later = T0 + timedelta(days=3)
    assert fetch_window(cache, "events", (later, later + timedelta(hours=1)), as_of=later + timedelta(hours=1)).records == []


def test_fetch_unknown_table(cache):
    with pytest.raises(ValueError):
        fetch_window(cache, "mentions", (T0, T0), as_of=T0)


def test_slot_stamps():
    got = slot_stamps(T0 + timedelta(minutes=1), T0 + timedelta(minutes=31))
    assert got == [T0 + timedelta(minutes=m) for m in (15, 30, 45)]


def _zip(text):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("x.CSV", text)
    return buf.getvalue()


def test_http_source_downloads_skips_404_and_caches(tmp_path):
    hits = []

    def handler(request):
        hits.append(request.url.path)
        stamp = request.url.path.rsplit("/", 1)[1].split(".")[0]
        if stamp.endswith("1500"):
            return httpx.Response(404)
        from polygnosis.gdelt import parse_stamp

        return httpx.Response(200, content=_zip(ev_row(stamp, "UNITED STATES", "IRAN", parse_stamp(stamp))))

    src = HttpGdeltSource(tmp_path, client=httpx.Client(transport=httpx.MockTransport(handler)))
    window = (T0, T0 + timedelta(minutes=30))
    res = fetch_window(src, "events", window, as_of=window[1])
    assert len(res) == 2
    assert len(hits) == 3
    assert all(p.endswith(".export.CSV.zip") for p in hits)
    fetch_window(src, "events", window, as_of=window[1])
    assert len(hits) == 4  # only the missing slot is retried
    assert len(list((tmp_path / "events").glob("*.tsv"))) == 2


def test_http_source_server_error(tmp_path):
    src = HttpGdeltSource(tmp_path, client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503))))
    with pytest.raises(FetchFailed):
        fetch_window(src, "gkg", (T0, T0), as_of=T0)


# -- filters ------------------------------------------------------------------

def test_events_hand_labelled_fixture():
    text = "\n".join(ev_row(i, a1, a2, T0) for i, (a1, a2, _) in enumerate(EVENTS_FIXTURE))
    recs, skipped = parse_tsv(text, "events")
    assert skipped == 0 and len(recs) == 20
    got = {r.event_id for r in filter_events(recs, PAIRS)}
    want = {str(i) for i, (_, _, m) in enumerate(EVENTS_FIXTURE) if m}
    assert len(want) == 7
    assert got == want


words = st.sampled_from(["IRAN", "UNITED STATES", "ISRAEL", "CHINA", "", "BITCOIN", "IRANIAN"])


@given(st.lists(st.tuples(words, words), max_size=20), st.lists(st.lists(words.filter(bool), min_size=1, max_size=2), max_size=3))
def test_event_filter_symmetric_in_actor_order(actors, pairs):
    fwd = [ev(a, b, eid=str(i)) for i, (a, b) in enumerate(actors)]
    rev = [ev(b, a, eid=str(i)) for i, (a, b) in enumerate(actors)]
    swapped = [tuple(reversed(p)) for p in pairs]
    ids = lambda rs: [r.event_id for r in rs]  # noqa: E731
    assert ids(filter_events(fwd, pairs)) == ids(filter_events(rev, pairs)) == ids(filter_events(fwd, swapped))


def test_gkg_hand_labelled_fixture():
    rows = gkg_fixture()
    recs, skipped = parse_tsv("\n".join(r for r, _ in rows), "gkg")
    assert skipped == 0 and len(recs) == 50
    got = {r.record_id for r in filter_gkg(recs, KEYWORDS)}
    want = {f"g{i}" for i, (_, m) in enumerate(rows) if m}
    assert len(want) == 12
    assert got == want


def test_gkg_partial_name_does_not_match():
    rec = gk(persons=["donald trump"])
    assert filter_gkg([rec], ["Trump"]) == []
    assert filter_gkg([rec], ["donald TRUMP"]) == [rec]


def test_gkg_needs_keywords():
    with pytest.raises(ValueError):
        filter_gkg([], [" ", ""])


# -- signals ------------------------------------------------------------------

AS_OF = T0 + timedelta(days=1)


def test_trend_and_tone_examples():
    today = [ev("A", "B", AS_OF - timedelta(hours=1), tone=-2.0)] * 30
    prior = ([ev("A", "B", AS_OF - timedelta(days=3, hours=12), tone=-1.5)] * 10
             + [ev("A", "B", AS_OF - timedelta(days=2, hours=12), tone=-1.5)] * 20
             + [ev("A", "B", AS_OF - timedelta(days=1, hours=12), tone=-1.5)] * 30)
    s = derive_signals(today + prior, [], AS_OF)
    assert s.mentions_24h == 30
    assert s.total_mentions_30d == 90
    assert s.trend_24h_vs_3d == 1.5
    assert s.tone_24h_vs_3d == pytest.approx(-0.5)
    assert s.gkg_volume_trend is None and s.gkg_avg_tone is None


def test_zero_prior_gives_no_trend():
    s = derive_signals([ev("A", "B", AS_OF)], [], AS_OF)
    assert s.trend_24h_vs_3d is None and s.tone_24h_vs_3d is None
    assert "trend_24h_vs_3d    = n/a" in s.prompt_lines()


def test_future_record_is_a_violation():
    with pytest.raises(TemporalViolation):
        derive_signals([], [gk(AS_OF + timedelta(seconds=1))], AS_OF)


# offsets in whole hours before as_of, including exact window edges
offsets = st.sampled_from([0, 1, 23, 24, 25, 71, 95, 96, 97, 500, 719, 720, 721, 900])
tones = st.integers(-10, 10).map(float)


@settings(max_examples=300)
@given(st.lists(st.tuples(offsets, tones), max_size=40), st.lists(st.tuples(offsets, tones), max_size=40))
def test_signals_match_brute_force(evs, gks):
    events = [ev("A", "B", AS_OF - timedelta(hours=h), tone=t, eid=str(i)) for i, (h, t) in enumerate(evs)]
    gkg = [gk(AS_OF - timedelta(hours=h), tone=t, rid=str(i)) for i, (h, t) in enumerate(gks)]
    got = derive_signals(events, gkg, AS_OF).to_dict()
    for key, want in signals_oracle(events, gkg, AS_OF).items():
        if want is None:
            assert got[key] is None, key
        elif isinstance(want, float):
            assert math.isclose(got[key], want, rel_tol=1e-9, abs_tol=1e-9), key
        else:
            assert got[key] == want, key
