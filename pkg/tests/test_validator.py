import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import record
from polygnosis.model import ALIGNMENTS, MEDIA_DIRECTIONS, POLY_DIRECTIONS
from polygnosis.validator import AlignmentRubric, RubricError, validate_alignment, validate_all

RUBRIC = AlignmentRubric.default()

# every (poly, media) cell written out by hand
EXPECTED = {
    ("intensifying", "intensifying"): "consensus",
    ("intensifying", "easing"): "divergence",
    ("intensifying", "mixed"): "market_leads_media",
    ("intensifying", "no_coverage"): "market_leads_media",
    ("easing", "intensifying"): "divergence",
    ("easing", "easing"): "consensus",
    ("easing", "mixed"): "market_leads_media",
    ("easing", "no_coverage"): "market_leads_media",
    ("mixed", "intensifying"): "media_leads_market",
    ("mixed", "easing"): "media_leads_market",
    ("mixed", "mixed"): "consensus",
    ("mixed", "no_coverage"): "market_leads_media",
}


@pytest.mark.parametrize("cell", sorted(EXPECTED))
def test_default_rubric_cells(cell):
    assert RUBRIC(*cell) == EXPECTED[cell]


def test_examples():
    r, flipped = validate_alignment(record(poly="intensifying", media="easing", align="consensus"), RUBRIC)
    assert flipped and r.poly_media_alignment == "divergence"
    r, flipped = validate_alignment(record(poly="easing", media="no_coverage", align="market_leads_media"), RUBRIC)
    assert not flipped


records = st.builds(
    lambda p, w, m, a, c: record("x", p, w, m, a, poly_comment=c, media_comment=c[::-1], alignment_comment=c),
    st.sampled_from(POLY_DIRECTIONS), st.sampled_from(["top_trader", "large_capital", "speculative", "no_whale_data"]),
    st.sampled_from(MEDIA_DIRECTIONS), st.sampled_from(ALIGNMENTS), st.text(max_size=15),
)


@given(records)
def test_validation_idempotent_and_touches_only_alignment(r):
    once, _ = validate_alignment(r, RUBRIC)
    twice, flipped = validate_alignment(once, RUBRIC)
    assert twice == once and not flipped
    assert once.to_dict() | {"poly_media_alignment": r.poly_media_alignment} == r.to_dict()
    opposed = {r.poly_direction, r.media_direction} == {"intensifying", "easing"}
    assert not (opposed and once.poly_media_alignment == "consensus")


@given(st.lists(records, max_size=10))
def test_validate_all_reports_flips(rs):
    rs = [r.__class__(**{**r.__dict__, "cluster_id": f"c{i}"}) for i, r in enumerate(rs)]
    out, flipped = validate_all(rs, RUBRIC)
    assert flipped == [a.cluster_id for a, b in zip(rs, out) if a != b]
    assert [r.cluster_id for r in out] == [r.cluster_id for r in rs]


def test_text_round_trip(tmp_path):
    assert AlignmentRubric.loads(RUBRIC.dumps()) == RUBRIC
    p = tmp_path / "rubric.txt"
    p.write_text("# custom\n" + RUBRIC.dumps().replace("default-v1", "mine-2"))
    loaded = AlignmentRubric.load(p)
    assert loaded.version == "mine-2" and dict(loaded.table) == dict(RUBRIC.table)


def test_non_total_rubric_rejected():
    lines = RUBRIC.dumps().splitlines()
    with pytest.raises(RubricError):
        AlignmentRubric.loads("\n".join(lines[:-1]))


def test_bad_label_rejected():
    with pytest.raises(RubricError):
        AlignmentRubric.loads(RUBRIC.dumps().replace("-> divergence", "-> opposed", 1))


def test_duplicate_row_and_missing_version_rejected():
    text = RUBRIC.dumps()
    with pytest.raises(RubricError):
        AlignmentRubric.loads(text + text.splitlines()[1] + "\n")
    with pytest.raises(RubricError):
        AlignmentRubric.loads("\n".join(text.splitlines()[1:]))
    with pytest.raises(RubricError):
        AlignmentRubric.loads("version = v\nintensifying -> consensus\n")
