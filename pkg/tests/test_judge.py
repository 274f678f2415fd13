import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartdesc.judge import (
    ACUITY_DIMENSIONS,
    ERROR_CATEGORIES,
    AcuityVerdict,
    ErrorItem,
    FaithfulnessVerdict,
    VerdictInconsistencyError,
    VerdictRangeError,
    acuity_score,
    faithfulness_score,
    judge_acuity,
    judge_faithfulness,
)
from chartdesc.providers import ChatClient, MockChatBackend
from helpers import png_bytes

IMAGE = png_bytes((10, 20, 30))
DESCRIPTION = "The bar chart compares three models. Model A scores highest at 0.91."


def adjudicator(replies):
    backend = MockChatBackend(replies)
    return ChatClient(backend, "mock-judge", sleep=lambda _: None), backend


def verdict_json(n_total, errors):
    return json.dumps({
        "n_total_claims": n_total,
        "n_erroneous": len(errors),
        "errors": [{"claim_text": f"claim {i}", "category": c, "explanation": "wrong"} for i, c in enumerate(errors)],
    })


def test_taxonomy_has_nine_classes():
    assert len(ERROR_CATEGORIES) == 9
    assert {"color", "numerical value", "stability"} <= set(ERROR_CATEGORIES)


def test_faithfulness_no_errors():
    c, _ = adjudicator(verdict_json(10, []))
    v = judge_faithfulness(IMAGE, DESCRIPTION, c)
    assert (v.n_total_claims, v.n_erroneous, v.errors) == (10, 0, ())
    assert faithfulness_score(v) == 1.0
    assert v.model_id == "mock-judge"


def test_faithfulness_errors_preserved():
    c, _ = adjudicator(verdict_json(8, ["numerical value", "trend"]))
    v = judge_faithfulness(IMAGE, DESCRIPTION, c)
    assert [e.category for e in v.errors] == ["numerical value", "trend"]
    assert v.errors[0].claim_text == "claim 0"
    assert faithfulness_score(v) == 0.75


def test_faithfulness_request_is_single_vision_call():
    c, backend = adjudicator(verdict_json(3, []))
    judge_faithfulness(IMAGE, DESCRIPTION, c)
    (req,) = backend.calls
    assert req.images == (("image/png", IMAGE),)
    assert DESCRIPTION in req.user_text
    assert req.response_format == "json"
    for category in ERROR_CATEGORIES:
        assert category in req.system_prompt


def test_inconsistent_verdict_reprompted_once():
    bad = json.dumps({"n_total_claims": 5, "n_erroneous": 3, "errors": [
        {"claim_text": "a", "category": "trend"}, {"claim_text": "b", "category": "trend"}]})
    c, backend = adjudicator([bad, verdict_json(5, ["trend"])])
    v = judge_faithfulness(IMAGE, DESCRIPTION, c)
    assert v.n_erroneous == 1
    assert len(backend.calls) == 2
    assert "rejected" in backend.calls[1].user_text and bad in backend.calls[1].user_text


def test_inconsistent_verdict_twice_is_terminal():
    bad = json.dumps({"n_total_claims": 5, "n_erroneous": 3, "errors": []})
    c, backend = adjudicator(bad)
    with pytest.raises(VerdictInconsistencyError):
        judge_faithfulness(IMAGE, DESCRIPTION, c)
    assert len(backend.calls) == 2


def test_more_errors_than_claims_rejected():
    with pytest.raises(VerdictInconsistencyError):
        FaithfulnessVerdict(1, 2, (ErrorItem("a", "trend"), ErrorItem("b", "trend")))


def test_unknown_category_rejected():
    with pytest.raises(VerdictInconsistencyError):
        FaithfulnessVerdict(2, 1, (ErrorItem("a", "font"),))


def test_from_json_aliases_and_normalisation():
    v = FaithfulnessVerdict.from_json({"n_total": 4, "errors": [{"claim_text": "x", "category": " Numerical  Value"}]})
    assert (v.n_total_claims, v.n_erroneous, v.errors[0].category) == (4, 1, "numerical value")
    v = FaithfulnessVerdict.from_json({"claims": ["a", "b"], "errors": []})
    assert v.n_total_claims == 2


@pytest.mark.parametrize("total,err,expected", [(10, 0, 1.0), (10, 10, 0.0), (8, 2, 0.75)])
def test_faithfulness_formula(total, err, expected):
    v = FaithfulnessVerdict(total, err, tuple(ErrorItem(str(i), "trend") for i in range(err)))
    assert faithfulness_score(v) == expected


def test_faithfulness_undefined_without_claims():
    assert faithfulness_score(FaithfulnessVerdict(0, 0)) is None


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(0, 10**6))
def test_faithfulness_in_unit_interval(total, seed):
    err = random.Random(seed).randint(0, total)
    v = FaithfulnessVerdict(total, err, tuple(ErrorItem("c", "range") for _ in range(err)))
    s = faithfulness_score(v)
    assert 0.0 <= s <= 1.0
    assert (s == 1.0) == (err == 0)


# --- acuity ----------------------------------------------------------------------

def acuity_json(scores):
    data = dict(zip(ACUITY_DIMENSIONS, scores))
    data["rationales"] = {d: f"because {d}" for d in ACUITY_DIMENSIONS}
    return json.dumps(data)


def test_acuity_all_fives():
    c, backend = adjudicator(acuity_json([5] * 5))
    v = judge_acuity(IMAGE, DESCRIPTION, c)
    assert v == AcuityVerdict(5, 5, 5, 5, 5)
    assert acuity_score(v) == 5.0
    (req,) = backend.calls
    assert req.images and DESCRIPTION in req.user_text


def test_acuity_passthrough():
    c, _ = adjudicator(acuity_json([3, 4, 4, 3, 4]))
    v = judge_acuity(IMAGE, DESCRIPTION, c)
    assert v.scores() == (3, 4, 4, 3, 4)
    assert v.rationales["etiological"] == "because etiological"


def test_acuity_out_of_range_reprompt_then_terminal():
    c, backend = adjudicator(acuity_json([3, 4, 4, 6, 4]))
    with pytest.raises(VerdictRangeError):
        judge_acuity(IMAGE, DESCRIPTION, c)
    assert len(backend.calls) == 2


def test_acuity_out_of_range_recovers():
    c, _ = adjudicator([acuity_json([3, 4, 4, 6, 4]), acuity_json([3, 4, 4, 5, 4])])
    assert judge_acuity(IMAGE, DESCRIPTION, c).etiological == 5


def test_acuity_rejects_fractional_scores():
    with pytest.raises(VerdictRangeError):
        AcuityVerdict.from_json(dict(zip(ACUITY_DIMENSIONS, [3, 3.5, 3, 3, 3])))


def test_acuity_mean():
    assert acuity_score(AcuityVerdict(1, 1, 1, 1, 1)) == 1.0
    assert acuity_score(AcuityVerdict(3, 4, 4, 3, 4)) == pytest.approx(3.6)
    # the same rule over corpus-level sub-score means
    assert sum((3.22, 3.54, 3.50, 2.53, 3.67)) / 5 == pytest.approx(3.292)


def test_acuity_permutation_of_equal_scores():
    assert acuity_score(AcuityVerdict(2, 5, 5, 2, 5)) == acuity_score(AcuityVerdict(5, 2, 5, 5, 2))


def test_judges_need_image_and_text():
    c, backend = adjudicator(acuity_json([5] * 5))
    with pytest.raises(ValueError):
        judge_acuity(b"garbage", DESCRIPTION, c)
    with pytest.raises(ValueError):
        judge_faithfulness(IMAGE, " ", c)
    assert backend.calls == []
