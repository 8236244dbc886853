"""Pairwise judging: verdict parsing, position-bias control, bootstrap
intervals."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import make_client
from docalign.judging import (
    RETRY_SALT,
    JudgeError,
    WinRateTable,
    bootstrap_ci,
    judge_pair,
    parse_verdict,
    winrate_matrix,
)
from docalign.mock_teacher import MockTeacherLogic


def responses_for(methods, prompts, text=None):
    return {
        m: {pid: (text or f"{m} response to {pid}") for pid in prompts} for m in methods
    }


# === verdict parsing ===


def test_parse_verdict_simple():
    assert parse_verdict("Reasoning...\n[[A]]") == "A"
    assert parse_verdict("[[B]]") == "B"


def test_parse_verdict_last_marker_wins():
    assert parse_verdict("At first [[A]] seemed right, but finally [[B]]") == "B"


def test_parse_verdict_absent():
    assert parse_verdict("Both responses are fine.") is None
    assert parse_verdict("[A] [B] [[C]]") is None


# === judge_pair ===


def test_judge_pair_returns_slot_winner(tmp_path):
    client, _ = make_client(tmp_path, MockTeacherLogic(judge_policy="first"))
    winner, raw = judge_pair(client, "Which applies?", "resp one", "resp two")
    assert winner == "A"
    assert "[[A]]" in raw


def test_judge_pair_retries_unparseable_then_gives_up(tmp_path):
    # the mock garbles every reply for this query, so the retry (a
    # distinct cache key) is a real second network call that also fails
    client, logic = make_client(tmp_path, MockTeacherLogic())
    winner, raw = judge_pair(client, "[garble] which is better?", "one", "two")
    assert winner is None
    assert "[[" not in raw
    assert logic.call_count == 2


def test_judge_pair_retry_uses_distinct_cache_key(tmp_path):
    client, logic = make_client(tmp_path, MockTeacherLogic())
    judge_pair(client, "[garble] pick one", "one", "two")
    assert logic.call_count == 2
    # warm rerun: both the original and the retry hit the cache
    judge_pair(client, "[garble] pick one", "one", "two")
    assert logic.call_count == 2
    assert client.usage_totals()["cache_hits"] == 2
    assert RETRY_SALT == "judge-retry-1"


def test_judge_pair_no_retry_when_parseable(tmp_path):
    client, logic = make_client(tmp_path, MockTeacherLogic(judge_policy="first"))
    judge_pair(client, "clean question", "one", "two")
    assert logic.call_count == 1


# === winrate_matrix: position-bias control ===


def test_first_position_bias_washes_out_to_half(tmp_path):
    client, _ = make_client(tmp_path, MockTeacherLogic(judge_policy="first"))
    prompts = {f"p{i}": f"Question {i}?" for i in range(4)}
    table = winrate_matrix(
        client, prompts, responses_for(["alpha", "beta"], prompts), resamples=50
    )
    assert table.rate("alpha", "beta") == 0.5
    assert table.rate("beta", "alpha") == 0.5
    cell = table.cells[("alpha", "beta")]
    assert cell.n == 8  # 4 prompts x 2 orders
    assert cell.wins_a == 4
    assert cell.parse_failures == 0


def test_marker_preference_is_order_insensitive(tmp_path):
    client, _ = make_client(
        tmp_path, MockTeacherLogic(judge_policy="marker", judge_marker="grounded")
    )
    prompts = {f"p{i}": f"Question {i}?" for i in range(3)}
    responses = {
        "good": {pid: f"grounded reply to {pid}" for pid in prompts},
        "bad": {pid: f"vague reply to {pid}" for pid in prompts},
    }
    table = winrate_matrix(client, prompts, responses, resamples=50)
    assert table.rate("good", "bad") == 1.0
    assert table.rate("bad", "good") == 0.0


def test_mirrored_cells_share_verdicts(tmp_path):
    client, _ = make_client(tmp_path, MockTeacherLogic(judge_policy="hash"))
    prompts = {f"p{i}": f"Scenario {i}: what is required?" for i in range(5)}
    responses = {
        m: {pid: f"{m} answer {pid}" for pid in prompts} for m in ("one", "two")
    }
    table = winrate_matrix(client, prompts, responses, resamples=50)
    ab = table.cells[("one", "two")]
    ba = table.cells[("two", "one")]
    assert ab.n == ba.n == 10
    assert ab.wins_a + ba.wins_a == ab.n
    assert ab.rate + ba.rate == 1.0


@settings(max_examples=20, deadline=None)
@given(data=st.data())
def test_antisymmetry_on_random_tie_free_transcripts(data):
    # aggregation is a pure function of the verdicts, so antisymmetry is
    # checked directly on randomized parse-clean transcripts
    from docalign.judging import JudgeVerdict, _aggregate

    n_prompts = data.draw(st.integers(min_value=1, max_value=8))
    prompt_ids = [f"p{i}" for i in range(n_prompts)]
    verdicts = []
    for pid in prompt_ids:
        for slot_a, slot_b in (("x", "y"), ("y", "x")):
            winner = data.draw(st.sampled_from([slot_a, slot_b]))
            verdicts.append(JudgeVerdict(pid, slot_a, slot_b, winner, f"[[{winner}]]"))
    xy = _aggregate("x", "y", verdicts, prompt_ids, 0.95, 20, 13)
    yx = _aggregate("y", "x", verdicts, prompt_ids, 0.95, 20, 13)
    assert xy.rate + yx.rate == pytest.approx(1.0, abs=1e-12)


def test_parse_failures_excluded_from_denominator(tmp_path):
    client, _ = make_client(tmp_path, MockTeacherLogic(judge_policy="first"))
    prompts = {"p0": "[garble] impossible to judge", "p1": "Plain question?"}
    table = winrate_matrix(
        client, prompts, responses_for(["m1", "m2"], prompts), resamples=50
    )
    cell = table.cells[("m1", "m2")]
    assert cell.parse_failures == 2  # both orders of the garbled prompt
    assert cell.n == 2
    assert cell.rate == 0.5


def test_three_methods_judges_each_unordered_pair(tmp_path):
    client, logic = make_client(tmp_path, MockTeacherLogic(judge_policy="hash"))
    prompts = {f"p{i}": f"Question {i}?" for i in range(2)}
    table = winrate_matrix(
        client, prompts, responses_for(["a", "b", "c"], prompts), resamples=50
    )
    assert table.methods == ["a", "b", "c"]
    assert set(table.cells) == {
        (x, y) for x in ("a", "b", "c") for y in ("a", "b", "c") if x != y
    }
    # 3 unordered pairs x 2 prompts x 2 orders
    assert logic.call_count == 12
    assert len(table.verdicts) == 12


def test_winrate_matrix_validation(tmp_path):
    client, _ = make_client(tmp_path, MockTeacherLogic())
    prompts = {"p0": "Q?"}
    with pytest.raises(JudgeError, match="at least two methods"):
        winrate_matrix(client, prompts, {"only": {"p0": "r"}})
    with pytest.raises(JudgeError, match="at least one prompt"):
        winrate_matrix(client, {}, responses_for(["a", "b"], {}))
    with pytest.raises(JudgeError, match="missing responses for"):
        winrate_matrix(client, prompts, {"a": {"p0": "r"}, "b": {}})


def test_table_csv_and_dict_shape(tmp_path):
    client, _ = make_client(tmp_path, MockTeacherLogic(judge_policy="first"))
    prompts = {"p0": "Q0?", "p1": "Q1?"}
    table = winrate_matrix(
        client, prompts, responses_for(["aa", "bb"], prompts), resamples=50
    )
    csv = table.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "method,aa,bb"
    assert lines[1] == "aa,,0.5000"
    assert lines[2] == "bb,0.5000,"
    as_dict = table.as_dict()
    assert as_dict["methods"] == ["aa", "bb"]
    assert len(as_dict["cells"]) == 2
    assert {c["rate"] for c in as_dict["cells"]} == {0.5}


def test_matrix_is_deterministic_and_cache_warm(tmp_path):
    client, logic = make_client(tmp_path, MockTeacherLogic(judge_policy="hash"))
    prompts = {f"p{i}": f"Question {i}?" for i in range(3)}
    responses = responses_for(["m1", "m2"], prompts)
    first = winrate_matrix(client, prompts, responses, resamples=50)
    calls = logic.call_count
    second = winrate_matrix(client, prompts, responses, resamples=50)
    assert logic.call_count == calls
    assert first.as_dict() == second.as_dict()


# === bootstrap_ci ===


def test_bootstrap_identical_outcomes_zero_width():
    assert bootstrap_ci([1.0] * 10) == 0.0
    assert bootstrap_ci([0.25] * 5) == 0.0


def test_bootstrap_deterministic_under_seed():
    rng = random.Random(7)
    outcomes = [rng.random() for _ in range(40)]
    a = bootstrap_ci(outcomes, seed=13)
    b = bootstrap_ci(outcomes, seed=13)
    c = bootstrap_ci(outcomes, seed=14)
    assert a == b
    assert a != c


def test_bootstrap_matches_normal_approximation_on_alternating_fixture():
    outcomes = [float(i % 2) for i in range(1000)]
    halfwidth = bootstrap_ci(outcomes, level=0.95, resamples=1000, seed=13)
    assert halfwidth == pytest.approx(
        oracles.NORMAL_CI_HALFWIDTH_N1000_P05, abs=0.01
    )


def test_bootstrap_validation():
    with pytest.raises(ValueError, match="at least 2"):
        bootstrap_ci([1.0])
    with pytest.raises(ValueError, match="level"):
        bootstrap_ci([0.0, 1.0], level=1.0)
    with pytest.raises(ValueError, match="resamples"):
        bootstrap_ci([0.0, 1.0], resamples=0)


def test_bootstrap_widens_with_spread():
    tight = bootstrap_ci([0.5, 0.5, 0.5, 0.5, 0.51, 0.49], seed=3)
    wide = bootstrap_ci([0.0, 1.0, 0.0, 1.0, 0.0, 1.0], seed=3)
    assert wide > tight


@settings(max_examples=30, deadline=None)
@given(
    outcomes=st.lists(
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False), min_size=2, max_size=30
    ),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_bootstrap_halfwidth_nonnegative_and_bounded(outcomes, seed):
    halfwidth = bootstrap_ci(outcomes, resamples=100, seed=seed)
    assert 0.0 <= halfwidth <= (max(outcomes) - min(outcomes)) / 2.0 + 1e-12


def test_cells_carry_ci(tmp_path):
    client, _ = make_client(tmp_path, MockTeacherLogic(judge_policy="hash"))
    prompts = {f"p{i}": f"Question {i}?" for i in range(4)}
    table = winrate_matrix(
        client, prompts, responses_for(["m1", "m2"], prompts), resamples=200
    )
    cell = table.cells[("m1", "m2")]
    assert cell.ci_halfwidth is not None
    assert 0.0 <= cell.ci_halfwidth <= 0.5


def test_single_prompt_has_no_interval(tmp_path):
    # one prompt -> one per-prompt outcome -> bootstrap needs >= 2
    client, _ = make_client(tmp_path, MockTeacherLogic(judge_policy="first"))
    prompts = {"p0": "Only question?"}
    table = winrate_matrix(
        client, prompts, responses_for(["m1", "m2"], prompts), resamples=50
    )
    assert table.cells[("m1", "m2")].ci_halfwidth is None
    assert table.cells[("m1", "m2")].rate == 0.5
