from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macomm.backend import ChatRequest, ChatResponse, make_request
from macomm.cara import (
    REASONING,
    REFERENCE,
    UNSATISFIED,
    VERIFICATION,
    Attempt,
    CaraHook,
    RecoveryRate,
    RecoveryRecord,
    augment_prompt,
    build_correction,
    check_missing,
    rate_from_counts,
    recovery_rate,
    requirements,
    run_cara,
    run_with_recovery,
    select_targets,
    strip_augmentation,
)
from macomm.core import AgentResponse, SystemKind, default_agents
from macomm.orchestrator import Turn
from macomm.prompts import DEFAULT_TEMPLATES
from macomm.scripted import ScriptedModel

FULL = "Answer: 4\nReasoning: 2+2.\nVerification: 4-2=2.\nReference: agent 1 agrees."


def test_requirements():
    assert requirements(True, False) == {REASONING, VERIFICATION}
    assert requirements(True, True) == {REASONING, VERIFICATION, REFERENCE}
    assert requirements(False, True) == frozenset()


@pytest.mark.parametrize(
    "text, missing",
    [
        (FULL, set()),
        ("Reasoning: x", {VERIFICATION, REFERENCE}),
        ("reasoning: x\nVerification: y\nReference: z", {REASONING}),  # case-sensitive
        ("NoReasoning: x Verification: y Reference: z", {REASONING}),  # must follow whitespace
        ("Reasoning x Verification: y Reference: z", {REASONING}),  # colon required
        ("**Reasoning: x Verification: y Reference: z", {REASONING}),
    ],
)
def test_keyword_detection(text, missing):
    assert check_missing(text, {REASONING, VERIFICATION, REFERENCE}) == missing


def test_unknown_component_is_rejected():
    with pytest.raises(ValueError):
        check_missing("x", {"Summary"})


def test_augmentation_blocks():
    a = augment_prompt("sys", has_prior=False)
    assert a == "sys\n\n" + DEFAULT_TEMPLATES["cara.initial"]
    b = augment_prompt(a, has_prior=True)
    assert b == "sys\n\n" + DEFAULT_TEMPLATES["cara.prior"]
    assert strip_augmentation(b) == "sys"


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=80), st.booleans(), st.booleans())
def test_augmentation_never_stacks(prompt, first, second):
    once = augment_prompt(prompt, first)
    twice = augment_prompt(once, second)
    assert twice == augment_prompt(prompt, second)
    assert twice.count("Your response MUST include") == prompt.count("Your response MUST include") + 1


def test_correction_lists_missing_in_fixed_order():
    msg = build_correction({REFERENCE, REASONING})
    assert "Reasoning, Reference." in msg
    with pytest.raises(ValueError):
        build_correction(set())


class Sequenced:
    """Returns queued replies and records each request."""

    def __init__(self, *replies: str):
        self.replies = list(replies)
        self.requests: list[ChatRequest] = []

    def complete(self, req: ChatRequest) -> ChatResponse:
        self.requests.append(req)
        return ChatResponse(self.replies.pop(0))


def _turn(role="agent", has_prior=True):
    from macomm.core import Dataset, TaskInstance

    return Turn(TaskInstance("t", Dataset.GSM8K, "q", "4"), SystemKind.SEQ_U, role, 1, 0, has_prior)


def test_hook_retries_with_correction_messages():
    model = Sequenced("Reasoning: a\nVerification: b", FULL)
    req = make_request("m", "sys", "task", 0.7, 42)
    hook = CaraHook()
    out = hook.post_generate(AgentResponse(0, 1, "Answer: 4"), _turn(), req, model)
    assert out.raw_text == FULL and out.retry_count == 2 and out.flags == ()
    first, second = model.requests
    assert [r for r, _ in first.messages] == ["user", "assistant", "user"]
    assert first.messages[1][1] == "Answer: 4"
    # each correction carries only the latest answer
    assert second.messages[1][1] == "Reasoning: a\nVerification: b"
    assert "Reference." in second.messages[2][1]
    assert second.params == req.params
    rec = hook.records[0]
    assert [sorted(a.missing) for a in rec.attempts] == [[REASONING, REFERENCE, VERIFICATION], [REFERENCE], []]


def test_hook_stops_after_three_retries():
    model = Sequenced("no", "no", "no", "never asked")
    hook = CaraHook()
    out = hook.post_generate(AgentResponse(0, 1, "no"), _turn(has_prior=False), make_request("m", "s", "u", 0.7, 42), model)
    assert out.retry_count == 3 and UNSATISFIED in out.flags
    assert len(model.requests) == 3
    assert not hook.records[0].satisfied


def test_hook_leaves_judge_alone():
    model = Sequenced()
    hook = CaraHook()
    turn = _turn(role="judge")
    assert hook.system_prompt("sys", turn) == "sys"
    out = hook.post_generate(AgentResponse(2, 1, "Judge Decision: continue", role="judge"), turn,
                             make_request("m", "s", "u", 0.0, 44), model)
    assert out.retry_count == 0 and model.requests == []


def test_max_retries_bounds():
    with pytest.raises(ValueError):
        CaraHook(max_retries=4)
    model = Sequenced()
    out = CaraHook(max_retries=0).post_generate(AgentResponse(0, 1, "x"), _turn(), make_request("m", "s", "u", 0.7, 42), model)
    assert out.retry_count == 0 and UNSATISFIED in out.flags


def test_record_roundtrip_and_bounds():
    rec = RecoveryRecord("t", 1, 0, "agent", frozenset({REASONING}), (Attempt("x", frozenset({REASONING})), Attempt("Reasoning: y", frozenset())))
    assert RecoveryRecord.from_dict(rec.to_dict()) == rec
    assert rec.retry_count == 1 and rec.satisfied and rec.final_text == "Reasoning: y"
    with pytest.raises(ValueError):
        RecoveryRecord("t", 1, 0, "agent", frozenset(), ())
    with pytest.raises(ValueError):
        RecoveryRecord("t", 1, 0, "agent", frozenset(), (Attempt("x", frozenset()),) * 5)


@pytest.mark.parametrize("kind", [SystemKind.SEQ_U, SystemKind.DEBATE, SystemKind.CRSV])
def test_run_with_recovery_on_scripted_model(kind):
    from macomm.evaluation import load_dataset

    from conftest import FIXTURES

    task = load_dataset(FIXTURES / "gsm8k_20.jsonl")[0]
    roles = ("proposer", "critic") if kind is SystemKind.DEBATE else ("agent",) * 3
    trace, records = run_with_recovery(task, kind, default_agents("scripted", roles), ScriptedModel(cara="on_correction"))
    assert trace.run_label == "cara"
    participating = [r for r in trace.responses if r.role not in ("judge", "voter")]
    assert len(records) == len(participating)
    assert all(r.retry_count == 1 for r in participating)
    assert all(r.retry_count == 0 for r in trace.responses if r.role in ("judge", "voter"))


def test_run_cara_collects_records():
    from macomm.evaluation import load_dataset

    from conftest import FIXTURES

    tasks = load_dataset(FIXTURES / "gsm8k_20.jsonl")[:3]
    traces, records = run_cara(tasks, SystemKind.SEQ_U, ScriptedModel(cara="comply"), default_agents("scripted"))
    assert [t.task_id for t in traces] == [t.id for t in tasks]
    assert len(records) == 27 and all(r.retry_count == 0 for r in records)


def test_select_targets():
    from macomm.core import Dataset, TaskInstance

    tasks = [TaskInstance(i, Dataset.GSM8K, "q", "1") for i in "abc"]
    assert select_targets(tasks, ["c", "a"]) == [tasks[0], tasks[2]]
    assert select_targets(tasks, None) == tasks


def test_recovery_rates():
    r = recovery_rate("tf", ["a", "b", "c"], {"a": True, "b": False, "c": True})
    assert (r.group, r.recovered, r.total, r.recovered_ids) == ("TF", 2, 3, ("a", "c"))
    assert r.rate == 66.7 and r.cell() == "66.7"
    assert RecoveryRate("FF", 0, 0).cell() == "n/a"
    assert rate_from_counts(1, 8) == 12.5
    assert rate_from_counts(1, 16) == 6.3  # half-up, not banker's
    with pytest.raises(ValueError):
        recovery_rate("ff", ["x"], {})
    with pytest.raises(ValueError):
        rate_from_counts(3, 2)
