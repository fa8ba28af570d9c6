from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from macomm.annotation import Annotator
from macomm.core import AgentResponse, Category, Span, SystemKind, default_agents, span_violations
from macomm.evaluation import load_dataset
from macomm.occlusion import (
    MASK,
    ControlHook,
    OcclusionDelta,
    OcclusionError,
    OcclusionHook,
    OutcomeMatrix,
    SpanLengthProfile,
    accuracy_delta,
    avg_span_length,
    control_mask,
    derive_seed,
    known_annotations,
    mask_category,
    mask_response,
    outcome_matrix,
    outcomes_by_id,
    published_profile,
    run_label_for,
    run_occlusion,
    two_prop_ztest,
)
from macomm.orchestrator import run_discussion
from macomm.scripted import ScriptedModel

from conftest import FIXTURES
from strategies import annotated_responses, categories


def _response(*parts: tuple[str, Category | None], sep: str = " ") -> AgentResponse:
    data = b""
    spans = []
    for i, (text, label) in enumerate(parts):
        if i:
            data += sep.encode()
        spans.append(Span(f"s{i + 1}", len(data), len(data) + len(text.encode()), text, label))
        data += text.encode()
    return AgentResponse(0, 1, data.decode(), spans=tuple(spans))


def test_mask_replaces_every_target_span():
    r = _response(("Answer: 4", Category.C1), ("Two plus two.", Category.C2), ("Größer: 5.", Category.C2))
    assert mask_category(r, Category.C2) == f"Answer: 4 {MASK} {MASK}"
    assert mask_category(r, Category.C5) == r.raw_text
    out = mask_response(r, Category.C2)
    assert span_violations(out.raw_text, out.spans) == []
    assert r.raw_text.startswith("Answer: 4 Two")  # original untouched


def test_unannotated_response_is_refused():
    with pytest.raises(OcclusionError, match="annotate first"):
        mask_response(AgentResponse(0, 1, "Answer: 4"), Category.C1)
    assert mask_category(AgentResponse(0, 1, ""), Category.C1) == ""


@settings(max_examples=200, deadline=None)
@given(annotated_responses(), categories)
def test_masking_preserves_non_target_spans(response, target):
    out = mask_response(response, target)
    assert span_violations(out.raw_text, out.spans) == []
    for before, after in zip(response.spans, out.spans):
        assert after.text == (MASK if before.label is target else before.text)


def test_control_mask_is_deterministic_and_clamped():
    text = "abcdefghij" * 5
    a = control_mask(text, 7, seed=3)
    assert a == control_mask(text, 7, seed=3)
    assert len(a) == len(text) - 7 + len(MASK) and a.count(MASK) == 1
    assert control_mask("short", 100, seed=1) == MASK
    assert control_mask(text, 0, seed=1) == text
    with pytest.raises(ValueError):
        control_mask(text, -1, seed=1)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60), st.integers(0, 80), st.integers(0, 2**32))
def test_control_mask_removes_one_contiguous_run(text, length, seed):
    out = control_mask(text, length, seed)
    if length == 0 or not text:
        assert out == text
        return
    k = min(length, len(text))
    i = out.find(MASK) if MASK not in text else None
    if i is not None:
        assert out[:i] + out[i + len(MASK):] in {text[:j] + text[j + k:] for j in range(len(text) - k + 1)}
    assert len(out) == len(text) - k + len(MASK)


def test_derive_seed_separates_parts():
    assert derive_seed("a", 1) == derive_seed("a", 1)
    assert derive_seed("a", 1) != derive_seed("a1")
    assert 0 <= derive_seed("x") < 2**64


def test_span_length_profiles(tmp_path):
    from macomm.core import CommunicationTrace

    r = _response(("ab", Category.C1), ("abc", Category.C1), ("x" * 10, Category.C2))
    trace = CommunicationTrace("t", SystemKind.SEQ_U, "Qwen2.5-Inst", (r,), "1", True)
    prof = avg_span_length([trace])
    assert prof[Category.C1] == 3  # 2.5 rounds half-up
    assert prof[Category.C2] == 10
    assert set(prof.flagged) == {Category.C3, Category.C4, Category.C5}
    assert prof.model_id == "Qwen2.5-Inst"
    path = tmp_path / "p.json"
    prof.save(path)
    assert SpanLengthProfile.load(path) == prof
    assert published_profile("Qwen2.5-Coder")[Category.C2] == 917
    with pytest.raises(KeyError):
        published_profile("gpt-x")
    with pytest.raises(ValueError):
        SpanLengthProfile("m", {Category.C1: -1})


def test_run_labels():
    assert run_label_for(Category.C3) == "occ-C3"
    assert run_label_for("control") == run_label_for("CTRL") == "ctrl"
    assert run_label_for("c4") == "occ-C4"


# ---------------------------------------------------------------------------
# statistics


def _scipy_ztest(k1, n1, k2, n2):
    p = (k1 + k2) / (n1 + n2)
    se = math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    z = (k1 / n1 - k2 / n2) / se
    return z, 2 * norm.sf(abs(z))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 2000), st.data())
def test_ztest_matches_scipy(n1, n2, data):
    k1 = data.draw(st.integers(0, n1))
    k2 = data.draw(st.integers(0, n2))
    z, p = two_prop_ztest(k1, n1, k2, n2)
    if k1 + k2 in (0, n1 + n2):
        assert (z, p) == (0.0, 1.0)
        return
    zo, po = _scipy_ztest(k1, n1, k2, n2)
    assert z == pytest.approx(zo, rel=1e-12, abs=1e-12)
    assert p == pytest.approx(po, rel=1e-9, abs=1e-300)


def test_ztest_rejects_bad_counts():
    with pytest.raises(ValueError):
        two_prop_ztest(1, 0, 1, 1)
    with pytest.raises(ValueError):
        two_prop_ztest(3, 2, 1, 1)


def test_delta_cells():
    d = OcclusionDelta.from_counts(60, 100, 80, 100)
    assert d.delta == pytest.approx(-20.0) and d.significant
    assert d.cell() == "-20.00*"
    up = OcclusionDelta.from_counts(81, 100, 80, 100)
    assert up.cell() == "+1.00" and not up.significant
    assert OcclusionDelta.from_counts(5, 10, 5, 10).cell() == "0.00"


def test_accuracy_delta_rounds_half_up():
    assert accuracy_delta(73.335, 70.0) == 3.34
    assert accuracy_delta(70.0, 73.335) == -3.34  # away from zero in magnitude terms
    assert accuracy_delta(50.0, 50.0) == 0.0


def test_outcome_matrix():
    m = outcome_matrix({"a": True, "b": True, "c": False, "d": False}, {"a": True, "b": False, "c": True, "d": False})
    assert (m.TT, m.TF, m.FT, m.FF, m.n) == (1, 1, 1, 1, 4)
    assert m.group("tf") == ("b",)
    assert OutcomeMatrix.from_dict(m.to_dict()) == m
    with pytest.raises(OcclusionError, match="task ids differ"):
        outcome_matrix({"a": True}, {"b": True})


def test_outcomes_by_id_rejects_duplicates():
    from macomm.core import CommunicationTrace

    t = CommunicationTrace("a", SystemKind.SEQ_U, "m", (), None, False)
    assert outcomes_by_id([t]) == {"a": False}
    with pytest.raises(OcclusionError):
        outcomes_by_id([t, t])


# ---------------------------------------------------------------------------
# hooks and the experiment loop


def test_hooks_reuse_known_annotations_and_mask_copies():
    task = load_dataset(FIXTURES / "gsm8k_20.jsonl")[0]
    model = ScriptedModel()
    agents = default_agents("scripted")
    base = run_discussion(task, SystemKind.SEQ_U, agents, model)
    annotated = Annotator(model).annotate_trace(base)
    hook = OcclusionHook(Category.C2, annotator=None, known=known_annotations([annotated]))
    first = base.responses[0]
    assert MASK in hook.transform(first, "agent", None) or not any(
        s.label is Category.C2 for s in annotated.responses[0].spans
    )
    with pytest.raises(OcclusionError):
        hook.spans_for(AgentResponse(0, 1, "never seen"))
    ctrl = ControlHook(10)
    from macomm.orchestrator import Turn

    turn = Turn(task, SystemKind.SEQ_U, "agent", 1, 0, False)
    assert ctrl.transform(first, "agent", turn) == ctrl.transform(first, "agent", turn)
    assert MASK in ctrl.transform(first, "agent", turn)


def test_run_occlusion_end_to_end():
    tasks = load_dataset(FIXTURES / "gsm8k_20.jsonl")[:4]
    model = ScriptedModel()
    agents = default_agents("scripted")
    annot = Annotator(model)
    base = [annot.annotate_trace(run_discussion(t, SystemKind.SEQ_U, agents, model)) for t in tasks]
    traces, delta = run_occlusion(tasks, base, SystemKind.SEQ_U, model, Category.C2, annotator=annot, agents=agents)
    assert [t.task_id for t in traces] == [t.id for t in tasks]
    assert all(t.run_label == "occ-C2" for t in traces)
    assert delta.n_baseline == delta.n_perturbed == 4
    with pytest.raises(OcclusionError, match="profile"):
        run_occlusion(tasks, base, SystemKind.SEQ_U, model, "ctrl", agents=agents, parallelism=1)
    ctrl, _ = run_occlusion(tasks, base, SystemKind.SEQ_U, model, "ctrl", agents=agents,
                            profile=published_profile("Qwen2.5-Inst"))
    assert all(t.run_label == "ctrl" for t in ctrl)
    with pytest.raises(OcclusionError, match="no baseline"):
        run_occlusion(tasks, base[:2], SystemKind.SEQ_U, model, Category.C1, annotator=annot, agents=agents)
