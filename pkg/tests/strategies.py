"""Hypothesis strategies shared by the property suites."""

from __future__ import annotations

from hypothesis import strategies as st

from macomm.core import AgentResponse, Category, CommunicationTrace, Dataset, Span, Stance, SystemKind

categories = st.sampled_from(list(Category))
labels = st.one_of(st.none(), categories)

# printable text incl. multi-byte characters; "[MASK]" itself may appear in the raw text
_alphabet = st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00")
span_text = st.one_of(
    st.text(_alphabet, min_size=1, max_size=30),
    st.sampled_from(["Answer: 42", "[MASK]", "Let x = 3 × 4.", "Prüfung: ok", "数学", "Verification: 7 is prime."]),
)
separators = st.sampled_from(["", " ", "\n", "\n\n", "  ", "\t"])


@st.composite
def annotated_responses(draw, min_spans: int = 0, max_spans: int = 8) -> AgentResponse:
    pieces = draw(st.lists(st.tuples(separators, span_text, labels), min_size=min_spans, max_size=max_spans))
    tail = draw(separators)
    data = b""
    spans = []
    for i, (sep, text, label) in enumerate(pieces):
        data += sep.encode()
        start = len(data)
        data += text.encode()
        spans.append(Span(f"s{i + 1}", start, len(data), text, label))
    data += tail.encode()
    raw = data.decode()
    if raw.strip() and not spans:
        raw = ""
    return AgentResponse(
        agent_index=draw(st.integers(0, 2)),
        round=draw(st.integers(1, 3)),
        raw_text=raw,
        role=draw(st.sampled_from(["agent", "proposer", "critic", "planner", "judge", "voter"])),
        spans=tuple(spans),
        stance=draw(st.one_of(st.none(), st.sampled_from(list(Stance)))),
        vote=draw(st.one_of(st.none(), st.integers(0, 2))),
        retry_count=draw(st.integers(0, 3)),
        flags=tuple(draw(st.lists(st.sampled_from(["annotation_partial", "cara_unsatisfied"]), max_size=2))),
    )


@st.composite
def traces(draw) -> CommunicationTrace:
    return CommunicationTrace(
        task_id=draw(st.from_regex(r"[a-z0-9_]{1,12}", fullmatch=True)),
        system=draw(st.sampled_from(list(SystemKind))),
        model_id=draw(st.sampled_from(["Qwen2.5-Coder", "Qwen2.5-Inst", "scripted"])),
        responses=tuple(draw(st.lists(annotated_responses(), max_size=4))),
        final_answer=draw(st.one_of(st.none(), st.text(_alphabet, max_size=10))),
        outcome=draw(st.booleans()),
        run_label=draw(st.sampled_from(["baseline", "occ-C2", "ctrl", "cara+occ-C2"])),
        dataset=draw(st.one_of(st.none(), st.sampled_from(list(Dataset)))),
        termination=draw(st.sampled_from([None, "rounds_exhausted", "consensus", "judge_stop", "vote_complete"])),
        complete=draw(st.booleans()),
        flags=tuple(draw(st.lists(st.sampled_from(["judge_no_decision", "abstain: agent 1"]), max_size=2))),
    )


outcome_maps = st.dictionaries(
    st.from_regex(r"t[0-9]{1,3}", fullmatch=True), st.tuples(st.booleans(), st.booleans()), max_size=40
)
