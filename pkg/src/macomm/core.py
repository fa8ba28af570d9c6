"""Domain model, trace validation and JSONL trace storage."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

log = logging.getLogger(__name__)

TRACE_FORMAT_VERSION = 1
MAX_RETRIES = 3
MAX_ROUNDS = 3
MAX_AGENTS = 3


class Category(str, Enum):
    """Information category of a sentence span."""

    C1 = "C1"
    C2 = "C2"
    C3 = "C3"
    C4 = "C4"
    C5 = "C5"

    @property
    def title(self) -> str:
        return CATEGORY_TITLES[self]

    @property
    def rank(self) -> int:
        return int(self.value[1])

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, Category):
            return NotImplemented
        return self.rank < other.rank

    @classmethod
    def parse(cls, value: str) -> "Category":
        """Accept ``C2``, ``Reasoning``, ``C2 Reasoning`` or ``C2 (Reasoning)``."""
        raw = value.strip()
        head = raw.split()[0].strip("():,.").upper() if raw else ""
        if head in cls.__members__:
            return cls[head]
        lowered = raw.lower().strip("():,. ")
        for cat, title in CATEGORY_TITLES.items():
            if lowered == title.lower():
                return cat
        raise ValueError(f"unknown category {value!r}")


CATEGORY_TITLES = {
    Category.C1: "Answer",
    Category.C2: "Reasoning",
    Category.C3: "Verification",
    Category.C4: "Reference",
    Category.C5: "Unchanged",
}

CATEGORY_DEFINITIONS = {
    Category.C1: (
        "The final answer or decision the agent commits to, usually introduced "
        "by a marker like \"Answer:\"."
    ),
    Category.C2: (
        "Step-by-step derivation; each sentence adds information that moves "
        "toward the answer."
    ),
    Category.C3: (
        "A check of earlier reasoning or of a derived answer, for example "
        "recomputing a value or confirming that a conclusion still holds."
    ),
    Category.C4: (
        "An explicit mention of another agent's answer or reasoning, whether to "
        "endorse it, dispute it or extend it."
    ),
    Category.C5: (
        "A statement that the answer stays the same as before, such as saying "
        "no changes are needed."
    ),
}


class Dataset(str, Enum):
    GSM8K = "GSM8K"
    MATH500 = "MATH500"
    MMLU = "MMLU"
    STRATEGYQA = "StrategyQA"
    CRUXEVAL_CIP = "CRUXEval-CIP"
    CRUXEVAL_COP = "CRUXEval-COP"
    LCB_CIP = "LCB-CIP"
    LCB_COP = "LCB-COP"

    @classmethod
    def parse(cls, value: str) -> "Dataset":
        key = value.strip().lower().replace("_", "-")
        for ds in cls:
            if ds.value.lower() == key:
                return ds
        raise ValueError(f"unknown dataset {value!r}")


class Domain(str, Enum):
    MATH = "Math"
    QNA = "QnA"
    CODE_INPUT = "CodeInput"
    CODE_OUTPUT = "CodeOutput"

    @property
    def is_code(self) -> bool:
        return self in (Domain.CODE_INPUT, Domain.CODE_OUTPUT)

    @property
    def task_group(self) -> str:
        """Reporting column: Math, QnA or Code."""
        return "Code" if self.is_code else self.value


DATASET_DOMAIN = {
    Dataset.GSM8K: Domain.MATH,
    Dataset.MATH500: Domain.MATH,
    Dataset.MMLU: Domain.QNA,
    Dataset.STRATEGYQA: Domain.QNA,
    Dataset.CRUXEVAL_CIP: Domain.CODE_INPUT,
    Dataset.LCB_CIP: Domain.CODE_INPUT,
    Dataset.CRUXEVAL_COP: Domain.CODE_OUTPUT,
    Dataset.LCB_COP: Domain.CODE_OUTPUT,
}


class SystemKind(str, Enum):
    SEQ_U = "SeqU"
    SEQ_R = "SeqR"
    DEBATE = "Debate"
    CRMC = "CRMC"
    CRSV = "CRSV"

    @property
    def label(self) -> str:
        return SYSTEM_LABELS[self]

    @classmethod
    def parse(cls, value: str) -> "SystemKind":
        key = value.strip().lower().replace("-", "").replace("_", "")
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise ValueError(f"unknown system {value!r}")


SYSTEM_LABELS = {
    SystemKind.SEQ_U: "Seq-U",
    SystemKind.SEQ_R: "Seq-R",
    SystemKind.DEBATE: "Debate",
    SystemKind.CRMC: "CR-MC",
    SystemKind.CRSV: "CR-SV",
}


class Stance(str, Enum):
    AGREE = "AGREE"
    DISAGREE = "DISAGREE"


# Roles that do not take part in refinement rounds.
NON_PARTICIPATING_ROLES = frozenset({"judge", "voter"})


@dataclass(frozen=True)
class TaskInstance:
    id: str
    dataset: Dataset
    body: str
    reference: str
    choices: tuple[str, ...] = ()

    @property
    def domain(self) -> Domain:
        return DATASET_DOMAIN[self.dataset]

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("task id must be non-empty")
        if not self.body.strip():
            raise ValueError(f"task {self.id}: body must be non-empty")
        if not str(self.reference).strip():
            raise ValueError(f"task {self.id}: reference must be non-empty")


@dataclass(frozen=True)
class AgentConfig:
    agent_index: int
    role: str
    temperature: float = 0.7
    seed: int | None = None
    model_id: str = "default"

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.seed is None:
            object.__setattr__(self, "seed", 42 + self.agent_index)


def default_agents(model_id: str, roles: Sequence[str] = ("agent", "agent", "agent")) -> list[AgentConfig]:
    """Three participating agents with seeds 42, 43, 44 at temperature 0.7."""
    return [AgentConfig(i, role, 0.7, 42 + i, model_id) for i, role in enumerate(roles)]


def judge_config(model_id: str, agent_index: int = 2) -> AgentConfig:
    return AgentConfig(agent_index, "judge", 0.0, 42 + agent_index, model_id)


@dataclass(frozen=True)
class Span:
    """A labelled region of a response; ``start``/``end`` are UTF-8 byte offsets."""

    span_id: str
    start: int
    end: int
    text: str
    label: Category | None = None

    @property
    def char_range(self) -> tuple[int, int]:
        return (self.start, self.end)

    def relabel(self, label: Category | None) -> "Span":
        return dataclasses.replace(self, label=label)


@dataclass(frozen=True)
class AgentResponse:
    agent_index: int
    round: int
    raw_text: str
    role: str = "agent"
    spans: tuple[Span, ...] = ()
    stance: Stance | None = None
    vote: int | None = None
    retry_count: int = 0
    flags: tuple[str, ...] = ()

    @property
    def participating(self) -> bool:
        return self.role not in NON_PARTICIPATING_ROLES

    @property
    def annotated(self) -> bool:
        return any(s.label is not None for s in self.spans)

    def with_spans(self, spans: Iterable[Span], *flags: str) -> "AgentResponse":
        return dataclasses.replace(self, spans=tuple(spans), flags=self.flags + tuple(flags))


@dataclass(frozen=True)
class CommunicationTrace:
    task_id: str
    system: SystemKind
    model_id: str
    responses: tuple[AgentResponse, ...]
    final_answer: str | None
    outcome: bool
    run_label: str = "baseline"
    dataset: Dataset | None = None
    termination: str | None = None
    complete: bool = True
    flags: tuple[str, ...] = ()

    @property
    def participating(self) -> list[AgentResponse]:
        return [r for r in self.responses if r.participating]


@dataclass
class RunManifest:
    trace_path: str
    count: int
    config: dict[str, Any] = field(default_factory=dict)
    created_at: str = ""
    stage: str = ""
    inputs: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def write(self, path: str | os.PathLike[str]) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike[str]) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def manifest_path(trace_path: str | os.PathLike[str]) -> Path:
    p = Path(trace_path)
    return p.with_name(p.name + ".manifest.json")


def timestamp() -> str:
    """UTC timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible manifests."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    response: int | None = None
    span: int | None = None

    def __str__(self) -> str:
        where = []
        if self.response is not None:
            where.append(f"response {self.response}")
        if self.span is not None:
            where.append(f"span {self.span}")
        prefix = f"[{', '.join(where)}] " if where else ""
        return f"{prefix}{self.code}: {self.message}"


def span_violations(raw_text: str, spans: Sequence[Span], response: int | None = None) -> list[Violation]:
    data = raw_text.encode("utf-8")
    out: list[Violation] = []
    prev_end = -1
    for j, s in enumerate(spans):
        if s.start < 0 or s.end > len(data) or s.start > s.end:
            out.append(Violation("range out of bounds", f"[{s.start}, {s.end}) vs {len(data)} bytes", response, j))
            continue
        try:
            actual = data[s.start:s.end].decode("utf-8")
        except UnicodeDecodeError:
            out.append(Violation("text mismatch", "range splits a multi-byte character", response, j))
        else:
            if actual != s.text:
                out.append(Violation("text mismatch", f"expected {s.text[:40]!r}, found {actual[:40]!r}", response, j))
        if s.start < prev_end:
            out.append(Violation("overlap", f"span starts at {s.start} before previous end {prev_end}", response, j))
        prev_end = max(prev_end, s.end)
    return out


def validate_trace(trace: CommunicationTrace) -> list[Violation]:
    """Return every invariant violation of ``trace``; an empty list means ok."""
    out: list[Violation] = []
    last_round = 0
    participating = 0
    agents: set[int] = set()
    for i, r in enumerate(trace.responses):
        if r.round < 1:
            out.append(Violation("round", f"round {r.round} < 1", i))
        if r.round < last_round:
            out.append(Violation("order", f"round {r.round} after round {last_round}", i))
        last_round = max(last_round, r.round)
        if not 0 <= r.retry_count <= MAX_RETRIES:
            out.append(Violation("retry_count", f"{r.retry_count} outside [0, {MAX_RETRIES}]", i))
        if r.stance is not None and not (trace.system is SystemKind.CRMC and r.round >= 2 and r.participating):
            out.append(Violation("stance", "stance only allowed in CR-MC rounds >= 2", i))
        if r.vote is not None and not (trace.system is SystemKind.CRSV and r.role == "voter"):
            out.append(Violation("vote", "vote only allowed in the CR-SV voting turn", i))
        if r.round > MAX_ROUNDS:
            out.append(Violation("round", f"round {r.round} exceeds {MAX_ROUNDS}", i))
        if r.participating:
            participating += 1
            agents.add(r.agent_index)
        out.extend(span_violations(r.raw_text, r.spans, i))
    if len(agents) > MAX_AGENTS:
        out.append(Violation("agents", f"{len(agents)} participating agents > {MAX_AGENTS}"))
    if participating > MAX_AGENTS * MAX_ROUNDS:
        out.append(Violation("turns", f"{participating} participating responses > {MAX_AGENTS * MAX_ROUNDS}"))
    return out


# ---------------------------------------------------------------------------
# serialisation


def span_to_dict(s: Span) -> dict[str, Any]:
    return {
        "span_id": s.span_id,
        "start": s.start,
        "end": s.end,
        "text": s.text,
        "label": s.label.value if s.label else None,
    }


def span_from_dict(d: dict[str, Any]) -> Span:
    label = d.get("label")
    return Span(d["span_id"], int(d["start"]), int(d["end"]), d["text"], Category(label) if label else None)


def response_to_dict(r: AgentResponse) -> dict[str, Any]:
    return {
        "agent_index": r.agent_index,
        "round": r.round,
        "role": r.role,
        "raw_text": r.raw_text,
        "spans": [span_to_dict(s) for s in r.spans],
        "stance": r.stance.value if r.stance else None,
        "vote": r.vote,
        "retry_count": r.retry_count,
        "flags": list(r.flags),
    }


def response_from_dict(d: dict[str, Any]) -> AgentResponse:
    return AgentResponse(
        agent_index=int(d["agent_index"]),
        round=int(d["round"]),
        raw_text=d["raw_text"],
        role=d.get("role", "agent"),
        spans=tuple(span_from_dict(s) for s in d.get("spans", ())),
        stance=Stance(d["stance"]) if d.get("stance") else None,
        vote=d.get("vote"),
        retry_count=int(d.get("retry_count", 0)),
        flags=tuple(d.get("flags", ())),
    )


def trace_to_dict(t: CommunicationTrace) -> dict[str, Any]:
    return {
        "version": TRACE_FORMAT_VERSION,
        "task_id": t.task_id,
        "dataset": t.dataset.value if t.dataset else None,
        "system": t.system.value,
        "model_id": t.model_id,
        "run_label": t.run_label,
        "responses": [response_to_dict(r) for r in t.responses],
        "final_answer": t.final_answer,
        "outcome": t.outcome,
        "termination": t.termination,
        "complete": t.complete,
        "flags": list(t.flags),
    }


def trace_from_dict(d: dict[str, Any]) -> CommunicationTrace:
    if d.get("version", TRACE_FORMAT_VERSION) != TRACE_FORMAT_VERSION:
        raise ValueError(f"unsupported trace format version {d['version']!r}")
    return CommunicationTrace(
        task_id=d["task_id"],
        system=SystemKind(d["system"]),
        model_id=d["model_id"],
        responses=tuple(response_from_dict(r) for r in d["responses"]),
        final_answer=d.get("final_answer"),
        outcome=bool(d["outcome"]),
        run_label=d.get("run_label", "baseline"),
        dataset=Dataset(d["dataset"]) if d.get("dataset") else None,
        termination=d.get("termination"),
        complete=bool(d.get("complete", True)),
        flags=tuple(d.get("flags", ())),
    )


def dumps_trace(t: CommunicationTrace) -> str:
    return json.dumps(trace_to_dict(t), ensure_ascii=False, sort_keys=True)


class TraceFormatError(ValueError):
    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class TraceWriter:
    """Append-only, single-writer trace sink; one JSON record per line."""

    def __init__(self, path: str | os.PathLike[str], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a" if append else "w", encoding="utf-8", newline="\n")
        self._lock = threading.Lock()
        self.count = 0

    def write(self, trace: CommunicationTrace) -> None:
        line = dumps_trace(trace)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            self.count += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def write_traces(
    traces: Iterable[CommunicationTrace],
    path: str | os.PathLike[str],
    config: dict[str, Any] | None = None,
    stage: str = "",
    inputs: Sequence[str] = (),
    append: bool = False,
) -> RunManifest:
    with TraceWriter(path, append=append) as w:
        for t in traces:
            w.write(t)
    return RunManifest(
        trace_path=str(path),
        count=w.count,
        config=dict(config or {}),
        created_at=timestamp(),
        stage=stage,
        inputs=list(inputs),
    )


def read_traces(
    path: str | os.PathLike[str],
    strict: bool = True,
    warnings: list[str] | None = None,
) -> list[CommunicationTrace]:
    """Load traces; with ``strict=False`` malformed lines are skipped and reported.

    Span texts are re-checked against ``raw_text`` for every record.
    """
    out: list[CommunicationTrace] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                trace = trace_from_dict(json.loads(line))
                bad = [v for i, r in enumerate(trace.responses) for v in span_violations(r.raw_text, r.spans, i)]
                if bad:
                    raise ValueError(f"unrecoverable span: {bad[0]}")
            except (ValueError, KeyError, TypeError) as exc:
                err = TraceFormatError(str(path), lineno, str(exc))
                if strict:
                    raise err from exc
                log.warning("%s", err)
                if warnings is not None:
                    warnings.append(str(err))
                continue
            out.append(trace)
    return out
