"""Category-aware recovery: prompt augmentation plus keyword verification with bounded retries."""

from __future__ import annotations

import dataclasses
import re
import threading
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .backend import ChatModel, ChatRequest
from .core import MAX_RETRIES, AgentResponse, CommunicationTrace, SystemKind, TaskInstance
from .evaluation import percentage
from .orchestrator import BoundaryHook, Turn, run_discussion, run_many
from .prompts import DEFAULT_TEMPLATES, Templates, fill

REASONING = "Reasoning"
VERIFICATION = "Verification"
REFERENCE = "Reference"
COMPONENTS = (REASONING, VERIFICATION, REFERENCE)
UNSATISFIED = "cara_unsatisfied"

_KEYWORD_RE = {c: re.compile(rf"(?<!\S){c}:") for c in COMPONENTS}


def requirements(participating: bool, has_prior: bool) -> frozenset[str]:
    if not participating:
        return frozenset()
    req = {REASONING, VERIFICATION}
    if has_prior:
        req.add(REFERENCE)
    return frozenset(req)


def requirements_for(turn: Turn) -> frozenset[str]:
    return requirements(turn.participating, turn.has_prior)


def check_missing(text: str, required: Iterable[str]) -> frozenset[str]:
    """Required components whose ``Keyword:`` does not appear (case-sensitive, after whitespace or at start)."""
    required = frozenset(required)
    unknown = required - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}")
    return frozenset(c for c in required if not _KEYWORD_RE[c].search(text))


def ordered(components: Iterable[str]) -> list[str]:
    comps = set(components)
    return [c for c in COMPONENTS if c in comps]


def _blocks(templates: Templates) -> tuple[str, str]:
    return templates["cara.initial"], templates["cara.prior"]


def strip_augmentation(prompt: str, templates: Templates = DEFAULT_TEMPLATES) -> str:
    for block in _blocks(templates):
        suffix = "\n\n" + block
        if prompt.endswith(suffix):
            return prompt[: -len(suffix)]
    return prompt


def augment_prompt(prompt: str, has_prior: bool, templates: Templates = DEFAULT_TEMPLATES) -> str:
    """Append the requirement block; re-augmenting replaces the block instead of stacking it."""
    initial, prior = _blocks(templates)
    return strip_augmentation(prompt, templates) + "\n\n" + (prior if has_prior else initial)


def build_correction(missing: Iterable[str], templates: Templates = DEFAULT_TEMPLATES) -> str:
    names = ordered(missing)
    if not names:
        raise ValueError("correction needs at least one missing component")
    return fill(templates["cara.correction"], {"missing": ", ".join(names)})


@dataclass(frozen=True)
class Attempt:
    text: str
    missing: frozenset[str]


@dataclass(frozen=True)
class RecoveryRecord:
    task_id: str
    round: int
    agent_index: int
    role: str
    required: frozenset[str]
    attempts: tuple[Attempt, ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.attempts) <= MAX_RETRIES + 1:
            raise ValueError(f"{len(self.attempts)} attempts outside [1, {MAX_RETRIES + 1}]")

    @property
    def retry_count(self) -> int:
        return len(self.attempts) - 1

    @property
    def satisfied(self) -> bool:
        return not self.attempts[-1].missing

    @property
    def final_text(self) -> str:
        return self.attempts[-1].text

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "round": self.round,
            "agent_index": self.agent_index,
            "role": self.role,
            "required": ordered(self.required),
            "attempts": [{"text": a.text, "missing": ordered(a.missing)} for a in self.attempts],
            "retry_count": self.retry_count,
            "satisfied": self.satisfied,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecoveryRecord":
        return cls(
            d["task_id"],
            d["round"],
            d["agent_index"],
            d["role"],
            frozenset(d["required"]),
            tuple(Attempt(a["text"], frozenset(a["missing"])) for a in d["attempts"]),
        )


class CaraHook(BoundaryHook):
    """Augments participating agents' system prompts and re-invokes them until compliant."""

    def __init__(self, max_retries: int = MAX_RETRIES, templates: Templates = DEFAULT_TEMPLATES, inner: BoundaryHook | None = None):
        if not 0 <= max_retries <= MAX_RETRIES:
            raise ValueError(f"max_retries must be in [0, {MAX_RETRIES}]")
        self.max_retries = max_retries
        self.templates = templates
        self.inner = inner
        self.records: list[RecoveryRecord] = []
        self._lock = threading.Lock()

    def system_prompt(self, prompt: str, turn: Turn) -> str:
        if not turn.participating:
            return prompt
        return augment_prompt(prompt, turn.has_prior, self.templates)

    def post_generate(self, response: AgentResponse, turn: Turn, request: ChatRequest, model: ChatModel) -> AgentResponse:
        required = requirements_for(turn)
        text = response.raw_text
        missing = check_missing(text, required)
        attempts = [Attempt(text, missing)]
        while missing and len(attempts) <= self.max_retries:
            followup = ChatRequest(
                request.model_id,
                request.system_prompt,
                request.messages + (("assistant", text), ("user", build_correction(missing, self.templates))),
                request.params,
            )
            text = model.complete(followup).text
            missing = check_missing(text, required)
            attempts.append(Attempt(text, missing))
        record = RecoveryRecord(turn.task.id, turn.round, turn.agent_index, turn.role, required, tuple(attempts))
        with self._lock:
            self.records.append(record)
        flags = response.flags + ((UNSATISFIED,) if missing else ())
        return dataclasses.replace(response, raw_text=text, retry_count=record.retry_count, flags=flags)

    def transform(self, response: AgentResponse, destination: str, turn: Turn) -> str:
        if self.inner is not None:
            return self.inner.transform(response, destination, turn)
        return response.raw_text


def run_with_recovery(
    task: TaskInstance,
    kind: SystemKind,
    agents,
    model: ChatModel,
    max_retries: int = MAX_RETRIES,
    inner: BoundaryHook | None = None,
    **kwargs,
) -> tuple[CommunicationTrace, list[RecoveryRecord]]:
    hook = CaraHook(max_retries, kwargs.get("templates", DEFAULT_TEMPLATES), inner)
    kwargs.setdefault("run_label", "cara")
    trace = run_discussion(task, kind, agents, model, hook, **kwargs)
    return trace, hook.records


def run_cara(
    tasks: Sequence[TaskInstance],
    kind: SystemKind,
    model: ChatModel,
    agents=None,
    parallelism: int = 4,
    **kwargs,
) -> tuple[list[CommunicationTrace], list[RecoveryRecord]]:
    results = run_many(tasks, lambda t: run_with_recovery(t, kind, agents, model, **kwargs), parallelism)
    traces = [r[0] for r in results]
    records = [rec for r in results for rec in r[1]]
    return traces, records


def select_targets(tasks: Sequence[TaskInstance], group_ids: Iterable[str] | None) -> list[TaskInstance]:
    """Tasks in the given outcome groups; all tasks when no groups are given (ablation mode)."""
    if group_ids is None:
        return list(tasks)
    wanted = set(group_ids)
    return [t for t in tasks if t.id in wanted]


@dataclass(frozen=True)
class RecoveryRate:
    group: str
    recovered: int
    total: int
    recovered_ids: tuple[str, ...] = ()

    @property
    def rate(self) -> float | None:
        """Percentage with one decimal, or None when the group is empty."""
        if self.total == 0:
            return None
        return percentage(self.recovered, self.total, 1)

    def cell(self) -> str:
        r = self.rate
        return "n/a" if r is None else f"{r:.1f}"


def recovery_rate(group: str, members: Iterable[str], after: Mapping[str, bool]) -> RecoveryRate:
    """Share of ``members`` (a TF or FF group) whose post-CARA outcome is correct."""
    ids = sorted(set(members))
    absent = [i for i in ids if i not in after]
    if absent:
        raise ValueError(f"no post-recovery outcome for {absent}")
    recovered = tuple(i for i in ids if after[i])
    return RecoveryRate(group.upper(), len(recovered), len(ids), recovered)


def rate_from_counts(recovered: int, total: int) -> float | None:
    if not 0 <= recovered <= total:
        raise ValueError("recovered must lie in [0, total]")
    return RecoveryRate("", recovered, total).rate
