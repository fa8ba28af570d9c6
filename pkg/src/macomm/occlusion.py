"""Category and control occlusion of forwarded responses, plus attribution statistics."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import AgentResponse, Category, CommunicationTrace, Span, SystemKind, TaskInstance
from .orchestrator import BoundaryHook, Turn, run_discussion, run_many
from .stats import normal_sf

MASK = "[MASK]"
CONTROL = "control"

# Mean occluded span lengths (characters) measured on the original corpora.
PUBLISHED_SPAN_LENGTHS: dict[str, dict[Category, int]] = {
    "Qwen2.5-Inst": {Category.C1: 25, Category.C2: 551, Category.C3: 88, Category.C4: 139, Category.C5: 51},
    "Qwen2.5-Coder": {Category.C1: 24, Category.C2: 917, Category.C3: 112, Category.C4: 209, Category.C5: 67},
}

Annotator = Callable[[AgentResponse], AgentResponse]


class OcclusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# masking


def mask_response(response: AgentResponse, target: Category) -> AgentResponse:
    """Copy of ``response`` whose ``target`` spans read ``[MASK]``; spans are remapped."""
    if response.raw_text.strip() and not response.spans:
        raise OcclusionError("annotate first")
    data = response.raw_text.encode("utf-8")
    out = bytearray()
    spans: list[Span] = []
    cursor = 0
    for s in response.spans:
        out += data[cursor:s.start]
        start = len(out)
        piece = MASK.encode() if s.label is target else data[s.start:s.end]
        out += piece
        spans.append(dataclasses.replace(s, start=start, end=len(out), text=piece.decode("utf-8")))
        cursor = s.end
    out += data[cursor:]
    return dataclasses.replace(response, raw_text=out.decode("utf-8"), spans=tuple(spans))


def mask_category(response: AgentResponse, target: Category) -> str:
    """Forwarded text with every ``target`` span replaced by ``[MASK]``."""
    return mask_response(response, target).raw_text


def control_mask(text: str, length: int, seed: int) -> str:
    """Replace one random run of ``length`` characters with ``[MASK]``."""
    if length < 0:
        raise ValueError("control length must be >= 0")
    if length == 0 or not text:
        return text
    length = min(length, len(text))
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, len(text) - length + 1))
    return text[:start] + MASK + text[start + length:]


def derive_seed(*parts: object) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# span-length profiles


@dataclass(frozen=True)
class SpanLengthProfile:
    model_id: str
    lengths: Mapping[Category, int]
    flagged: tuple[Category, ...] = ()

    def __post_init__(self) -> None:
        for c, v in self.lengths.items():
            if v < 0:
                raise ValueError(f"negative span length for {c.value}")

    def __getitem__(self, c: Category) -> int:
        return self.lengths[c]

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "lengths": {c.value: self.lengths[c] for c in sorted(self.lengths)},
            "flagged": [c.value for c in self.flagged],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpanLengthProfile":
        return cls(
            d["model_id"],
            {Category.parse(k): int(v) for k, v in d["lengths"].items()},
            tuple(Category.parse(c) for c in d.get("flagged", ())),
        )

    def save(self, path: str | os.PathLike[str]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "SpanLengthProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def published_profile(model_id: str) -> SpanLengthProfile:
    if model_id not in PUBLISHED_SPAN_LENGTHS:
        raise KeyError(f"no published span lengths for {model_id!r}")
    return SpanLengthProfile(model_id, dict(PUBLISHED_SPAN_LENGTHS[model_id]))


def _round_half_up(x: Decimal) -> int:
    return int(x.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def avg_span_length(traces: Iterable[CommunicationTrace], model_id: str | None = None) -> SpanLengthProfile:
    """Mean character length of each category's spans; missing categories get 0 and a flag."""
    totals = {c: 0 for c in Category}
    counts = {c: 0 for c in Category}
    seen_model = None
    for t in traces:
        if model_id is not None and t.model_id != model_id:
            continue
        seen_model = seen_model or t.model_id
        for r in t.participating:
            for s in r.spans:
                if s.label is not None:
                    totals[s.label] += len(s.text)
                    counts[s.label] += 1
    lengths = {c: _round_half_up(Decimal(totals[c]) / counts[c]) if counts[c] else 0 for c in Category}
    flagged = tuple(c for c in Category if not counts[c])
    return SpanLengthProfile(model_id or seen_model or "unknown", lengths, flagged)


# ---------------------------------------------------------------------------
# hooks


class OcclusionHook(BoundaryHook):
    """Masks the target category in forwarded copies.

    Responses whose text already has a baseline annotation reuse it; new
    texts are annotated on demand with ``annotator``.
    """

    def __init__(self, target: Category, annotator: Annotator | None, known: Mapping[str, tuple[Span, ...]] | None = None):
        self.target = target
        self.annotator = annotator
        self.known = known or {}
        self.fresh: dict[str, tuple[Span, ...]] = {}
        self._lock = threading.Lock()

    def spans_for(self, response: AgentResponse) -> tuple[Span, ...]:
        text = response.raw_text
        if text in self.known:
            return self.known[text]
        with self._lock:
            if text not in self.fresh:
                if self.annotator is None:
                    raise OcclusionError("annotate first")
                self.fresh[text] = self.annotator(response).spans
            return self.fresh[text]

    def annotated(self, response: AgentResponse) -> AgentResponse:
        if response.spans:
            return response
        return dataclasses.replace(response, spans=self.spans_for(response))

    def transform(self, response: AgentResponse, destination: str, turn: Turn) -> str:
        if not response.raw_text:
            return ""
        return mask_category(self.annotated(response), self.target)


class ControlHook(BoundaryHook):
    """Masks one random run of ``length`` characters per forwarded copy."""

    def __init__(self, length: int, run_label: str = CONTROL):
        if length < 0:
            raise ValueError("control length must be >= 0")
        self.length = length
        self.run_label = run_label

    def transform(self, response: AgentResponse, destination: str, turn: Turn) -> str:
        seed = derive_seed(self.run_label, turn.task.id, response.round, response.agent_index, response.role)
        return control_mask(response.raw_text, self.length, seed)


def run_label_for(target: Category | str) -> str:
    if isinstance(target, Category):
        return f"occ-{target.value}"
    if str(target).lower() in (CONTROL, "ctrl"):
        return "ctrl"
    return f"occ-{Category.parse(str(target)).value}"


def known_annotations(traces: Iterable[CommunicationTrace]) -> dict[str, tuple[Span, ...]]:
    known: dict[str, tuple[Span, ...]] = {}
    for t in traces:
        for r in t.responses:
            if r.spans:
                known.setdefault(r.raw_text, r.spans)
    return known


# ---------------------------------------------------------------------------
# statistics


def two_prop_ztest(k1: int, n1: int, k2: int, n2: int) -> tuple[float, float]:
    """Pooled two-proportion z-test of ``k1/n1`` against ``k2/n2``; returns ``(z, two-sided p)``."""
    if n1 <= 0 or n2 <= 0:
        raise ValueError("sample sizes must be positive")
    if not (0 <= k1 <= n1 and 0 <= k2 <= n2):
        raise ValueError("successes must lie in [0, n]")
    pooled = (k1 + k2) / (n1 + n2)
    if pooled in (0.0, 1.0):
        return 0.0, 1.0
    se = (pooled * (1 - pooled) * (1 / n1 + 1 / n2)) ** 0.5
    z = (k1 / n1 - k2 / n2) / se
    return z, min(1.0, 2 * normal_sf(abs(z)))


def accuracy_delta(perturbed: float, baseline: float, digits: int = 2) -> float:
    """Perturbed minus baseline accuracy in points, rounded half-up."""
    d = Decimal(repr(perturbed)) - Decimal(repr(baseline))
    return float(d.quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class OcclusionDelta:
    baseline: float
    perturbed: float
    delta: float
    z: float
    p: float
    significant: bool
    k_baseline: int = 0
    n_baseline: int = 0
    k_perturbed: int = 0
    n_perturbed: int = 0

    @classmethod
    def from_counts(cls, k_perturbed: int, n_perturbed: int, k_baseline: int, n_baseline: int) -> "OcclusionDelta":
        z, p = two_prop_ztest(k_perturbed, n_perturbed, k_baseline, n_baseline)
        b = 100 * k_baseline / n_baseline
        pert = 100 * k_perturbed / n_perturbed
        return cls(b, pert, pert - b, z, p, p < 0.05, k_baseline, n_baseline, k_perturbed, n_perturbed)

    @classmethod
    def from_outcomes(cls, baseline: Sequence[bool], perturbed: Sequence[bool]) -> "OcclusionDelta":
        return cls.from_counts(sum(map(bool, perturbed)), len(perturbed), sum(map(bool, baseline)), len(baseline))

    def cell(self, digits: int = 2) -> str:
        """Signed delta with a trailing ``*`` when significant."""
        q = Decimal(repr(self.delta)).quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP)
        if q == 0:
            q = abs(q)
        sign = "+" if q > 0 else ""
        return f"{sign}{q}{'*' if self.significant else ''}"


@dataclass(frozen=True)
class OutcomeMatrix:
    TT: int
    TF: int
    FT: int
    FF: int
    ids: Mapping[str, tuple[str, ...]] = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.TT + self.TF + self.FT + self.FF

    def group(self, name: str) -> tuple[str, ...]:
        return tuple(self.ids.get(name.upper(), ()))

    def to_dict(self) -> dict:
        return {"TT": self.TT, "TF": self.TF, "FT": self.FT, "FF": self.FF, "ids": {k: list(v) for k, v in self.ids.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeMatrix":
        return cls(d["TT"], d["TF"], d["FT"], d["FF"], {k: tuple(v) for k, v in d.get("ids", {}).items()})


def outcome_matrix(baseline: Mapping[str, bool], perturbed: Mapping[str, bool]) -> OutcomeMatrix:
    """Pair outcomes by task id into TT/TF/FT/FF (first letter = baseline)."""
    missing_p = sorted(set(baseline) - set(perturbed))
    missing_b = sorted(set(perturbed) - set(baseline))
    if missing_p or missing_b:
        raise OcclusionError(f"task ids differ: missing from perturbed {missing_p}, missing from baseline {missing_b}")
    cells: dict[str, list[str]] = {"TT": [], "TF": [], "FT": [], "FF": []}
    for tid in sorted(baseline):
        key = ("T" if baseline[tid] else "F") + ("T" if perturbed[tid] else "F")
        cells[key].append(tid)
    return OutcomeMatrix(*(len(cells[k]) for k in ("TT", "TF", "FT", "FF")), {k: tuple(v) for k, v in cells.items()})


def outcomes_by_id(traces: Iterable[CommunicationTrace]) -> dict[str, bool]:
    out: dict[str, bool] = {}
    for t in traces:
        if t.task_id in out:
            raise OcclusionError(f"duplicate task id {t.task_id!r}")
        out[t.task_id] = t.outcome
    return out


# ---------------------------------------------------------------------------
# experiment


def run_occlusion(
    tasks: Sequence[TaskInstance],
    baseline: Sequence[CommunicationTrace],
    kind: SystemKind,
    model,
    target: Category | str,
    annotator: Annotator | None = None,
    profile: SpanLengthProfile | None = None,
    control_category: Category = Category.C2,
    agents=None,
    parallelism: int = 4,
    **kwargs,
) -> tuple[list[CommunicationTrace], OcclusionDelta]:
    """Re-run every task with forwarded copies masked, then compare against the baseline."""
    base_by_id = {t.task_id: t for t in baseline if t.system is kind}
    missing = [t.id for t in tasks if t.id not in base_by_id]
    if missing:
        raise OcclusionError(f"no baseline trace for tasks {missing}")
    label = run_label_for(target)
    known = known_annotations(baseline)

    def one(task: TaskInstance) -> CommunicationTrace:
        if label == "ctrl":
            if profile is None:
                raise OcclusionError("control occlusion needs a span-length profile")
            hook: BoundaryHook = ControlHook(profile[control_category], label)
        else:
            hook = OcclusionHook(Category.parse(str(target.value if isinstance(target, Category) else target)), annotator, known)
        trace = run_discussion(task, kind, agents, model, hook, run_label=label, **kwargs)
        if isinstance(hook, OcclusionHook):
            responses = []
            for r in trace.responses:
                spans = hook.known.get(r.raw_text) or hook.fresh.get(r.raw_text)
                responses.append(r if r.spans or not spans else dataclasses.replace(r, spans=spans))
            trace = dataclasses.replace(trace, responses=tuple(responses))
        return trace

    traces = run_many(tasks, one, parallelism)
    delta = OcclusionDelta.from_outcomes(
        [base_by_id[t.id].outcome for t in tasks], [tr.outcome for tr in traces]
    )
    return traces, delta
