"""Sentence segmentation, LLM-judge labeling, prevalence and agreement.

Offsets on every :class:`~macomm.core.Span` are UTF-8 byte offsets into the
response text; segmentation works on characters and converts at the end.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .backend import ChatModel, make_request
from .core import (
    CATEGORY_DEFINITIONS,
    DATASET_DOMAIN,
    AgentResponse,
    Category,
    CommunicationTrace,
    Span,
    SystemKind,
)
from .evaluation import percentage
from .prompts import DEFAULT_TEMPLATES, Templates, fill

log = logging.getLogger(__name__)

PARTIAL = "annotation_partial"
EMPTY_RANKING = "annotation_empty_ranking"
UNLABELED = "Unlabeled"

_FENCE_RE = re.compile(r"^\s*(```|~~~)")
_MARKER_LINE_RE = re.compile(r"^\s*\[[A-Z][A-Z0-9_ ]*\]\s*$")
_SENTENCE_END_RE = re.compile(r"[.!?][\"')\]]*(?=\s)")

RETRY_MESSAGE = (
    "Your previous output could not be used: {problems}. "
    "Return the complete JSON again, copying every span text exactly as it appears in the agent response."
)


class AnnotationError(RuntimeError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


# ---------------------------------------------------------------------------
# segmentation


class _ByteMap:
    def __init__(self, text: str):
        self.offsets = [0]
        for ch in text:
            self.offsets.append(self.offsets[-1] + len(ch.encode("utf-8")))

    def __getitem__(self, i: int) -> int:
        return self.offsets[i]


def _lines(text: str) -> list[tuple[int, int]]:
    """(start, end) char ranges of lines, end excluding the newline."""
    out, pos = [], 0
    for line in text.split("\n"):
        out.append((pos, pos + len(line)))
        pos += len(line) + 1
    return out


def _trimmed(text: str, a: int, b: int) -> tuple[int, int] | None:
    while a < b and text[a].isspace():
        a += 1
    while b > a and text[b - 1].isspace():
        b -= 1
    return (a, b) if a < b else None


def _split_sentences(text: str, a: int, b: int) -> list[tuple[int, int]]:
    out = []
    cursor = a
    for m in _SENTENCE_END_RE.finditer(text, a, b):
        r = _trimmed(text, cursor, m.end())
        if r:
            out.append(r)
        cursor = m.end()
    r = _trimmed(text, cursor, b)
    if r:
        out.append(r)
    return out


def segment_ranges(text: str) -> list[tuple[int, int]]:
    """Character ranges of sentence-level units.

    Sentences end at terminal punctuation followed by whitespace and at line
    breaks. A fenced block, a run of indented lines after a blank line, or a
    bracketed marker line such as ``[RESPONSES]`` is one unit.
    """
    lines = _lines(text)
    ranges: list[tuple[int, int]] = []
    i = 0
    prev_blank = True
    while i < len(lines):
        a, b = lines[i]
        line = text[a:b]
        if _FENCE_RE.match(line):
            fence = _FENCE_RE.match(line).group(1)
            j = i + 1
            while j < len(lines) and not text[lines[j][0]:lines[j][1]].strip().startswith(fence):
                j += 1
            end = lines[min(j, len(lines) - 1)][1]
            r = _trimmed(text, a, end)
            if r:
                ranges.append(r)
            i = j + 1
            prev_blank = False
            continue
        if prev_blank and line.strip() and (line.startswith("    ") or line.startswith("\t")):
            j = i
            while j + 1 < len(lines):
                nxt = text[lines[j + 1][0]:lines[j + 1][1]]
                if nxt.strip() and (nxt.startswith("    ") or nxt.startswith("\t")):
                    j += 1
                else:
                    break
            r = _trimmed(text, a, lines[j][1])
            if r:
                ranges.append(r)
            i = j + 1
            prev_blank = False
            continue
        if _MARKER_LINE_RE.match(line):
            r = _trimmed(text, a, b)
            if r:
                ranges.append(r)
        else:
            ranges.extend(_split_sentences(text, a, b))
        prev_blank = not line.strip()
        i += 1
    return ranges


def segment_sentences(text: str) -> list[Span]:
    """Unlabeled sentence spans covering every non-whitespace character of ``text``."""
    bm = _ByteMap(text)
    return [Span(f"s{k + 1}", bm[a], bm[b], text[a:b]) for k, (a, b) in enumerate(segment_ranges(text))]


def render_spans(spans: Sequence[Span]) -> str:
    return "\n".join(f"[{s.span_id}] {s.text}" for s in spans)


# ---------------------------------------------------------------------------
# payloads


@dataclass(frozen=True)
class PayloadEntry:
    span_id: str
    text: str
    categories: tuple[str, ...]
    ranking: tuple[str, ...]

    @property
    def top(self) -> Category | None:
        return Category.parse(self.ranking[0]) if self.ranking else None


@dataclass(frozen=True)
class AnnotationPayload:
    entries: tuple[PayloadEntry, ...]

    @classmethod
    def from_obj(cls, obj: object) -> "AnnotationPayload":
        if isinstance(obj, dict):
            obj = obj.get("annotated_response")
        if not isinstance(obj, list):
            raise ValueError("payload must contain an 'annotated_response' list")
        entries = []
        for k, item in enumerate(obj):
            if not isinstance(item, dict) or not isinstance(item.get("text"), str):
                raise ValueError(f"entry {k} has no text")
            cats = tuple(str(c) for c in item.get("categories") or ())
            ranking = tuple(str(c) for c in item.get("category_ranking") or ())
            entries.append(PayloadEntry(str(item.get("span_id", f"p{k + 1}")), item["text"], cats, ranking))
        return cls(tuple(entries))

    def to_obj(self) -> dict:
        return {
            "annotated_response": [
                {"span_id": e.span_id, "text": e.text, "categories": list(e.categories), "category_ranking": list(e.ranking)}
                for e in self.entries
            ]
        }


def parse_payload(raw: str) -> AnnotationPayload:
    """Parse judge output, tolerating code fences and prose around the JSON object."""
    text = raw.strip()
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise ValueError("no JSON object found")
    return AnnotationPayload.from_obj(json.loads(text[start:end + 1]))


@dataclass(frozen=True)
class PayloadViolation:
    code: str
    entry: int
    message: str

    def __str__(self) -> str:
        return f"entry {self.entry}: {self.code}: {self.message}"


def validate_payload(payload: AnnotationPayload, original: str) -> tuple[list[Span], list[PayloadViolation]]:
    """Locate each payload text left to right and label it with its top-ranked category.

    A text absent from the response is ``not found``; a text that only occurs
    before the matching cursor is ``overlap``.
    """
    bm = _ByteMap(original)
    spans: list[Span] = []
    problems: list[PayloadViolation] = []
    cursor = 0
    for k, e in enumerate(payload.entries):
        needle = e.text if e.text in original else e.text.strip()
        if not needle or needle not in original:
            problems.append(PayloadViolation("not found", k, repr(e.text[:60])))
            continue
        at = original.find(needle, cursor)
        if at < 0:
            problems.append(PayloadViolation("overlap", k, f"{e.text[:60]!r} only occurs before offset {cursor}"))
            continue
        for c in e.categories + e.ranking:
            try:
                Category.parse(c)
            except ValueError:
                problems.append(PayloadViolation("bad category", k, repr(c)))
                break
        else:
            if e.ranking and set(map(Category.parse, e.ranking)) != set(map(Category.parse, e.categories or e.ranking)):
                problems.append(PayloadViolation("ranking", k, "ranking is not a permutation of categories"))
                continue
            spans.append(Span(e.span_id, bm[at], bm[at + len(needle)], needle, e.top))
            cursor = at + len(needle)
    return spans, problems


def fill_gaps(original: str, spans: Sequence[Span]) -> list[Span]:
    """Add Unlabeled spans for uncovered non-whitespace text; result is ordered."""
    data = original.encode("utf-8")
    out: list[Span] = []
    cursor = 0
    gap_no = 0

    def gap(a: int, b: int) -> None:
        nonlocal gap_no
        piece = data[a:b].decode("utf-8")
        for ca, cb in segment_ranges(piece):
            gap_no += 1
            lead = len(piece[:ca].encode("utf-8"))
            out.append(Span(f"u{gap_no}", a + lead, a + lead + len(piece[ca:cb].encode("utf-8")), piece[ca:cb]))

    for s in sorted(spans, key=lambda s: s.start):
        if s.start > cursor:
            gap(cursor, s.start)
        out.append(s)
        cursor = max(cursor, s.end)
    if cursor < len(data):
        gap(cursor, len(data))
    return out


# ---------------------------------------------------------------------------
# the judge


def load_examples(templates: Templates = DEFAULT_TEMPLATES) -> list[dict]:
    return json.loads(templates.raw("fewshot.json"))


def render_definitions() -> str:
    return "\n".join(f"{c.value} ({c.title}): {CATEGORY_DEFINITIONS[c]}" for c in Category)


def render_examples(examples: Sequence[Mapping[str, str]]) -> str:
    lines = []
    for ex in examples:
        cat = Category.parse(ex["category"])
        lines.append(f"{cat.value} ({cat.title}): {ex['text']}")
    return "\n".join(lines)


@dataclass
class Annotator:
    """Labels responses with a chat model acting as judge."""

    model: ChatModel
    model_id: str = "gpt-4o"
    temperature: float = 0.0
    seed: int = 42
    templates: Templates = DEFAULT_TEMPLATES
    examples: Sequence[Mapping[str, str]] | None = None
    _system: str | None = field(default=None, init=False, repr=False)

    def system_prompt(self) -> str:
        if self._system is None:
            examples = self.examples if self.examples is not None else load_examples(self.templates)
            self._system = fill(
                self.templates["annotation.system"],
                {"definitions": render_definitions(), "examples": render_examples(examples)},
            )
        return self._system

    def __call__(self, response: AgentResponse) -> AgentResponse:
        return annotate_response(response, self)

    def annotate_trace(self, trace: CommunicationTrace) -> CommunicationTrace:
        responses = tuple(annotate_response(r, self) if r.participating else r for r in trace.responses)
        return dataclasses.replace(trace, responses=responses)


def annotate_response(response: AgentResponse, annotator: Annotator) -> AgentResponse:
    """Return ``response`` with labeled spans; the text itself is never changed."""
    text = response.raw_text
    segments = segment_sentences(text)
    if not segments:
        return dataclasses.replace(response, spans=())
    system = annotator.system_prompt()
    user = fill(annotator.templates["annotation.user"], {"spans": render_spans(segments)})
    request = make_request(annotator.model_id, system, user, annotator.temperature, annotator.seed)
    raw = annotator.model.complete(request).text
    spans, problems, error = _attempt(raw, text)
    if error or problems:
        issue = error or "; ".join(map(str, problems))
        retry = make_request(
            annotator.model_id,
            system,
            RETRY_MESSAGE.format(problems=issue),
            annotator.temperature,
            annotator.seed,
            history=(("user", user), ("assistant", raw)),
        )
        raw = annotator.model.complete(retry).text
        spans, problems, error = _attempt(raw, text)
        if error:
            raise AnnotationError(f"unparseable annotation payload: {error}", raw)
    flags: list[str] = []
    if problems:
        log.warning("response %d/%d: %d payload problems left unlabeled", response.round, response.agent_index, len(problems))
        flags.append(PARTIAL)
    if any(s.label is None for s in spans):
        flags.append(EMPTY_RANKING)
    full = fill_gaps(text, spans)
    if len(full) > len(spans) and PARTIAL not in flags:
        flags.append(PARTIAL)
    return response.with_spans(full, *flags)


def _attempt(raw: str, text: str) -> tuple[list[Span], list[PayloadViolation], str | None]:
    try:
        payload = parse_payload(raw)
    except (ValueError, json.JSONDecodeError) as exc:
        return [], [], str(exc)
    spans, problems = validate_payload(payload, text)
    return spans, problems, None


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class Prevalence:
    counts: Mapping[Category, int]
    total: int

    def percent(self, c: Category) -> float:
        return percentage(self.counts.get(c, 0), self.total)

    def as_row(self) -> list[float]:
        return [self.percent(c) for c in Category]


def prevalence(
    traces: Iterable[CommunicationTrace],
    system: SystemKind | None = None,
    task_group: str | None = None,
    model: str | None = None,
) -> Prevalence:
    """Share of participating responses with at least one span of each category."""
    counts: Counter[Category] = Counter()
    total = 0
    for t in traces:
        if system is not None and t.system is not system:
            continue
        if model is not None and t.model_id != model:
            continue
        if task_group is not None:
            if t.dataset is None or DATASET_DOMAIN[t.dataset].task_group != task_group:
                continue
        for r in t.participating:
            total += 1
            for c in {s.label for s in r.spans if s.label is not None}:
                counts[c] += 1
    if total == 0:
        raise ValueError("prevalence over zero responses")
    return Prevalence(dict(counts), total)


@dataclass(frozen=True)
class Agreement:
    accuracy: float
    kappa: float | None
    confusion: Mapping[tuple[str, str], int]
    labels: tuple[str, ...]

    def table(self) -> str:
        """Two-column summary followed by the confusion matrix (rows gold, columns predicted)."""
        kappa = "undefined" if self.kappa is None else f"{self.kappa:.4f}"
        out = ["metric,value", f"accuracy,{self.accuracy:.2f}", f"kappa,{kappa}", "", "gold\\pred," + ",".join(self.labels)]
        for g in self.labels:
            out.append(g + "," + ",".join(str(self.confusion.get((g, p), 0)) for p in self.labels))
        return "\n".join(out) + "\n"


def _label(x: object) -> str:
    if x is None:
        return UNLABELED
    if isinstance(x, Category):
        return x.value
    return str(x)


def agreement(gold: Sequence[object], predicted: Sequence[object]) -> Agreement:
    """Accuracy (percent) and Cohen's kappa; kappa is None when chance agreement is 1."""
    if len(gold) != len(predicted):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(predicted)} predicted")
    if not gold:
        raise ValueError("agreement over zero items")
    g = [_label(x) for x in gold]
    p = [_label(x) for x in predicted]
    n = len(g)
    confusion = Counter(zip(g, p))
    p_o = sum(1 for a, b in zip(g, p) if a == b) / n
    gc, pc = Counter(g), Counter(p)
    p_e = sum(gc[k] * pc[k] for k in gc) / (n * n)
    kappa = None if p_e == 1 else (p_o - p_e) / (1 - p_e)
    labels = tuple(sorted(set(g) | set(p)))
    return Agreement(100 * p_o, kappa, dict(confusion), labels)
