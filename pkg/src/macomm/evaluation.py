"""Answer extraction, canonicalisation, scoring and dataset loading."""

from __future__ import annotations

import ast
import json
import os
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Callable, Iterable, Sequence

from .core import DATASET_DOMAIN, Dataset, Domain, TaskInstance
from .prompts import DEFAULT_TEMPLATES, Templates

ANSWER_MARKERS = ("Answer:", "My Final Answer is", "Judge Decision:", "Vote:")
_MARKER_RE = re.compile(
    r"(?:\*\*)?(Answer:|My Final Answer is:?|Judge Decision:|Vote:)(?:\*\*)?", re.IGNORECASE
)
_NUMBER_RE = re.compile(r"^[-+]?(?:\d[\d,]*(?:\.\d*)?|\.\d+)(?:e[-+]?\d+)?$", re.IGNORECASE)
_LEADING_NUMBER_RE = re.compile(r"^([-+]?(?:\d[\d,]*(?:\.\d+)?|\.\d+))\s*[A-Za-z%]*\.?$")
_BOXED_RE = re.compile(r"\\boxed\{((?:[^{}]|\{[^{}]*\})*)\}")
_LETTER_RE = re.compile(r"^\(?([A-Da-d])\)?[.:)]?(?:\s+(.*))?$", re.S)


@dataclass(frozen=True)
class CanonicalAnswer:
    domain: Domain
    value: str
    # False for Math expressions that are not plain numbers (flag for manual review)
    exact: bool = True

    def __str__(self) -> str:
        return self.value


# ---------------------------------------------------------------------------
# canonicalisation


def _canon_number(s: str) -> str | None:
    s = s.replace(",", "")
    try:
        d = Decimal(s)
    except InvalidOperation:
        return None
    if not d.is_finite():
        return None
    if d == d.to_integral_value():
        return str(int(d))
    return format(d.normalize(), "f")


def canonical_math(text: str) -> tuple[str, bool]:
    s = text.strip()
    m = _BOXED_RE.search(s)
    if m:
        s = m.group(1).strip()
    s = s.replace("\\$", "").replace("$", "").replace("\\%", "%").strip()
    s = s.rstrip(".").strip()
    if _NUMBER_RE.match(s):
        num = _canon_number(s)
        if num is not None:
            return num, True
    m = _LEADING_NUMBER_RE.match(s)
    if m:
        num = _canon_number(m.group(1))
        if num is not None:
            return num, True
    return re.sub(r"\s+", "", s), False


_YES = {"yes", "true", "y"}
_NO = {"no", "false", "n"}


def canonical_yes_no(text: str) -> str:
    s = text.strip().lower()
    word = re.split(r"[\s.,;:!]+", s, maxsplit=1)[0] if s else ""
    if word in _YES:
        return "yes"
    if word in _NO:
        return "no"
    return re.sub(r"\s+", " ", s).strip(" .")


def _norm_ws(s: str) -> str:
    return re.sub(r"\s+", " ", s).strip()


def canonical_option(text: str, choices: Sequence[str]) -> str:
    """Map an option letter or option text to the verbatim option text."""
    s = text.strip().strip("*").strip()
    if not choices:
        return _norm_ws(s)
    folded = {_norm_ws(c).casefold(): c for c in choices}
    hit = folded.get(_norm_ws(s).casefold()) or folded.get(_norm_ws(s.rstrip(".")).casefold())
    if hit is not None:
        return hit
    m = _LETTER_RE.match(s)
    if m:
        idx = "abcd".index(m.group(1).lower())
        rest = m.group(2)
        if idx < len(choices) and (rest is None or _norm_ws(rest.rstrip(".")).casefold() == _norm_ws(choices[idx]).casefold()):
            return choices[idx]
    return _norm_ws(s)


def _literal(s: str) -> object:
    return ast.literal_eval(s)


def canonical_literal(text: str) -> str:
    """Canonical Python value literal: ``'abc'`` and ``"abc"`` compare equal, so do ``[1,2]`` and ``[1, 2]``."""
    s = text.strip()
    if s.startswith("```"):
        s = s.strip("`")
        s = s.split("\n", 1)[1] if s.lower().startswith("python\n") else s
        s = s.strip()
    s = s.strip("`").strip()
    for candidate in (s, s.rstrip(".")):
        try:
            return repr(_literal(candidate))
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            pass
    # f(1, 2) style inputs: keep the argument tuple
    m = re.match(r"^[A-Za-z_][\w.]*\((.*)\)$", s, re.S)
    if m:
        args = m.group(1).strip()
        try:
            value = _literal(f"({args},)") if args else ()
            return repr(value[0] if len(value) == 1 else value)
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            pass
    return _norm_ws(s)


def canonicalize(text: str, domain: Domain, choices: Sequence[str] = ()) -> CanonicalAnswer:
    if domain is Domain.MATH:
        value, exact = canonical_math(text)
        return CanonicalAnswer(domain, value, exact)
    if domain is Domain.QNA:
        if choices:
            return CanonicalAnswer(domain, canonical_option(text, choices))
        return CanonicalAnswer(domain, canonical_yes_no(text))
    return CanonicalAnswer(domain, canonical_literal(text))


# ---------------------------------------------------------------------------
# extraction


def answer_segment(text: str) -> str | None:
    """Raw text after the last answer marker, or a trailing bare answer."""
    matches = list(_MARKER_RE.finditer(text))
    if matches:
        tail = text[matches[-1].end():]
        tail = tail.lstrip(" \t*:")
        if tail.startswith("\n"):
            tail = tail.lstrip()
        line = tail.split("\n", 1)[0].strip()
        return line or None
    stripped = text.strip()
    if not stripped:
        return None
    boxed = _BOXED_RE.findall(stripped)
    if boxed:
        return boxed[-1]
    if "\n" not in stripped:
        return stripped
    return None


def extract_answer(text: str, domain: Domain, choices: Sequence[str] = ()) -> CanonicalAnswer | None:
    """Canonical answer from the last marker (``Answer:``, ``Judge Decision:``, ...)."""
    seg = answer_segment(text)
    if seg is None:
        return None
    ans = canonicalize(seg, domain, choices)
    return ans if ans.value else None


Checker = Callable[[str, TaskInstance], bool]


def score(pred: CanonicalAnswer | None, task: TaskInstance, checker: Checker | None = None) -> bool:
    """Exact match on canonical forms; ``checker`` replaces literal equality for code tasks."""
    if pred is None:
        return False
    if checker is not None and task.domain.is_code:
        return bool(checker(pred.value, task))
    ref = canonicalize(task.reference, task.domain, task.choices)
    pred = canonicalize(pred.value, task.domain, task.choices)
    return pred.value == ref.value


def accuracy(outcomes: Sequence[bool]) -> float:
    if not outcomes:
        raise ValueError("accuracy of an empty outcome list")
    return percentage(sum(bool(o) for o in outcomes), len(outcomes))


def percentage(k: int, n: int, digits: int = 2) -> float:
    """``100 * k / n`` rounded half-up to ``digits`` decimals."""
    if n <= 0:
        raise ValueError("percentage needs n > 0")
    scaled = Decimal(100 * k) / Decimal(n)
    q = Decimal(1).scaleb(-digits)
    return float(scaled.quantize(q, rounding="ROUND_HALF_UP"))


def extracted_equal(a: str, b: str, domain: Domain, choices: Sequence[str] = ()) -> bool:
    x, y = extract_answer(a, domain, choices), extract_answer(b, domain, choices)
    return x is not None and y is not None and x.value == y.value


# ---------------------------------------------------------------------------
# datasets


_TASK_TEMPLATE = {
    Domain.MATH: "task.math",
    Domain.CODE_INPUT: "task.cip",
    Domain.CODE_OUTPUT: "task.cop",
}


def render_task_body(dataset: Dataset, fields: dict, templates: Templates = DEFAULT_TEMPLATES) -> str:
    domain = DATASET_DOMAIN[dataset]
    if dataset is Dataset.MMLU:
        choices = list(fields["choices"])
        ctx = {"question": fields["question"]}
        ctx.update({f"option_{i + 1}": c for i, c in enumerate(choices)})
        return templates.render("task.mmlu", ctx)
    if dataset is Dataset.STRATEGYQA:
        return templates.render("task.strategyqa", {"question": fields["question"], "context": fields.get("context", "")})
    ctx = {k: str(v) for k, v in fields.items() if k in ("question", "code", "input", "output")}
    return templates.render(_TASK_TEMPLATE[domain], ctx)


def task_from_record(rec: dict, dataset: Dataset | None = None) -> TaskInstance:
    ds = Dataset.parse(rec["dataset"]) if rec.get("dataset") else dataset
    if ds is None:
        raise ValueError(f"record {rec.get('id')!r} has no dataset")
    if "domain" in rec and rec["domain"] != DATASET_DOMAIN[ds].value:
        raise ValueError(f"record {rec['id']!r}: domain {rec['domain']!r} does not match {ds.value}")
    body = rec.get("body") or render_task_body(ds, rec)
    return TaskInstance(str(rec["id"]), ds, body, str(rec["reference"]), tuple(rec.get("choices", ())))


def load_dataset(path: str | os.PathLike[str], dataset: Dataset | None = None) -> list[TaskInstance]:
    """One JSON record per line with ``id``, ``reference`` and either ``body`` or raw fields."""
    tasks: list[TaskInstance] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            task = task_from_record(json.loads(line), dataset)
            if task.id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {task.id!r}")
            seen.add(task.id)
            tasks.append(task)
    return tasks


def task_to_record(task: TaskInstance) -> dict:
    rec = {
        "id": task.id,
        "dataset": task.dataset.value,
        "domain": task.domain.value,
        "body": task.body,
        "reference": task.reference,
    }
    if task.choices:
        rec["choices"] = list(task.choices)
    return rec


def write_dataset(tasks: Iterable[TaskInstance], path: str | os.PathLike[str]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tasks:
            fh.write(json.dumps(task_to_record(t), ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n

