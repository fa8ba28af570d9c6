"""A deterministic stand-in for a chat model, used to build replay cassettes offline.

The scripted agent solves ``Compute <expression>.`` problems with seeded
mistakes, follows answers it can see in forwarded blocks, plays the judge and
voter roles, and emits JSON annotations when prompted as the annotator. Every
reply is a pure function of the request, so recorded cassettes are stable.
"""

from __future__ import annotations

import ast
import hashlib
import json
import operator
import re
from collections import Counter
from dataclasses import dataclass

from .backend import ChatRequest, ChatResponse

_EXPR_RE = re.compile(r"Compute ([0-9+\-*/(). ]+?)\.(?:\s|$)")
_BLOCK_RE = re.compile(
    r"\[(RESPONSES|PLAN|PROPOSAL|CRITIQUE|RESPONSE)\](.*?)\[END_\1\]", re.S
)
_ANSWER_RE = re.compile(r"Answer:\s*(-?\d+)")
_GOT_RE = re.compile(r"got (-?\d+)")
_CANDIDATE_RE = re.compile(r"Response (\d): (.*?)(?=\nResponse \d: |\n\[END_CANDIDATES\])", re.S)
_SPAN_LINE_RE = re.compile(r"^\[(s\d+)\] ", re.M)

_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.FloorDiv: operator.floordiv}


def evaluate(expr: str) -> int:
    """Integer arithmetic over + - * and // (``/`` is floor division)."""

    def walk(node: ast.AST) -> int:
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -walk(node.operand)
        if isinstance(node, ast.BinOp):
            op = ast.FloorDiv if isinstance(node.op, ast.Div) else type(node.op)
            if op in _OPS:
                return _OPS[op](walk(node.left), walk(node.right))
        raise ValueError(f"unsupported expression {expr!r}")

    return walk(ast.parse(expr.strip(), mode="eval"))


def _unit(*parts: object) -> float:
    """Deterministic pseudo-random number in [0, 1) from ``parts``."""
    h = hashlib.sha256("|".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def _majority(values: list[int]) -> int | None:
    if not values:
        return None
    counts = Counter(values)
    return min(counts, key=lambda v: (-counts[v], values.index(v)))


@dataclass
class ScriptedModel:
    """Offline chat model.

    ``error_rate`` is the chance an agent miscomputes; ``follow_rate`` the
    chance it adopts a visible prior answer instead of its own. ``cara`` sets
    CARA behaviour: ``comply`` (always include keywords), ``never``,
    ``on_correction`` (only after a correction message) or ``mixed``
    (comply with probability 0.5 on the first attempt).
    """

    error_rate: float = 0.35
    follow_rate: float = 0.6
    cara: str = "mixed"

    def complete(self, request: ChatRequest) -> ChatResponse:
        system = request.system_prompt
        if system.startswith("You are an expert annotator"):
            text = self._annotate(request.messages[0][1])
        elif "Judge Decision" in request.user_prompt:
            text = self._judge(request)
        elif "Vote: Response number" in request.user_prompt:
            text = self._vote(request)
        else:
            text = self._agent(request)
        return ChatResponse(text, prompt_tokens=len(request.user_prompt) // 4, completion_tokens=len(text) // 4)

    # -- helpers -----------------------------------------------------------

    def _task_prompt(self, request: ChatRequest) -> str:
        # first user turn holds the task even during CARA corrections
        return request.messages[0][1]

    def _solve(self, request: ChatRequest, salt: str) -> tuple[str, int | None]:
        m = _EXPR_RE.search(self._task_prompt(request))
        if not m:
            return "", None
        expr = m.group(1).strip()
        value = evaluate(expr)
        key = (request.params.seed, request.params.temperature, request.system_prompt[:40], self._task_prompt(request), salt)
        if _unit("err", *key) < self.error_rate:
            value += 1 + int(_unit("delta", *key) * 9)
        return expr, value

    @staticmethod
    def visible_answers(prompt: str) -> list[int]:
        out: list[int] = []
        for _, body in _BLOCK_RE.findall(prompt):
            for chunk in re.split(r"\n\nAgent \d", body):
                found = _ANSWER_RE.findall(chunk) or _GOT_RE.findall(chunk)
                if found:
                    out.append(int(found[0]))
        return out

    # -- roles -------------------------------------------------------------

    def _agent(self, request: ChatRequest) -> str:
        prompt = self._task_prompt(request)
        expr, own = self._solve(request, "agent")
        is_planner = "You are the planner agent." in request.system_prompt
        prior = self.visible_answers(prompt)
        majority = _majority(prior)
        key = (request.params.seed, request.system_prompt[:40], prompt)
        answer = own
        if majority is not None and _unit("follow", *key) < self.follow_rate:
            answer = majority
        if own is None:
            answer = majority if majority is not None else 0
        if is_planner:
            answer_line = "Answer: pending"
            body = [f"Plan: evaluate {expr or 'the problem'} one operation at a time and report the result."]
        else:
            answer_line = f"Answer: {answer}"
            body = [f"I evaluated {expr or 'the problem'} step by step and got {answer}."]
        check = f"Recomputing the expression confirms {answer}." if not is_planner else "The plan covers every operation."
        ref = None
        if prior:
            ref = f"The previous responses gave {', '.join(map(str, prior))}."
        unchanged = "The answer remains unchanged." if majority is not None and majority == answer else None

        demanded = "Your response MUST include" in request.system_prompt
        corrected = request.messages[-1][1].startswith("Your previous response was missing")
        comply = demanded and (
            self.cara == "comply"
            or (self.cara == "on_correction" and corrected)
            or (self.cara == "mixed" and (corrected or _unit("comply", *key) < 0.5))
        )
        lines = [answer_line]
        if comply:
            lines.append(f"Reasoning: {body[0]}")
            lines.append(f"Verification: {check}")
            if "Reference:" in request.system_prompt:
                lines.append(f"Reference: {ref or 'No prior responses were available.'}")
        else:
            lines.append(body[0])
            lines.append(check)
            if ref:
                lines.append(ref)
        if unchanged:
            lines.append(unchanged)
        if "Stance: [AGREE] or [DISAGREE]" in prompt:
            lines.append("Stance: [AGREE]" if majority is not None and answer == majority else "Stance: [DISAGREE]")
        return "\n".join(lines)

    def _judge(self, request: ChatRequest) -> str:
        prompt = request.user_prompt
        block = prompt.split("[CANDIDATES]", 1)[-1].split("[END_CANDIDATES]", 1)[0]
        answers = _ANSWER_RE.findall(block)
        _, own = self._solve(request, "judge")
        if len(answers) >= 2 and answers[0] == answers[-1] and (own is None or str(own) == answers[0]):
            return f"Both debaters agree.\nJudge Decision: Answer: {answers[0]}"
        return "The debate has not settled on a checked answer yet.\nJudge Decision: continue"

    def _vote(self, request: ChatRequest) -> str:
        prompt = request.user_prompt
        block = prompt.split("[CANDIDATES]", 1)[-1]
        answers: dict[int, int | None] = {}
        for idx, text in _CANDIDATE_RE.findall(block):
            found = _ANSWER_RE.findall(text)
            answers[int(idx)] = int(found[0]) if found else None
        values = [v for v in answers.values() if v is not None]
        pick = _majority(values)
        for idx in sorted(answers):
            if answers[idx] == pick:
                return f"Vote: Response {idx}"
        return "Vote: Response 1"

    @staticmethod
    def label_for(text: str) -> str:
        if text.startswith("Answer:"):
            return "C1"
        if text.startswith("Verification:") or text.startswith("Recomputing") or "confirms" in text:
            return "C3"
        if text.startswith("Reference:") or "previous responses" in text:
            return "C4"
        if "remains unchanged" in text:
            return "C5"
        if text.startswith("Stance:"):
            return "C1"
        return "C2"

    def _annotate(self, user: str) -> str:
        body = user.split("Agent Response:\n", 1)[-1].split("\n\nReturn JSON in the following format:", 1)[0]
        starts = list(_SPAN_LINE_RE.finditer(body))
        entries = []
        for i, m in enumerate(starts):
            end = starts[i + 1].start() - 1 if i + 1 < len(starts) else len(body)
            text = body[m.end():end]
            label = self.label_for(text)
            entries.append({"span_id": m.group(1), "text": text, "categories": [label], "category_ranking": [label]})
        return json.dumps({"annotated_response": entries}, ensure_ascii=False)
