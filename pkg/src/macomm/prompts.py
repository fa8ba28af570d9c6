"""Prompt template loading and instantiation.

Templates are plain text files keeping the original ``<placeholder>`` tokens.
Only placeholders listed in :data:`PLACEHOLDERS` are substituted; anything else
in angle brackets (e.g. the JSON schema hints of the annotation prompt) is left
verbatim.
"""

from __future__ import annotations

import os
import re
from importlib import resources
from pathlib import Path
from typing import Mapping

from .core import SystemKind

PLACEHOLDERS = {
    "task": "task",
    "output_format_instructions": "output_format",
    "outputs from previous agents": "responses",
    "all agents' responses from the previous round": "responses",
    "planner agent output": "plan",
    "solver agent output": "solution",
    "reviewer agent output": "review",
    "proposer agent response": "proposal",
    "critic agent response": "critique",
    "proposer agent final response": "proposer_final",
    "critic agent final response": "critic_final",
    "agent 1 response": "candidate_1",
    "agent 2 response": "candidate_2",
    "agent 3 response": "candidate_3",
    "question": "question",
    "option 1": "option_1",
    "option 2": "option_2",
    "option 3": "option_3",
    "option 4": "option_4",
    "supporting facts": "context",
    "code snippet": "code",
    "output": "output",
    "input": "input",
    "definitions of each information category (C1–C5)": "definitions",
    "four human-annotated examples per each category": "examples",
    "agent response split into sentence-level spans": "spans",
    "list of missing information": "missing",
}

_PLACEHOLDER_RE = re.compile(r"<([^<>\n]+)>")


class TemplateError(KeyError):
    """A template or one of its placeholders is missing."""

    def __str__(self) -> str:
        return str(self.args[0])


def fill(template: str, context: Mapping[str, str]) -> str:
    """Substitute known placeholders in one pass (inserted text is never rescanned)."""

    def sub(m: re.Match[str]) -> str:
        key = PLACEHOLDERS.get(m.group(1))
        if key is None:
            return m.group(0)
        if key not in context:
            raise TemplateError(f"missing placeholder <{m.group(1)}> (context key {key!r})")
        return str(context[key])

    return _PLACEHOLDER_RE.sub(sub, template)


def placeholders(template: str) -> list[str]:
    return [m.group(1) for m in _PLACEHOLDER_RE.finditer(template) if m.group(1) in PLACEHOLDERS]


class Templates:
    """Template lookup; files in ``override_dir`` shadow the packaged ones."""

    def __init__(self, override_dir: str | os.PathLike[str] | None = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: dict[str, str] = {}

    def __getitem__(self, name: str) -> str:
        if name not in self._cache:
            self._cache[name] = self._load(name)
        return self._cache[name]

    def _load(self, name: str) -> str:
        return self.raw(f"{name}.txt")

    def raw(self, filename: str) -> str:
        """Contents of any packaged data file, honouring the override directory."""
        if self.override_dir and (self.override_dir / filename).is_file():
            return (self.override_dir / filename).read_text(encoding="utf-8")
        res = resources.files("macomm") / "templates" / filename
        if not res.is_file():
            raise TemplateError(f"no template named {filename!r}")
        return res.read_text(encoding="utf-8")

    def render(self, name: str, context: Mapping[str, str]) -> str:
        return fill(self[name], context)


DEFAULT_TEMPLATES = Templates()

# (system, role) -> system prompt template
_SYSTEM = {
    (SystemKind.SEQ_U, "agent"): "seq_u.system",
    (SystemKind.SEQ_R, "planner"): "seq_r.planner.system",
    (SystemKind.SEQ_R, "solver"): "seq_r.solver.system",
    (SystemKind.SEQ_R, "reviewer"): "seq_r.reviewer.system",
    (SystemKind.DEBATE, "proposer"): "debate.proposer.system",
    (SystemKind.DEBATE, "critic"): "debate.critic.system",
    (SystemKind.DEBATE, "judge"): "debate.judge.system",
    (SystemKind.CRMC, "agent"): "cr.system",
    (SystemKind.CRSV, "agent"): "cr.system",
    (SystemKind.CRSV, "voter"): "cr_sv.voter.system",
}


def user_template_name(kind: SystemKind, role: str, round: int, context: Mapping[str, str]) -> str:
    if kind is SystemKind.SEQ_U:
        return "seq_u.prior" if "responses" in context else "seq_u.initial"
    if kind is SystemKind.SEQ_R:
        if role == "planner":
            return "seq_r.planner.followup" if "review" in context else "seq_r.planner"
        return f"seq_r.{role}"
    if kind is SystemKind.DEBATE:
        if role == "proposer":
            return "debate.proposer.initial" if round == 1 else "debate.proposer.revise"
        return f"debate.{role}"
    if kind is SystemKind.CRMC:
        return "cr.initial" if round == 1 else "cr_mc.followup"
    if role == "voter":
        return "cr_sv.vote"
    return "cr.initial" if round == 1 else "cr_sv.followup"


def render_prompt(
    kind: SystemKind,
    role: str,
    round: int,
    context: Mapping[str, str],
    templates: Templates = DEFAULT_TEMPLATES,
) -> tuple[str, str]:
    """Return ``(system_prompt, user_prompt)`` for one agent turn.

    ``context`` must provide ``task`` plus whatever forwarded material the
    selected template needs (``responses``, ``plan``, ``critique``, ...).
    ``output_format`` defaults to the packaged output-format instructions.
    """
    key = (kind, role)
    if key not in _SYSTEM:
        raise TemplateError(f"{kind.value} has no role {role!r}")
    ctx = dict(context)
    ctx.setdefault("output_format", templates["output_format"])
    system = templates[_SYSTEM[key]]
    user = templates.render(user_template_name(kind, role, round, ctx), ctx)
    return system, user


def roles_for(kind: SystemKind) -> tuple[str, ...]:
    """Participating roles in speaking order."""
    return {
        SystemKind.SEQ_U: ("agent", "agent", "agent"),
        SystemKind.SEQ_R: ("planner", "solver", "reviewer"),
        SystemKind.DEBATE: ("proposer", "critic"),
        SystemKind.CRMC: ("agent", "agent", "agent"),
        SystemKind.CRSV: ("agent", "agent", "agent"),
    }[kind]
