"""The five coordination protocols, run as explicit round-by-round state machines.

Every inter-agent boundary goes through a :class:`BoundaryHook`, which is how
occlusion masks forwarded copies and how CARA augments prompts and re-invokes
agents. Stored responses always keep the backend's original text.
"""

from __future__ import annotations

import dataclasses
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

from .backend import BackendError, ChatModel, ChatRequest, UnrecordedRequestError, make_request
from .core import (
    MAX_ROUNDS,
    AgentConfig,
    AgentResponse,
    CommunicationTrace,
    Stance,
    SystemKind,
    TaskInstance,
    default_agents,
    judge_config,
)
from .evaluation import Checker, extract_answer, score
from .prompts import DEFAULT_TEMPLATES, Templates, render_prompt, roles_for

log = logging.getLogger(__name__)
T = TypeVar("T")

ROUNDS_EXHAUSTED = "rounds_exhausted"
CONSENSUS = "consensus"
JUDGE_STOP = "judge_stop"
VOTE_COMPLETE = "vote_complete"


@dataclass(frozen=True)
class Turn:
    """Where an agent call sits in the protocol."""

    task: TaskInstance
    kind: SystemKind
    role: str
    round: int
    agent_index: int
    has_prior: bool
    run_label: str = "baseline"

    @property
    def participating(self) -> bool:
        return self.role not in ("judge", "voter")


class BoundaryHook:
    """Identity hook. Subclasses override the boundaries they care about."""

    def system_prompt(self, prompt: str, turn: Turn) -> str:
        return prompt

    def post_generate(
        self, response: AgentResponse, turn: Turn, request: ChatRequest, model: ChatModel
    ) -> AgentResponse:
        return response

    def transform(self, response: AgentResponse, destination: str, turn: Turn) -> str:
        return response.raw_text


IDENTITY_HOOK = BoundaryHook()


@dataclass
class DiscussionState:
    kind: SystemKind
    round: int = 0
    requests: dict[int, ChatRequest] = field(default_factory=dict)
    responses: list[AgentResponse] = field(default_factory=list)
    shared: list[str] = field(default_factory=list)
    terminated: bool = False
    reason: str | None = None
    flags: list[str] = field(default_factory=list)

    def terminate(self, reason: str) -> None:
        self.terminated = True
        self.reason = reason


class ProtocolError(RuntimeError):
    pass


class JudgeParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# decision rules


def consensus_reached(stances: Sequence[Stance]) -> bool:
    """True when at least half of the agents AGREE (exactly 50% counts)."""
    if not stances:
        raise ValueError("consensus over an empty stance list")
    agree = sum(1 for s in stances if s is Stance.AGREE)
    return 2 * agree >= len(stances)


def tally_votes(votes: Sequence[int], n_candidates: int) -> int:
    """Most-voted candidate; ties go to the lowest index."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    counts = [0] * n_candidates
    for v in votes:
        if not 0 <= v < n_candidates:
            raise ValueError(f"vote {v} outside [0, {n_candidates})")
        counts[v] += 1
    best = max(counts)
    return counts.index(best)


_STANCE_RE = re.compile(r"Stance:\s*\**\s*\[?\s*(AGREE|DISAGREE)\b", re.IGNORECASE)
_VOTE_RE = re.compile(r"Vote:\s*\**\s*(?:Response\s*)?(?:number\s*)?#?\s*(\d+)", re.IGNORECASE)
_JUDGE_RE = re.compile(r"Judge Decision:", re.IGNORECASE)
_CONTINUE_RE = re.compile(r"^\W*(continue|proceed|next round)\b", re.IGNORECASE)


def parse_stance(text: str) -> Stance | None:
    found = _STANCE_RE.findall(text)
    return Stance(found[-1].upper()) if found else None


def parse_vote(text: str, n_candidates: int) -> int | None:
    """0-based candidate index from the last ``Vote: Response k`` marker."""
    found = _VOTE_RE.findall(text)
    if not found:
        return None
    idx = int(found[-1]) - 1
    return idx if 0 <= idx < n_candidates else None


def judge_decision_text(text: str) -> str | None:
    matches = list(_JUDGE_RE.finditer(text))
    if not matches:
        return None
    return text[matches[-1].end():].strip()


def parse_judge_decision(text: str, candidates: Sequence[str], task: TaskInstance | None = None) -> int:
    """Index of the candidate the judge selected.

    Matching order: the decision quotes a candidate verbatim (a whole line of
    it, or its full text), else its extracted answer equals a candidate's.
    """
    if not candidates:
        raise ValueError("judge needs at least one candidate")
    decision = judge_decision_text(text)
    if decision is None:
        raise JudgeParseError("no 'Judge Decision:' marker")
    if not decision:
        raise JudgeParseError("empty judge decision")
    first_line = decision.split("\n", 1)[0].strip()
    for i, cand in enumerate(candidates):
        lines = {ln.strip() for ln in cand.splitlines() if ln.strip()}
        if cand.strip() and cand.strip() in decision:
            return i
        if first_line in lines or decision in lines:
            return i
    if task is not None:
        picked = extract_answer("Answer: " + first_line, task.domain, task.choices)
        if picked is not None:
            for i, cand in enumerate(candidates):
                got = extract_answer(cand, task.domain, task.choices)
                if got is not None and got.value == picked.value:
                    return i
    raise JudgeParseError(f"decision {first_line[:60]!r} matches no candidate")


def majority_answer(texts: Sequence[tuple[int, str]], task: TaskInstance) -> str | None:
    """Most frequent extracted answer; ties go to the lowest agent index."""
    first_seen: dict[str, int] = {}
    counts: Counter[str] = Counter()
    for agent, text in sorted(texts):
        ans = extract_answer(text, task.domain, task.choices)
        if ans is None:
            continue
        counts[ans.value] += 1
        first_seen.setdefault(ans.value, agent)
    if not counts:
        return None
    return min(counts, key=lambda a: (-counts[a], first_seen[a]))


def format_block(items: Sequence[tuple[str, str]]) -> str:
    return "\n\n".join(f"{label}: {text}" for label, text in items)


# ---------------------------------------------------------------------------
# discussion runner


class Discussion:
    def __init__(
        self,
        task: TaskInstance,
        kind: SystemKind,
        agents: Sequence[AgentConfig],
        model: ChatModel,
        hook: BoundaryHook = IDENTITY_HOOK,
        judge: AgentConfig | None = None,
        rounds: int = MAX_ROUNDS,
        templates: Templates = DEFAULT_TEMPLATES,
        run_label: str = "baseline",
        checker: Checker | None = None,
        max_tokens: int | None = None,
    ):
        if kind is SystemKind.CRSV and len(agents) != 3:
            raise ProtocolError("CR-SV voting is defined over exactly three candidates")
        if len(agents) < len(roles_for(kind)):
            raise ProtocolError(f"{kind.value} needs {len(roles_for(kind))} agents, got {len(agents)}")
        if not 1 <= rounds <= MAX_ROUNDS:
            raise ProtocolError(f"rounds must be in [1, {MAX_ROUNDS}]")
        self.task = task
        self.kind = kind
        self.agents = list(agents)
        self.model = model
        self.hook = hook
        self.judge = judge or judge_config(agents[0].model_id)
        self.rounds = rounds
        self.templates = templates
        self.run_label = run_label
        self.checker = checker
        self.max_tokens = max_tokens
        self.state = DiscussionState(kind)

    # -- plumbing ----------------------------------------------------------

    def _call(self, cfg: AgentConfig, role: str, rnd: int, ctx: dict[str, str], has_prior: bool) -> AgentResponse:
        if self.state.terminated:
            raise ProtocolError("discussion already terminated")
        turn = Turn(self.task, self.kind, role, rnd, cfg.agent_index, has_prior, self.run_label)
        ctx = {"task": self.task.body, **ctx}
        system, user = render_prompt(self.kind, role, rnd, ctx, self.templates)
        if turn.participating:
            system = self.hook.system_prompt(system, turn)
        request = make_request(cfg.model_id, system, user, cfg.temperature, cfg.seed, max_tokens=self.max_tokens)
        self.state.requests[cfg.agent_index] = request
        reply = self.model.complete(request)
        resp = AgentResponse(cfg.agent_index, rnd, reply.text, role)
        if turn.participating:
            resp = self.hook.post_generate(resp, turn, request, self.model)
        self.state.responses.append(resp)
        return resp

    def _forward(self, resp: AgentResponse, destination: str, rnd: int, has_prior: bool = True) -> str:
        turn = Turn(self.task, self.kind, destination, rnd, resp.agent_index, has_prior, self.run_label)
        return self.hook.transform(resp, destination, turn)

    # -- protocols ---------------------------------------------------------

    def _seq_u(self) -> str | None:
        history: list[AgentResponse] = []
        for rnd in range(1, self.rounds + 1):
            self.state.round = rnd
            for cfg in self.agents:
                ctx: dict[str, str] = {}
                if history:
                    ctx["responses"] = format_block(
                        [(f"Agent {r.agent_index + 1} (Round {r.round})", self._forward(r, "agent", rnd)) for r in history]
                    )
                history.append(self._call(cfg, "agent", rnd, ctx, bool(history)))
        self.state.terminate(ROUNDS_EXHAUSTED)
        return self._answer(history[-1].raw_text)

    def _seq_r(self) -> str | None:
        planner, solver, reviewer = self.agents[:3]
        review: AgentResponse | None = None
        for rnd in range(1, self.rounds + 1):
            self.state.round = rnd
            ctx = {"review": self._forward(review, "planner", rnd)} if review else {}
            plan = self._call(planner, "planner", rnd, ctx, review is not None)
            solution = self._call(solver, "solver", rnd, {"plan": self._forward(plan, "solver", rnd)}, True)
            review = self._call(reviewer, "reviewer", rnd, {"solution": self._forward(solution, "reviewer", rnd)}, True)
        self.state.terminate(ROUNDS_EXHAUSTED)
        return self._answer(review.raw_text)

    def _debate(self) -> str | None:
        proposer_cfg, critic_cfg = self.agents[:2]
        critique: AgentResponse | None = None
        last_proposal: AgentResponse | None = None
        for rnd in range(1, self.rounds + 1):
            self.state.round = rnd
            ctx = {"critique": self._forward(critique, "proposer", rnd)} if critique else {}
            last_proposal = self._call(proposer_cfg, "proposer", rnd, ctx, critique is not None)
            critique = self._call(critic_cfg, "critic", rnd, {"proposal": self._forward(last_proposal, "critic", rnd)}, True)
            # the judge always sees the unmodified texts
            candidates = [last_proposal.raw_text, critique.raw_text]
            verdict = self._call(
                self.judge,
                "judge",
                rnd,
                {"proposer_final": candidates[0], "critic_final": candidates[1]},
                True,
            )
            decision = judge_decision_text(verdict.raw_text)
            if decision is None or _CONTINUE_RE.match(decision):
                continue
            try:
                chosen = parse_judge_decision(verdict.raw_text, candidates, self.task)
            except JudgeParseError as exc:
                self.state.flags.append(f"judge_parse_error: round {rnd}: {exc}")
                continue
            self.state.terminate(JUDGE_STOP)
            return self._answer(candidates[chosen])
        self.state.flags.append("judge_no_decision")
        self.state.terminate(ROUNDS_EXHAUSTED)
        return self._answer(last_proposal.raw_text)

    def _refinement_rounds(self, with_stance: bool) -> list[AgentResponse]:
        agents = self.agents
        latest: list[AgentResponse] = []
        for rnd in range(1, self.rounds + 1):
            self.state.round = rnd
            ctx: dict[str, str] = {}
            if latest:
                ctx["responses"] = format_block(
                    [(f"Agent {r.agent_index + 1}", self._forward(r, "agent", rnd)) for r in latest]
                )
            current = []
            for cfg in agents:
                resp = self._call(cfg, "agent", rnd, ctx, bool(latest))
                if with_stance and rnd >= 2:
                    stance = parse_stance(resp.raw_text)
                    resp = _replace_last(self.state, resp, stance=stance)
                current.append(resp)
            latest = current
            if with_stance and rnd >= 2:
                stances = [r.stance or Stance.DISAGREE for r in current]
                if consensus_reached(stances):
                    self.state.terminate(CONSENSUS)
                    break
        return latest

    def _crmc(self) -> str | None:
        latest = self._refinement_rounds(with_stance=True)
        if self.state.terminated:
            agreeing = [(r.agent_index, r.raw_text) for r in latest if r.stance is Stance.AGREE]
            return majority_answer(agreeing, self.task)
        self.state.terminate(ROUNDS_EXHAUSTED)
        return majority_answer([(r.agent_index, r.raw_text) for r in latest], self.task)

    def _crsv(self) -> str | None:
        latest = self._refinement_rounds(with_stance=False)
        candidates = [r.raw_text for r in latest]
        ctx = {f"candidate_{i + 1}": text for i, text in enumerate(candidates)}
        votes = []
        for cfg in self.agents:
            ballot = self._call(cfg, "voter", self.state.round, ctx, True)
            vote = parse_vote(ballot.raw_text, len(candidates))
            _replace_last(self.state, ballot, vote=vote)
            if vote is None:
                self.state.flags.append(f"abstain: agent {cfg.agent_index}")
            else:
                votes.append(vote)
        if not votes:
            self.state.flags.append("no_valid_votes")
        winner = tally_votes(votes, len(candidates))
        self.state.terminate(VOTE_COMPLETE)
        return self._answer(candidates[winner])

    def _answer(self, text: str) -> str | None:
        ans = extract_answer(text, self.task.domain, self.task.choices)
        return ans.value if ans else None

    def run(self) -> CommunicationTrace:
        runner: Callable[[], str | None] = {
            SystemKind.SEQ_U: self._seq_u,
            SystemKind.SEQ_R: self._seq_r,
            SystemKind.DEBATE: self._debate,
            SystemKind.CRMC: self._crmc,
            SystemKind.CRSV: self._crsv,
        }[self.kind]
        complete = True
        try:
            final = runner()
        except (BackendError, UnrecordedRequestError) as exc:
            log.warning("task %s (%s) aborted: %s", self.task.id, self.kind.value, exc)
            self.state.flags.append(f"aborted: {exc}")
            final, complete = None, False
        outcome = False
        if final is not None:
            outcome = score(extract_answer("Answer: " + final, self.task.domain, self.task.choices), self.task, self.checker)
        return CommunicationTrace(
            task_id=self.task.id,
            system=self.kind,
            model_id=self.agents[0].model_id,
            responses=tuple(self.state.responses),
            final_answer=final,
            outcome=outcome,
            run_label=self.run_label,
            dataset=self.task.dataset,
            termination=self.state.reason,
            complete=complete,
            flags=tuple(self.state.flags),
        )


def _replace_last(state: DiscussionState, resp: AgentResponse, **changes) -> AgentResponse:
    new = dataclasses.replace(resp, **changes)
    state.responses[-1] = new
    return new


def run_discussion(
    task: TaskInstance,
    kind: SystemKind,
    agents: Sequence[AgentConfig] | None,
    model: ChatModel,
    hook: BoundaryHook = IDENTITY_HOOK,
    **kwargs,
) -> CommunicationTrace:
    """Run one discussion of ``kind`` on ``task`` and return its full trace."""
    if agents is None:
        agents = default_agents(kwargs.pop("model_id", "default"))
    return Discussion(task, kind, agents, model, hook, **kwargs).run()


def run_many(
    tasks: Sequence[TaskInstance],
    run_one: Callable[[TaskInstance], T],
    parallelism: int = 4,
) -> list[T]:
    """Run independent discussions concurrently; results keep task order."""
    if parallelism <= 1 or len(tasks) <= 1:
        return [run_one(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run_one, tasks))
