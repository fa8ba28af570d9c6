"""Walk one arithmetic task through all five coordination protocols.

Uses the offline scripted model, so it runs without network access and
prints the same transcript every time.

    python3 demos/01_five_protocols.py
"""

from pathlib import Path

from macomm import SystemKind
from macomm.core import default_agents
from macomm.evaluation import load_dataset
from macomm.prompts import roles_for
from macomm.scripted import ScriptedModel
from macomm.orchestrator import run_discussion

ROOT = Path(__file__).resolve().parent.parent
task = load_dataset(ROOT / "tests" / "fixtures" / "gsm8k_20.jsonl")[3]
model = ScriptedModel()

print(f"Task {task.id}: {task.body.splitlines()[1]}  (reference {task.reference})\n")

for kind in SystemKind:
    roles = roles_for(kind) if kind in (SystemKind.SEQ_R, SystemKind.DEBATE) else ("agent",) * 3
    trace = run_discussion(task, kind, default_agents("scripted", roles), model)
    print(f"=== {kind.label}: {len(trace.responses)} turns, ended by {trace.termination}")
    for r in trace.responses:
        first = r.raw_text.splitlines()[0] if r.raw_text else "(empty)"
        extra = []
        if r.stance is not None:
            extra.append(f"stance {r.stance.value}")
        if r.vote is not None:
            extra.append(f"votes for response {r.vote + 1}")
        print(f"  round {r.round}  agent {r.agent_index} ({r.role:8s}) {first}" + (f"  [{', '.join(extra)}]" if extra else ""))
    verdict = "correct" if trace.outcome else "wrong"
    print(f"  final answer {trace.final_answer!r}: {verdict}\n")
