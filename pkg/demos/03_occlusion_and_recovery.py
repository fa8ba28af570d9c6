"""Occlusion attribution followed by category-aware recovery, on 20 offline tasks.

1. Run a Seq-U baseline and annotate it.
2. Re-run with Reasoning (C2) masked in every forwarded copy, and with a
   length-matched random mask as the control.
3. Split tasks into TT/TF/FT/FF by baseline and occluded correctness.
4. Re-run the TF and FF tasks with CARA under the same mask and report
   how many come back correct.

    python3 demos/03_occlusion_and_recovery.py
"""

from pathlib import Path

from macomm import Category, SystemKind
from macomm.annotation import Annotator, prevalence
from macomm.cara import recovery_rate, run_with_recovery
from macomm.core import default_agents
from macomm.evaluation import load_dataset
from macomm.occlusion import (
    OcclusionHook,
    known_annotations,
    outcome_matrix,
    outcomes_by_id,
    published_profile,
    run_occlusion,
)
from macomm.orchestrator import run_discussion, run_many
from macomm.scripted import ScriptedModel

ROOT = Path(__file__).resolve().parent.parent
tasks = load_dataset(ROOT / "tests" / "fixtures" / "gsm8k_20.jsonl")
model = ScriptedModel()
agents = default_agents("scripted")
kind = SystemKind.SEQ_U
annotator = Annotator(model)

baseline = run_many(tasks, lambda t: annotator.annotate_trace(run_discussion(t, kind, agents, model)))
prev = prevalence(baseline)
print(f"Baseline: {sum(t.outcome for t in baseline)}/{len(tasks)} correct")
print("Category prevalence over responses: " + ", ".join(f"{c.value} {prev.percent(c):.2f}%" for c in Category))

occluded, delta = run_occlusion(tasks, baseline, kind, model, Category.C2, annotator=annotator, agents=agents)
control, cdelta = run_occlusion(tasks, baseline, kind, model, "control", agents=agents,
                                profile=published_profile("Qwen2.5-Inst"))
print(f"\nC2 occluded: {delta.perturbed:.2f}% vs {delta.baseline:.2f}%  delta {delta.cell()}  (z={delta.z:.3f}, p={delta.p:.3f})")
print(f"Control:     {cdelta.perturbed:.2f}% vs {cdelta.baseline:.2f}%  delta {cdelta.cell()}  (a '*' marks p < 0.05)")

matrix = outcome_matrix(outcomes_by_id(baseline), outcomes_by_id(occluded))
print(f"\nOutcome matrix (baseline, occluded): TT={matrix.TT} TF={matrix.TF} FT={matrix.FT} FF={matrix.FF}")

targets = [t for t in tasks if t.id in set(matrix.group("TF") + matrix.group("FF"))]
hook = OcclusionHook(Category.C2, annotator, known_annotations(baseline))
results = [run_with_recovery(t, kind, agents, model, inner=hook, run_label="cara+occ-C2") for t in targets]
after = outcomes_by_id(trace for trace, _ in results)
retries = [rec.retry_count for _, recs in results for rec in recs]
print(f"\nCARA re-ran {len(targets)} tasks; {sum(r > 0 for r in retries)} of {len(retries)} agent calls needed a correction")
for group in ("TF", "FF"):
    rate = recovery_rate(group, matrix.group(group), after)
    print(f"  {group}: recovered {rate.recovered}/{rate.total} = {rate.cell()}%")
