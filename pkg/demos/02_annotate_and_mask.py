"""Label the spans of one response, then see what a receiving agent gets under occlusion.

    python3 demos/02_annotate_and_mask.py
"""

from macomm import AgentResponse, Category
from macomm.annotation import Annotator, segment_sentences
from macomm.occlusion import control_mask, derive_seed, mask_category, published_profile
from macomm.scripted import ScriptedModel

text = (
    "Answer: 251\n"
    "I evaluated 37 * 9 - 82 step by step and got 251.\n"
    "Verification: 251 + 82 = 333 and 333 / 9 = 37, so the result checks out.\n"
    "The previous responses also gave 251, so we agree."
)
response = AgentResponse(agent_index=1, round=2, raw_text=text)

print("Sentence units sent to the annotator (byte offsets):")
for s in segment_sentences(text):
    print(f"  [{s.span_id}] {s.start:3d}-{s.end:3d}  {s.text}")

# The scripted model stands in for the judge LLM; a real run points Annotator at a live backend.
labeled = Annotator(ScriptedModel())(response)
print("\nLabels:")
for s in labeled.spans:
    label = s.label.value if s.label else "Unlabeled"
    print(f"  {label:9s} {s.text}")

for target in (Category.C1, Category.C2):
    print(f"\nForwarded copy with {target.value} ({target.title}) occluded:")
    print("  " + mask_category(labeled, target).replace("\n", "\n  "))

length = published_profile("Qwen2.5-Inst")[Category.C2]
print(f"\nControl occlusion masks one random run of {length} characters instead:")
print("  " + control_mask(text, length, derive_seed("demo", "gsm8k_003")).replace("\n", "\n  "))

print("\nThe stored response is untouched:", labeled.raw_text == text)
