"""Sample sizes, stratified draws, the z-test behind the asterisks and annotator agreement.

    python3 demos/05_sampling_and_statistics.py
"""

from macomm.annotation import agreement
from macomm.cara import rate_from_counts
from macomm.evaluation import percentage
from macomm.occlusion import OcclusionDelta
from macomm.stats import cochran_sample_size, stratified_sample

print("Cochran sample sizes at 95% confidence, 5% margin:")
for N in (100, 800, 2290, 8792, 15858):
    print(f"  N={N:6d} -> n={cochran_sample_size(N)}")

items = [(f"{src}-{i}", src) for src in ("GSM8K", "MATH500", "MMLU") for i in range(50)]
picked = stratified_sample(items, key=lambda x: x[1], total=10, seed=7)
print("\nStratified draw of 10 over three sources (the remainder goes to the first stratum):")
print("  " + ", ".join(name for name, _ in picked))

print("\nPercentages round half-up:", percentage(7548, 7660), "and", rate_from_counts(1, 16))

print("\nTwo-proportion z-test for a few occlusion cells (n=200 per arm):")
for k_base, k_occ in ((150, 148), (150, 131), (120, 97)):
    d = OcclusionDelta.from_counts(k_occ, 200, k_base, 200)
    print(f"  {k_base}/200 -> {k_occ}/200  delta {d.cell():>8s}  z={d.z:+.3f}  p={d.p:.4f}")

gold = ["C1", "C2", "C2", "C3", "C4", "C2", "C5", "C1", "C3", "C2"]
pred = ["C1", "C2", "C3", "C3", "C4", "C2", "C5", "C1", "C2", "C2"]
a = agreement(gold, pred)
print(f"\nAnnotator vs human labels: accuracy {a.accuracy:.1f}%, Cohen's kappa {a.kappa:.4f}")
print(a.table())
