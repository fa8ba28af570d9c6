"""Sample-size planning, stratified sampling and the normal distribution helpers they need."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

# Acklam's rational approximation of the inverse normal CDF
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_sf(x: float) -> float:
    """Upper tail ``P(Z > x)``, accurate far into the tail."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF (Acklam + one Halley step)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile needs 0 < p < 1, got {p}")
    if p > 0.5:
        # 1 - p is exact here; refining in the lower tail avoids cancellation near 1
        return -_lower_quantile(1.0 - p)
    return _lower_quantile(p)


def _lower_quantile(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1
        )
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1
        )
    # Halley refinement
    e = normal_cdf(x) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def two_sided_z(confidence: float) -> float:
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    return normal_quantile(1 - (1 - confidence) / 2)


@dataclass(frozen=True)
class SamplingPlan:
    population: int
    confidence: float
    margin: float
    proportion: float
    n: int

    def __post_init__(self) -> None:
        if not 1 <= self.n <= self.population:
            raise ValueError(f"sample size {self.n} outside [1, {self.population}]")


def cochran_n0(confidence: float = 0.95, margin: float = 0.05, p: float = 0.5) -> float:
    z = two_sided_z(confidence)
    return z * z * p * (1 - p) / (margin * margin)


def cochran_sample_size(N: int, confidence: float = 0.95, margin: float = 0.05, p: float = 0.5) -> int:
    """Cochran's sample size with finite-population correction, rounded up and capped at ``N``."""
    if N < 1:
        raise ValueError("population size must be >= 1")
    if not 0.0 < margin < 1.0:
        raise ValueError("margin must be in (0, 1)")
    if not 0.0 < p < 1.0:
        raise ValueError("proportion must be in (0, 1)")
    n0 = cochran_n0(confidence, margin, p)
    n = n0 / (1 + (n0 - 1) / N)
    return min(math.ceil(n), N)


def plan(N: int, confidence: float = 0.95, margin: float = 0.05, p: float = 0.5, full: bool = False) -> SamplingPlan:
    n = N if full else cochran_sample_size(N, confidence, margin, p)
    return SamplingPlan(N, confidence, margin, p, n)


def allocate(strata: Sequence[Hashable], total: int) -> dict[Hashable, int]:
    """Equal allocation; the remainder goes to the lexicographically first strata."""
    keys = sorted(strata, key=str)
    if not keys:
        raise ValueError("no strata")
    base, extra = divmod(total, len(keys))
    return {k: base + (1 if i < extra else 0) for i, k in enumerate(keys)}


def stratified_sample(
    items: Sequence[T],
    key: Callable[[T], Hashable],
    total: int | None = None,
    per_stratum: int | None = None,
    seed: int = 0,
) -> list[T]:
    """Draw without replacement inside each stratum under a seeded generator.

    Exactly one of ``total`` and ``per_stratum`` must be given. The result is
    ordered by stratum, then by position in ``items``.
    """
    if (total is None) == (per_stratum is None):
        raise ValueError("give exactly one of total or per_stratum")
    groups: dict[Hashable, list[int]] = defaultdict(list)
    for i, item in enumerate(items):
        groups[key(item)].append(i)
    if total is not None:
        alloc = allocate(list(groups), total)
    else:
        alloc = {k: per_stratum for k in groups}
    rng = np.random.default_rng(seed)
    picked: list[T] = []
    for k in sorted(groups, key=str):
        members = groups[k]
        want = alloc[k]
        if want > len(members):
            raise ValueError(f"stratum {k!r} has {len(members)} items, needs {want}")
        chosen = sorted(rng.choice(len(members), size=want, replace=False).tolist())
        picked.extend(items[members[j]] for j in chosen)
    return picked
