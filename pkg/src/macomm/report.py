"""Report tables built purely from trace files.

Every table comes in a CSV variant and a fixed-width text variant. Rows are
keyed by (model, system, task group); a trailing ``*`` marks p < 0.05.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .annotation import prevalence
from .cara import RecoveryRate, recovery_rate
from .core import DATASET_DOMAIN, Category, CommunicationTrace, SystemKind
from .occlusion import OcclusionDelta, outcome_matrix, outcomes_by_id

BASELINE = "baseline"
GROUP_ORDER = ("Math", "QnA", "Code")


class ReportError(ValueError):
    pass


GroupKey = tuple[str, str, str]  # model, system label, task group


def task_group(trace: CommunicationTrace) -> str:
    if trace.dataset is None:
        return "?"
    return DATASET_DOMAIN[trace.dataset].task_group


def group_traces(traces: Iterable[CommunicationTrace]) -> dict[str, dict[GroupKey, list[CommunicationTrace]]]:
    """run_label -> (model, system, task group) -> traces."""
    out: dict[str, dict[GroupKey, list[CommunicationTrace]]] = defaultdict(lambda: defaultdict(list))
    for t in traces:
        out[t.run_label][(t.model_id, t.system.label, task_group(t))].append(t)
    return {k: dict(v) for k, v in out.items()}


def _sort_key(key: GroupKey) -> tuple:
    model, system, group = key
    systems = [s.label for s in SystemKind]
    return (model, systems.index(system) if system in systems else 99, GROUP_ORDER.index(group) if group in GROUP_ORDER else 99)


@dataclass(frozen=True)
class Table:
    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        return buf.getvalue()

    def text(self) -> str:
        cols = list(zip(self.header, *self.rows)) if self.rows else [(h,) for h in self.header]
        widths = [max(len(c) for c in col) for col in cols]
        lines = ["  ".join(h.ljust(w) for h, w in zip(self.header, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        for r in self.rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"


def fmt(x: float | None, digits: int = 2) -> str:
    return "n/a" if x is None else f"{x:.{digits}f}"


def fully_annotated(trace: CommunicationTrace) -> bool:
    return all(r.spans or not r.raw_text.strip() for r in trace.participating)


def prevalence_table(traces: Sequence[CommunicationTrace]) -> Table:
    # occlusion runs only annotate the copies they forward, so they are left out
    groups = group_traces(t for t in traces if t.participating and fully_annotated(t))
    rows = []
    for label in sorted(groups):
        for key in sorted(groups[label], key=_sort_key):
            p = prevalence(groups[label][key])
            rows.append((label, *key, str(p.total), *(fmt(p.percent(c)) for c in Category)))
    return Table(("run", "model", "system", "task", "responses", *(c.value for c in Category)), tuple(rows))


@dataclass(frozen=True)
class DeltaRow:
    run: str
    key: GroupKey
    delta: OcclusionDelta


def delta_rows(traces: Sequence[CommunicationTrace]) -> list[DeltaRow]:
    groups = group_traces(traces)
    if BASELINE not in groups:
        raise ReportError("no baseline traces among the inputs")
    base = groups[BASELINE]
    rows = []
    for label in sorted(groups):
        if label == BASELINE or label.startswith("cara"):
            continue
        for key in sorted(groups[label], key=_sort_key):
            if key not in base:
                raise ReportError(f"{label} group {key} has no matching baseline group")
            b = outcomes_by_id(base[key])
            p = outcomes_by_id(groups[label][key])
            outcome_matrix(b, p)  # raises on id mismatch
            ids = sorted(b)
            rows.append(DeltaRow(label, key, OcclusionDelta.from_outcomes([b[i] for i in ids], [p[i] for i in ids])))
    return rows


def delta_table(rows: Sequence[DeltaRow]) -> Table:
    out = []
    for r in rows:
        d = r.delta
        out.append(
            (r.run, *r.key, fmt(d.baseline), fmt(d.perturbed), d.cell(), f"{d.z:.4f}", f"{d.p:.4g}", str(d.n_baseline))
        )
    return Table(("run", "model", "system", "task", "B", "P", "delta", "z", "p", "n"), tuple(out))


def outcome_table(traces: Sequence[CommunicationTrace]) -> Table:
    groups = group_traces(traces)
    base = groups.get(BASELINE, {})
    rows = []
    for label in sorted(groups):
        if label == BASELINE or label.startswith("cara"):
            continue
        for key in sorted(groups[label], key=_sort_key):
            if key not in base:
                raise ReportError(f"{label} group {key} has no matching baseline group")
            m = outcome_matrix(outcomes_by_id(base[key]), outcomes_by_id(groups[label][key]))
            rows.append((label, *key, str(m.TT), str(m.TF), str(m.FT), str(m.FF)))
    return Table(("run", "model", "system", "task", "TT", "TF", "FT", "FF"), tuple(rows))


def recovery_table(traces: Sequence[CommunicationTrace]) -> Table:
    """Rows for every ``cara+<run>`` label: recovery of that run's TF and FF groups."""
    groups = group_traces(traces)
    base = groups.get(BASELINE, {})
    rows = []
    for label in sorted(groups):
        if not label.startswith("cara+"):
            continue
        source = label[len("cara+"):]
        if source not in groups:
            raise ReportError(f"{label} needs the {source} traces as input")
        for key in sorted(groups[label], key=_sort_key):
            if key not in base or key not in groups[source]:
                raise ReportError(f"{label} group {key} lacks baseline or {source} traces")
            m = outcome_matrix(outcomes_by_id(base[key]), outcomes_by_id(groups[source][key]))
            after = outcomes_by_id(groups[label][key])
            cells = []
            for g in ("TF", "FF"):
                members = [i for i in m.group(g) if i in after]
                missing = set(m.group(g)) - set(after)
                if missing:
                    raise ReportError(f"{label} {key}: no CARA trace for {sorted(missing)}")
                rate = recovery_rate(g, members, after)
                cells += [f"{rate.recovered}/{rate.total}", rate.cell()]
            rows.append((label, *key, *cells))
    return Table(("run", "model", "system", "task", "TF count", "TF %", "FF count", "FF %"), tuple(rows))


def recovery_from_counts(counts: Mapping[GroupKey, Mapping[str, tuple[int, int]]]) -> Table:
    """Percent table from (recovered, total) pairs per group and outcome cell."""
    rows = []
    for key in sorted(counts, key=_sort_key):
        cells = []
        for g in ("TF", "FF"):
            k, n = counts[key][g]
            cells.append(RecoveryRate(g, k, n).cell())
        rows.append((*key, *cells))
    return Table(("model", "system", "task", "TF", "FF"), tuple(rows))


def build_report(traces: Sequence[CommunicationTrace]) -> dict[str, Table]:
    tables: dict[str, Table] = {}
    prev = prevalence_table(traces)
    if prev.rows:
        tables["prevalence"] = prev
    labels = {t.run_label for t in traces}
    if BASELINE in labels and labels - {BASELINE}:
        rows = delta_rows(traces)
        if rows:
            tables["deltas"] = delta_table(rows)
            tables["outcomes"] = outcome_table(traces)
        if any(lbl.startswith("cara+") for lbl in labels):
            tables["recovery"] = recovery_table(traces)
    return tables


def write_report(tables: Mapping[str, Table], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(tables):
        for ext, body in (("csv", tables[name].csv()), ("txt", tables[name].text())):
            p = out / f"{name}.{ext}"
            p.write_text(body, encoding="utf-8", newline="\n")
            written.append(p)
    return written
