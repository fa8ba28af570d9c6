from __future__ import annotations

import pytest

from macomm.core import AgentResponse, Category, CommunicationTrace, Dataset, Span, SystemKind
from macomm.report import (
    ReportError,
    Table,
    build_report,
    delta_rows,
    prevalence_table,
    recovery_from_counts,
    recovery_table,
    write_report,
)


def _traces(label: str, outcomes: list[bool], model="Qwen2.5-Inst", system=SystemKind.SEQ_U, dataset=Dataset.GSM8K,
            spans=False) -> list[CommunicationTrace]:
    resp = AgentResponse(0, 1, "Answer: 1", spans=(Span("s1", 0, 9, "Answer: 1", Category.C1),) if spans else ())
    return [
        CommunicationTrace(f"t{i:02d}", system, model, (resp,), "1", ok, run_label=label, dataset=dataset)
        for i, ok in enumerate(outcomes)
    ]


def _bits(k: int, n: int) -> list[bool]:
    return [i < k for i in range(n)]


def test_delta_cell_is_starred_at_p_003():
    # 13/21 vs 6/21 gives p = 0.0300
    base = _traces("baseline", _bits(13, 21))
    occ = _traces("occ-C2", _bits(6, 21))
    (row,) = delta_rows(base + occ)
    assert row.delta.p == pytest.approx(0.0300, abs=5e-5)
    assert row.delta.cell() == "-33.33*"
    assert row.key == ("Qwen2.5-Inst", "Seq-U", "Math")


def test_not_significant_has_no_star():
    (row,) = delta_rows(_traces("baseline", _bits(13, 21)) + _traces("occ-C1", _bits(11, 21)))
    assert not row.delta.cell().endswith("*")


def test_deltas_need_a_baseline_and_matching_ids():
    with pytest.raises(ReportError):
        delta_rows(_traces("occ-C2", [True]))
    base = _traces("baseline", [True, False])
    with pytest.raises(ValueError):
        delta_rows(base + _traces("occ-C2", [True]))
    with pytest.raises(ReportError, match="no matching baseline"):
        delta_rows(base + _traces("occ-C2", [True, True], dataset=Dataset.MMLU))


def test_prevalence_table_skips_unannotated_runs():
    t = prevalence_table(_traces("baseline", [True, False], spans=True) + _traces("occ-C2", [True, True]))
    assert len(t.rows) == 1
    row = dict(zip(t.header, t.rows[0]))
    assert row["run"] == "baseline" and row["responses"] == "2" and row["C1"] == "100.00" and row["C2"] == "0.00"


def test_recovery_table_uses_tf_and_ff_groups():
    base = _traces("baseline", [True, True, True, False, False])
    occ = _traces("occ-C2", [True, False, False, False, False])
    cara = [t for t in _traces("cara+occ-C2", [True, True, False, True, False]) if t.task_id != "t00"]
    t = recovery_table(base + occ + cara)
    row = dict(zip(t.header, t.rows[0]))
    assert (row["TF count"], row["TF %"], row["FF count"], row["FF %"]) == ("1/2", "50.0", "1/2", "50.0")
    with pytest.raises(ReportError, match="needs the occ-C2"):
        recovery_table(base + cara)
    with pytest.raises(ReportError, match="no CARA trace"):
        recovery_table(base + occ + cara[1:])


def test_recovery_from_counts_rounds_half_up():
    t = recovery_from_counts({("M", "Seq-U", "Math"): {"TF": (1, 16), "FF": (0, 0)}})
    assert t.rows == (("M", "Seq-U", "Math", "6.3", "n/a"),)


def test_build_and_write_report(tmp_path):
    base = _traces("baseline", [True, False], spans=True)
    occ = _traces("occ-C2", [False, False])
    tables = build_report(base + occ)
    assert set(tables) == {"prevalence", "deltas", "outcomes"}
    outcomes = dict(zip(tables["outcomes"].header, tables["outcomes"].rows[0]))
    assert (outcomes["TT"], outcomes["TF"], outcomes["FT"], outcomes["FF"]) == ("0", "1", "0", "1")
    written = write_report(tables, tmp_path / "r")
    assert sorted(p.name for p in written) == [
        "deltas.csv", "deltas.txt", "outcomes.csv", "outcomes.txt", "prevalence.csv", "prevalence.txt"
    ]
    assert build_report(_traces("baseline", [True])) == {}


def test_table_rendering():
    t = Table(("a", "long"), (("1", "x"), ("222", "y")))
    assert t.csv() == "a,long\n1,x\n222,y\n"
    assert t.text() == "a    long\n---  ----\n1    x\n222  y\n"
    assert Table(("h",), ()).text() == "h\n-\n"
