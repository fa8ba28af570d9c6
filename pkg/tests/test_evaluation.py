from __future__ import annotations

import json
from pathlib import Path
from decimal import Decimal, ROUND_HALF_UP

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macomm.core import Dataset, Domain, TaskInstance
from macomm.evaluation import (
    accuracy,
    answer_segment,
    canonical_literal,
    canonical_math,
    canonical_option,
    extract_answer,
    extracted_equal,
    load_dataset,
    percentage,
    score,
    task_to_record,
    write_dataset,
)

CHOICES = ("Paris", "London", "Rome", "Berlin")


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Reasoning...\nAnswer: 42", "42"),
        ("Answer: 12\nmore text\nAnswer: 13", "13"),
        ("**Answer:** $1,250.00", "1250"),
        ("My Final Answer is: 3.50", "3.5"),
        ("Answer:\n\n  7 apples", "7"),
        ("so the result is \\boxed{\\frac{1}{2}}", "\\frac{1}{2}"),
        ("Answer: 0.5.", "0.5"),
        ("Answer: -4", "-4"),
        ("Answer: 18 dollars.", "18"),
    ],
)
def test_math_extraction(text, expected):
    assert extract_answer(text, Domain.MATH).value == expected


def test_non_numeric_math_is_flagged():
    value, exact = canonical_math("x^2 + 1")
    assert (value, exact) == ("x^2+1", False)


def test_missing_answer():
    assert extract_answer("I think about it.\nStill thinking.", Domain.MATH) is None
    assert extract_answer("", Domain.MATH) is None
    assert answer_segment("Answer:   \n") is None


@pytest.mark.parametrize(
    "text, expected",
    [("Answer: (B)", "London"), ("Answer: b. London", "London"), ("Answer: rome", "Rome"),
     ("Answer: D)", "Berlin"), ("Answer: Madrid", "Madrid")],
)
def test_option_extraction(text, expected):
    assert extract_answer(text, Domain.QNA, CHOICES).value == expected


def test_letter_with_conflicting_text_is_not_mapped():
    assert canonical_option("A London", CHOICES) == "A London"


@pytest.mark.parametrize("text, expected", [("Answer: Yes.", "yes"), ("Answer: false", "no"), ("Answer: No, because", "no")])
def test_yes_no(text, expected):
    assert extract_answer(text, Domain.QNA).value == expected


@pytest.mark.parametrize(
    "a, b",
    [("'abc'", '"abc"'), ("[1,2]", "[1, 2]"), ("```python\n{'a': 1}\n```", "{'a':1}"), ("f(1, 'x')", "(1, 'x')"),
     ("f([1])", "[1]")],
)
def test_literal_equivalence(a, b):
    assert canonical_literal(a) == canonical_literal(b)


def test_score_exact_match_and_checker():
    task = TaskInstance("t", Dataset.GSM8K, "q", "1,000")
    assert score(extract_answer("Answer: 1000.0", Domain.MATH), task)
    assert not score(extract_answer("Answer: 999", Domain.MATH), task)
    assert not score(None, task)
    code = TaskInstance("c", Dataset.CRUXEVAL_CIP, "q", "'ab'")
    assert score(extract_answer("Answer: \"ab\"", Domain.CODE_INPUT), code)
    assert score(extract_answer("Answer: anything", Domain.CODE_INPUT), code, checker=lambda v, t: True)


def test_extracted_equal():
    assert extracted_equal("Answer: 4", "work\nAnswer: 4.0", Domain.MATH)
    assert not extracted_equal("Answer: 4", "no answer here\nreally", Domain.MATH)


def test_percentage_rounds_half_up():
    assert percentage(7548, 7660) == 98.54
    assert percentage(1, 8, 1) == 12.5
    assert percentage(1, 16) == 6.25
    assert percentage(1, 3) == 33.33
    assert accuracy([True, False, True, True]) == 75.0
    with pytest.raises(ValueError):
        percentage(1, 0)
    with pytest.raises(ValueError):
        accuracy([])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10_000))
def test_percentage_matches_decimal_oracle(k, n):
    k = min(k, n)
    oracle = (Decimal(k) * 100 / Decimal(n)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    assert percentage(k, n) == float(oracle)


def test_dataset_roundtrip(tmp_path):
    src = tmp_path / "in.jsonl"
    records = [
        {"id": "m1", "dataset": "MMLU", "question": "Capital of Italy?", "choices": list(CHOICES), "reference": "Rome"},
        {"id": "g1", "dataset": "GSM8K", "question": "Compute 1 + 1.", "reference": "2"},
        {"id": "c1", "dataset": "CRUXEval-COP", "code": "def f(x): return x", "input": "1", "reference": "1"},
    ]
    src.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    tasks = load_dataset(src)
    assert "(C) Rome" in tasks[0].body and tasks[0].choices == CHOICES
    assert tasks[2].domain is Domain.CODE_OUTPUT
    out = tmp_path / "out.jsonl"
    assert write_dataset(tasks, out) == 3
    assert load_dataset(out) == tasks
    assert task_to_record(tasks[1])["domain"] == "Math"


def test_dataset_errors(tmp_path):
    dup = tmp_path / "dup.jsonl"
    rec = json.dumps({"id": "a", "dataset": "GSM8K", "body": "b", "reference": "1"})
    dup.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(ValueError, match="duplicate"):
        load_dataset(dup)
    wrong = tmp_path / "wrong.jsonl"
    wrong.write_text(json.dumps({"id": "a", "dataset": "GSM8K", "domain": "QnA", "body": "b", "reference": "1"}) + "\n")
    with pytest.raises(ValueError, match="domain"):
        load_dataset(wrong)


DATA = Path(__file__).resolve().parent.parent / "data"


@pytest.mark.parametrize("ds", list(Dataset))
def test_example_files_load_and_self_score(ds):
    path = DATA / f"{ds.value.lower().replace('-', '_')}.jsonl"
    tasks = load_dataset(path)
    assert len(tasks) == 3 and {t.dataset for t in tasks} == {ds}
    for t in tasks:
        assert score(extract_answer(f"Answer: {t.reference}", t.domain, t.choices), t), t.id
