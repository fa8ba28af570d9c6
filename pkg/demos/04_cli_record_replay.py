"""The command-line pipeline, first recorded into a cassette, then replayed offline.

Recording with ``--provider scripted`` needs no endpoint. Swap in
``--provider http --api-base ...`` (or set MACOMM_API_BASE) to record
against a real OpenAI-compatible server; replay never touches the network.

    python3 demos/04_cli_record_replay.py
"""

import filecmp
import os
import tempfile
from pathlib import Path

from macomm.cli import main

ROOT = Path(__file__).resolve().parent.parent
DATA = str(ROOT / "tests" / "fixtures" / "gsm8k_20.jsonl")


def pipeline(mode: str, cassette: str) -> None:
    backend = ["--backend", mode, "--cassette", cassette, "--model", "scripted"]
    if mode == "record":
        backend += ["--provider", "scripted"]
    steps = [
        ["run", "--system", "debate", "--dataset", DATA, "--limit", "8", "--out", "base.jsonl"],
        ["annotate", "--traces", "base.jsonl", "--out", "base.ann.jsonl"],
        ["occlude", "--target", "C2", "--baseline", "base.ann.jsonl", "--dataset", DATA, "--limit", "8", "--out", "occ.jsonl"],
        ["recover", "--matrix", "occ.jsonl.matrix.json", "--baseline", "base.ann.jsonl", "--dataset", DATA, "--out", "cara.jsonl"],
        ["report", "--traces", "base.ann.jsonl", "occ.jsonl", "cara.jsonl", "--out", "report"],
    ]
    for step in steps:
        print("$ macomm " + " ".join(Path(a).name if a.startswith("/") else a for a in step))
        code = main(step + (backend if step[0] != "report" else []))
        print(f"  exit code {code}\n")


os.environ["SOURCE_DATE_EPOCH"] = "1700000000"  # fixed manifest timestamps
with tempfile.TemporaryDirectory() as tmp:
    cassette = str(Path(tmp) / "cassette.jsonl")
    runs = []
    for mode in ("record", "replay"):
        work = Path(tmp) / mode
        work.mkdir()
        os.chdir(work)
        print(f"########## {mode} ##########")
        pipeline(mode, cassette)
        runs.append(work)
    os.chdir(ROOT)
    print(f"cassette holds {len(Path(cassette).read_text().splitlines())} recorded calls")
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    same = [f for f in files if filecmp.cmp(runs[0] / f, runs[1] / f, shallow=False)]
    print(f"replay reproduced {len(same)}/{len(files)} output files byte for byte")
    # manifests embed the effective config, which names the backend mode
    print("differing files:", ", ".join(str(f) for f in files if f not in same) or "none")
