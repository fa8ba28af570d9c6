"""Command-line driver: run, annotate, occlude, recover, sample, report.

Each stage reads and writes JSONL trace files and drops a
``<output>.manifest.json`` next to its output with the effective config.
Exit codes: 0 success, 1 usage or configuration error, 2 partial failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .annotation import AnnotationError, Annotator
from .backend import ChatBackend, ChatModel
from .cara import RecoveryRate, recovery_rate, run_with_recovery
from .core import (
    AgentConfig,
    Category,
    CommunicationTrace,
    SystemKind,
    TaskInstance,
    judge_config,
    manifest_path,
    read_traces,
    write_traces,
)
from .evaluation import load_dataset, write_dataset
from .occlusion import (
    CONTROL,
    ControlHook,
    OcclusionHook,
    OutcomeMatrix,
    SpanLengthProfile,
    known_annotations,
    outcome_matrix,
    outcomes_by_id,
    published_profile,
    run_label_for,
    run_occlusion,
)
from .orchestrator import run_discussion, run_many
from .prompts import Templates, roles_for
from .report import Table, build_report, write_report
from .scripted import ScriptedModel
from .stats import plan, stratified_sample

log = logging.getLogger("macomm")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2

CONFIG_KEYS = frozenset({
    "system", "dataset", "data_dir", "limit", "model", "judge_model", "backend", "cassette",
    "provider", "api_base", "templates", "rounds", "agents", "parallelism", "seed", "out",
    "target", "baseline", "profile", "control_category", "matrix", "matrix_out", "targets",
    "records", "traces", "confidence", "margin", "full",
})


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with default option values")
    p.add_argument("--backend", choices=("live", "record", "replay"), default="replay")
    p.add_argument("--cassette", help="JSONL cassette for record/replay")
    p.add_argument("--provider", choices=("http", "scripted"), default="http",
                   help="what answers live/record calls: an OpenAI-compatible endpoint or the offline scripted model")
    p.add_argument("--api-base", dest="api_base", help="endpoint base URL (else $MACOMM_API_BASE)")
    p.add_argument("--model", default="default", help="model id sent to the backend")
    p.add_argument("--templates", help="directory of template overrides")
    p.add_argument("--parallelism", type=int, default=4)
    p.add_argument("--rounds", type=int, default=3)


def _task_args(p: argparse.ArgumentParser, multi_system: bool = False) -> None:
    if multi_system:
        p.add_argument("--system", action="append", help="seq-u, seq-r, debate, cr-mc, cr-sv (repeatable)")
    else:
        p.add_argument("--system", help="seq-u, seq-r, debate, cr-mc, cr-sv")
    p.add_argument("--dataset", action="append", help="dataset JSONL file or name under --data-dir (repeatable)")
    p.add_argument("--data-dir", dest="data_dir", default=".")
    p.add_argument("--limit", type=int, help="use only the first N tasks of each dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="macomm", description="Multi-agent communication experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="run baseline discussions")
    _backend_args(p)
    _task_args(p, multi_system=True)
    p.add_argument("--out", required=False, help="trace file to write")
    p.add_argument("--agents", type=int, default=3)

    p = sub.add_parser("annotate", help="label spans of every participating response")
    _backend_args(p)
    p.add_argument("--traces", required=False)
    p.add_argument("--judge-model", dest="judge_model", default="gpt-4o")
    p.add_argument("--out")

    p = sub.add_parser("occlude", help="re-run with a category or control mask")
    _backend_args(p)
    _task_args(p)
    p.add_argument("--target", help="C1..C5 or control")
    p.add_argument("--baseline", help="annotated baseline trace file")
    p.add_argument("--profile", help="span-length profile JSON, or a published model name")
    p.add_argument("--control-category", dest="control_category", default="C2")
    p.add_argument("--judge-model", dest="judge_model", default="gpt-4o")
    p.add_argument("--out")
    p.add_argument("--matrix-out", dest="matrix_out")

    p = sub.add_parser("recover", help="re-run failed samples with CARA")
    _backend_args(p)
    _task_args(p)
    p.add_argument("--targets", default="tf,ff", help="comma-separated outcome groups")
    p.add_argument("--matrix", help="outcome matrix JSON written by occlude")
    p.add_argument("--baseline", help="baseline trace file (annotations reused for masking)")
    p.add_argument("--judge-model", dest="judge_model", default="gpt-4o")
    p.add_argument("--out")
    p.add_argument("--records", help="where to write recovery records (JSONL)")
    p.add_argument("--profile", help="span-length profile for re-applying a control mask")
    p.add_argument("--control-category", dest="control_category", default="C2")

    p = sub.add_parser("sample", help="draw a Cochran-sized sample from a dataset")
    p.add_argument("--config")
    p.add_argument("--dataset", required=False)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--full", action="store_true", help="keep the whole dataset")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out")

    p = sub.add_parser("report", help="tables from trace files")
    p.add_argument("--config")
    p.add_argument("--traces", nargs="+", required=False)
    p.add_argument("--out", help="directory for CSV and text tables")
    return parser


# ---------------------------------------------------------------------------
# helpers


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a mapping")
    unknown = sorted(k for k in data if k.replace("-", "_") not in CONFIG_KEYS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return data


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    cfg = load_config(getattr(args, "config", None))
    if cfg:
        # values given on the command line win over the config file
        sub = parser._subparsers._group_actions[0].choices[args.command]
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if not hasattr(args, key):
                continue
            if getattr(args, key) == sub.get_default(key):
                if key == "traces" or (key == "dataset" and args.command != "sample") or (key == "system" and args.command == "run"):
                    value = [value] if isinstance(value, str) else list(value)
                setattr(args, key, value)
    return args


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [n for n in names if not getattr(args, n, None)]
    if missing:
        raise UsageError(f"{args.command}: missing --{', --'.join(m.replace('_', '-') for m in missing)}")


def make_model(args: argparse.Namespace) -> ChatModel:
    transport = None
    if args.provider == "scripted":
        transport = ScriptedModel().complete
    elif args.backend != "replay":
        from .backend import OpenAICompatTransport

        transport = OpenAICompatTransport(base_url=args.api_base)
    if args.backend in ("record", "replay") and not args.cassette:
        raise UsageError(f"--backend {args.backend} needs --cassette")
    return ChatBackend(args.backend, cassette=args.cassette, transport=transport)


def load_tasks(args: argparse.Namespace) -> list[TaskInstance]:
    datasets = args.dataset or []
    if isinstance(datasets, str):
        datasets = [datasets]
    if not datasets:
        raise UsageError(f"{args.command}: missing --dataset")
    tasks: list[TaskInstance] = []
    for name in datasets:
        path = Path(name)
        if not path.exists():
            path = Path(args.data_dir) / f"{name}.jsonl"
        if not path.exists():
            raise UsageError(f"dataset {name!r} not found")
        loaded = load_dataset(path)
        tasks.extend(loaded[: args.limit] if args.limit else loaded)
    return tasks


def parse_system(value: str | None) -> SystemKind:
    if not value:
        raise UsageError("missing --system")
    try:
        return SystemKind.parse(value)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def agents_for(kind: SystemKind, model_id: str, n: int = 3) -> list[AgentConfig]:
    roles = roles_for(kind)
    if kind in (SystemKind.SEQ_U, SystemKind.CRMC):
        roles = ("agent",) * n
    elif n != len(roles) and not (kind is SystemKind.DEBATE and n == 3):
        raise UsageError(f"{kind.label} supports exactly {len(roles)} agents")
    return [AgentConfig(i, role, 0.7, 42 + i, model_id) for i, role in enumerate(roles)]


def discussion_kwargs(args: argparse.Namespace, kind: SystemKind) -> dict:
    kw = {"rounds": args.rounds, "judge": judge_config(args.model)}
    if args.templates:
        kw["templates"] = Templates(args.templates)
    return kw


def effective_config(args: argparse.Namespace) -> dict:
    skip = {"config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


def finish(traces: Sequence[CommunicationTrace], out: str, args: argparse.Namespace, stage: str, inputs: Sequence[str]) -> int:
    manifest = write_traces(traces, out, effective_config(args), stage, list(inputs))
    bad = [t for t in traces if not t.complete]
    if bad:
        manifest.warnings.extend(f"{t.task_id} ({t.system.value}): incomplete" for t in bad)
    manifest.write(manifest_path(out))
    print(f"{stage}: wrote {manifest.count} traces to {out}")
    return EXIT_PARTIAL if bad else EXIT_OK


def _annotator(args: argparse.Namespace, model: ChatModel) -> Annotator:
    templates = Templates(args.templates) if args.templates else None
    return Annotator(model, args.judge_model, **({"templates": templates} if templates else {}))


def _profile(source: str | None, model_id: str) -> SpanLengthProfile:
    if source is None:
        return published_profile(model_id)
    if Path(source).exists():
        return SpanLengthProfile.load(source)
    return published_profile(source)


# ---------------------------------------------------------------------------
# commands


def cmd_run(args: argparse.Namespace) -> int:
    _require(args, "out")
    if args.rounds > 3 or args.agents != 3:
        log.warning("rounds=%d agents=%d differ from the three-by-three default", args.rounds, args.agents)
    systems = args.system or []
    if isinstance(systems, str):
        systems = [systems]
    if not systems:
        raise UsageError("run: missing --system")
    kinds = [parse_system(s) for s in systems]
    tasks = load_tasks(args)
    model = make_model(args)
    traces: list[CommunicationTrace] = []
    for kind in kinds:
        agents = agents_for(kind, args.model, args.agents)
        kw = discussion_kwargs(args, kind)
        traces += run_many(tasks, lambda t: run_discussion(t, kind, agents, model, **kw), args.parallelism)
    return finish(traces, args.out, args, "run", [str(d) for d in args.dataset])


def cmd_annotate(args: argparse.Namespace) -> int:
    _require(args, "traces", "out")
    traces = read_traces(args.traces)
    annotator = _annotator(args, make_model(args))
    failures = []

    def one(t: CommunicationTrace) -> CommunicationTrace:
        try:
            return annotator.annotate_trace(t)
        except AnnotationError as exc:
            failures.append(t.task_id)
            log.error("annotation failed for %s: %s", t.task_id, exc)
            return t

    annotated = run_many(traces, one, args.parallelism)
    code = finish(annotated, args.out, args, "annotate", [args.traces])
    return EXIT_PARTIAL if failures else code


def cmd_occlude(args: argparse.Namespace) -> int:
    _require(args, "target", "baseline", "out")
    baseline = read_traces(args.baseline)
    kind = parse_system(args.system or (baseline[0].system.value if baseline else None))
    tasks = load_tasks(args)
    model = make_model(args)
    is_control = args.target.lower() in (CONTROL, "ctrl")
    target = CONTROL if is_control else Category.parse(args.target)
    profile = _profile(args.profile, args.model) if is_control else None
    traces, delta = run_occlusion(
        tasks,
        baseline,
        kind,
        model,
        target,
        annotator=_annotator(args, model),
        profile=profile,
        control_category=Category.parse(args.control_category),
        agents=agents_for(kind, args.model),
        parallelism=args.parallelism,
        **discussion_kwargs(args, kind),
    )
    code = finish(traces, args.out, args, "occlude", [args.baseline])
    base_ids = {t.id for t in tasks}
    matrix = outcome_matrix(
        {k: v for k, v in outcomes_by_id(t for t in baseline if t.system is kind).items() if k in base_ids},
        outcomes_by_id(traces),
    )
    matrix_out = args.matrix_out or f"{args.out}.matrix.json"
    Path(matrix_out).write_text(
        json.dumps({"system": kind.value, "run_label": run_label_for(target), **matrix.to_dict()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    row = Table(
        ("run", "system", "B", "P", "delta", "z", "p"),
        ((run_label_for(target), kind.label, f"{delta.baseline:.2f}", f"{delta.perturbed:.2f}", delta.cell(),
          f"{delta.z:.4f}", f"{delta.p:.4g}"),),
    )
    print(row.text(), end="")
    return code


def cmd_recover(args: argparse.Namespace) -> int:
    _require(args, "matrix", "baseline", "out")
    info = json.loads(Path(args.matrix).read_text(encoding="utf-8"))
    matrix = OutcomeMatrix.from_dict(info)
    kind = parse_system(args.system or info.get("system"))
    source = info.get("run_label", "")
    groups = [g.strip().upper() for g in args.targets.split(",") if g.strip()]
    for g in groups:
        if g not in ("TT", "TF", "FT", "FF"):
            raise UsageError(f"unknown outcome group {g!r}")
    wanted = {i for g in groups for i in matrix.group(g)}
    tasks = [t for t in load_tasks(args) if t.id in wanted]
    model = make_model(args)
    baseline = read_traces(args.baseline)
    inner = None
    if source.startswith("occ-"):
        inner = OcclusionHook(Category.parse(source[4:]), _annotator(args, model), known_annotations(baseline))
    elif source == "ctrl":
        profile = _profile(args.profile, args.model)
        inner = ControlHook(profile[Category.parse(args.control_category)], "ctrl")
    label = f"cara+{source}" if source else "cara"
    agents = agents_for(kind, args.model)
    kw = discussion_kwargs(args, kind)
    results = run_many(tasks, lambda t: run_with_recovery(t, kind, agents, model, inner=inner, run_label=label, **kw), args.parallelism)
    traces = [r[0] for r in results]
    records = [rec for r in results for rec in r[1]]
    code = finish(traces, args.out, args, "recover", [args.matrix, args.baseline])
    records_out = args.records or f"{args.out}.records.jsonl"
    with open(records_out, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    after = outcomes_by_id(traces)
    rows = []
    for g in groups:
        rate: RecoveryRate = recovery_rate(g, matrix.group(g), after)
        rows.append((label, kind.label, g, f"{rate.recovered}/{rate.total}", rate.cell()))
    print(Table(("run", "system", "group", "count", "%"), tuple(rows)).text(), end="")
    return code


def cmd_sample(args: argparse.Namespace) -> int:
    _require(args, "dataset", "out")
    tasks = load_dataset(args.dataset)
    p = plan(len(tasks), args.confidence, args.margin, full=args.full)
    chosen = stratified_sample(tasks, lambda t: t.dataset.value, total=p.n, seed=args.seed)
    write_dataset(chosen, args.out)
    print(f"sample: N={p.population} n={p.n} (confidence {p.confidence}, margin {p.margin}) -> {args.out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    _require(args, "traces")
    traces: list[CommunicationTrace] = []
    for path in args.traces:
        traces += read_traces(path)
    tables = build_report(traces)
    if args.out:
        write_report(tables, args.out)
    for name in sorted(tables):
        print(f"== {name}")
        print(tables[name].text())
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "annotate": cmd_annotate,
    "occlude": cmd_occlude,
    "recover": cmd_recover,
    "sample": cmd_sample,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"macomm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"macomm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"macomm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
