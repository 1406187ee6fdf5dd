"""Command line entry points.

Configuration precedence everywhere: explicit flags beat BQT_*
environment variables, which beat keys in a bqt.toml file, which beat
built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .analysis import Boundary, analyze_run
from .canonical import canonical_json
from .errors import BackendError, BqtError
from .executor import Limits
from .fixtures import (
    BUNDLED_APPS,
    data_path,
    load_bundled_site,
    load_bundled_workflow,
    mocksite_path,
    workflow_path,
)
from .fsm import fsm_from_doc, load_workflow_doc, save_workflow
from .mocksite import (
    MockSession,
    Mutation,
    apply_mutation,
    generate_demo,
    load_site_spec,
    render_page,
    save_site_spec,
)
from .perception import WireExtractor
from .pipeline import (
    load_bsls,
    load_coverage,
    load_jobs,
    plan_jobs,
    run_collection,
    sample_addresses,
    save_jobs,
    select_cbgs,
)
from .synthesis import StateRepository, compile_workflow, load_demo, regenerate, save_demo

logger = logging.getLogger(__name__)

DEFAULTS = {
    "backend": "mock",
    "repo_dir": ".bqt/repo",
    "ocr_endpoint": "",
    "workers": 4,
    "seed": 1,
    "rate": 0.10,
    "boundary": "strict",
    "max_retries": 2,
}

ENV_KEYS = {
    "backend": "BQT_BACKEND",
    "repo_dir": "BQT_REPO_DIR",
    "ocr_endpoint": "BQT_OCR_ENDPOINT",
}


def _load_toml(path: Optional[str]) -> dict:
    candidate = Path(path) if path else Path("bqt.toml")
    if not candidate.exists():
        if path:
            raise BqtError(f"config file not found: {candidate}")
        return {}
    with open(candidate, "rb") as fh:
        doc = tomllib.load(fh)
    return doc.get("bqt", doc)


class Config:
    """Flag > environment > bqt.toml > default, resolved lazily per key."""

    def __init__(self, args: argparse.Namespace):
        self._args = args
        self._toml = _load_toml(getattr(args, "config", None))

    def get(self, key: str):
        flag = getattr(self._args, key, None)
        if flag is not None:
            return flag
        env = ENV_KEYS.get(key)
        if env and os.environ.get(env):
            return os.environ[env]
        if key in self._toml:
            return self._toml[key]
        return DEFAULTS.get(key)

    def echo(self, keys: Sequence[str]) -> dict:
        return {k: self.get(k) for k in keys}


def _emit(payload: dict, as_json: bool, lines: Sequence[str]) -> None:
    if as_json:
        print(canonical_json(payload))
    else:
        for line in lines:
            print(line)


def _load_spec_arg(spec: Optional[str], app: Optional[str]):
    if spec:
        return load_site_spec(spec)
    if app:
        return load_bundled_site(app)
    raise BqtError("pass --spec PATH or --app BUNDLED_ID")


# --- subcommand implementations ---


def cmd_mocksite_render(args: argparse.Namespace) -> int:
    spec = _load_spec_arg(args.spec, args.app)
    page = args.page or spec.entry_page
    png, boxes = render_page(spec, page, args.out_dir)
    _emit(
        {"image": str(png), "boxes": len(boxes)},
        args.json,
        [f"rendered {page} to {png} ({len(boxes)} text boxes)"],
    )
    return 0


def cmd_mocksite_demo(args: argparse.Namespace) -> int:
    spec = _load_spec_arg(args.spec, args.app)
    values = {"street": args.street, "city": args.city, "state": args.state, "zip": args.zip}
    out_dir = Path(args.out_dir)
    demo = generate_demo(spec, values, args.path, out_dir, address_id=args.address_id)
    name = args.name or f"{spec.app_id}-{args.path}.demo.json"
    demo_path = out_dir / name
    save_demo(demo, demo_path)
    _emit(
        {
            "demo": str(demo_path),
            "events": len(demo["events"]),
            "snapshots": len(demo["snapshots"]),
            "visited_states": demo["visited_states"],
        },
        args.json,
        [
            f"recorded {len(demo['events'])} events over "
            f"{len(demo['visited_states'])} pages -> {demo_path}"
        ],
    )
    return 0


def cmd_mocksite_mutate(args: argparse.Namespace) -> int:
    spec = _load_spec_arg(args.spec, args.app)
    params: dict = {}
    for key in ("page", "old", "new", "label", "before", "address_id"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    if args.dx:
        params["dx"] = args.dx
    if args.dy:
        params["dy"] = args.dy
    mutated = apply_mutation(spec, Mutation(args.kind, params))
    save_site_spec(mutated, args.out)
    _emit(
        {"kind": args.kind, "out": args.out},
        args.json,
        [f"applied {args.kind} -> {args.out}"],
    )
    return 0


def cmd_synthesize(args: argparse.Namespace) -> int:
    config = Config(args)
    doc = load_workflow_doc(args.workflow)
    demos = [load_demo(p) for p in args.demo]
    repo = StateRepository(config.get("repo_dir"))
    fsm = compile_workflow(doc, demos, repo)
    save_workflow(fsm, args.out, extraction=doc.extraction)
    states = {sid: st.content_hash for sid, st in sorted(fsm.states.items())}
    lines = [f"compiled {len(fsm.states)}/{len(fsm.abstract)} states -> {args.out}"]
    lines += [f"  {sid}  {h[:16]}" for sid, h in states.items()]
    lines += [f"  warning: {w}" for w in fsm.warnings]
    _emit(
        {"out": args.out, "states": states, "warnings": list(fsm.warnings)},
        args.json,
        lines,
    )
    return 0


def cmd_regen(args: argparse.Namespace) -> int:
    config = Config(args)
    doc = load_workflow_doc(args.workflow)
    fsm = fsm_from_doc(doc, permissive=True)
    old_hash = fsm.states[args.state].content_hash if args.state in fsm.states else None
    demos = [load_demo(p) for p in args.demo]
    repo = StateRepository(config.get("repo_dir"))
    new_fsm = regenerate(fsm, args.state, demos, repo)
    out = args.out or args.workflow
    save_workflow(new_fsm, out, extraction=doc.extraction)
    new_hash = new_fsm.states[args.state].content_hash
    entry = repo.get(fsm.app_id, new_fsm.states[args.state].provenance.abstract_prompt_hash)
    _emit(
        {
            "state": args.state,
            "old_hash": old_hash,
            "new_hash": new_hash,
            "generation": entry.generation if entry else None,
            "out": str(out),
        },
        args.json,
        [
            f"regenerated {args.state}: {str(old_hash)[:16]} -> {new_hash[:16]} "
            f"(generation {entry.generation if entry else '?'}) -> {out}"
        ],
    )
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    config = Config(args)
    seed = int(config.get("seed"))
    rate = float(config.get("rate"))
    bsls = load_bsls(args.bsl)
    coverage = load_coverage(args.coverage)
    selected = select_cbgs(bsls)
    in_scope = [b for b in bsls if b.cbg_geoid in set(selected)]
    sampled = sample_addresses(in_scope, rate, seed)
    jobs = plan_jobs(sampled, coverage)
    addresses = {b.address_id: b for b in sampled}
    save_jobs(jobs, addresses, args.out, seed, rate)
    _emit(
        {
            "cbgs_total": len({b.cbg_geoid for b in bsls}),
            "cbgs_selected": len(selected),
            "addresses_sampled": len(sampled),
            "jobs": len(jobs),
            "out": args.out,
        },
        args.json,
        [
            f"{len(selected)} of {len({b.cbg_geoid for b in bsls})} block groups selected, "
            f"{len(sampled)} addresses sampled, {len(jobs)} jobs -> {args.out}"
        ],
    )
    return 0


def _collect_paths(explicit: Sequence[str], directory: Optional[str], suffix: str) -> list[Path]:
    paths = [Path(p) for p in explicit or []]
    if directory:
        paths.extend(sorted(Path(directory).glob(f"*{suffix}")))
    return paths


def cmd_run(args: argparse.Namespace) -> int:
    config = Config(args)
    backend = str(config.get("backend"))
    workers = int(config.get("workers"))
    max_retries = int(config.get("max_retries"))

    jobs, addresses, meta = load_jobs(args.jobs)
    needed_apps = sorted({j.app_id for j in jobs})

    workflows = {}
    for path in _collect_paths(args.workflow, args.workflow_dir, ".fsm.json"):
        doc = load_workflow_doc(path)
        workflows[doc.app_id] = fsm_from_doc(doc, permissive=True)
    for app in needed_apps:
        if app not in workflows and workflow_path(app).exists():
            bundled = load_bundled_workflow(app)
            if bundled.concrete is not None:
                workflows[app] = fsm_from_doc(bundled, permissive=True)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if backend == "mock":
        specs = {}
        for path in _collect_paths(args.site, args.site_dir, ".mocksite.json"):
            spec = load_site_spec(path)
            specs[spec.app_id] = spec
        for app in needed_apps:
            if app not in specs and mocksite_path(app).exists():
                specs[app] = load_bundled_site(app)
        missing = [a for a in needed_apps if a not in specs]
        if missing:
            raise BqtError(f"no mock site spec for: {missing}")

        snapshots = out_dir / "snapshots"

        def session_factory(app_id: str, address_id: str) -> MockSession:
            return MockSession(specs[app_id], address_id, snapshots / f"{app_id}__{address_id}")

        backoff = (0, 0)
        extractor = None
    else:
        raise BackendError(
            f"backend {backend!r} is not available in this build; use the mock backend"
        )

    endpoint = str(config.get("ocr_endpoint") or "")
    if endpoint:
        extractor = WireExtractor.from_endpoint(endpoint)

    echo_keys = ("backend", "workers", "max_retries", "repo_dir", "ocr_endpoint")
    config_echo = config.echo(echo_keys)
    config_echo.update({"jobs_file": str(args.jobs), "seed": meta.get("seed"), "rate": meta.get("rate")})
    (out_dir / "config.json").write_text(canonical_json(config_echo) + "\n", encoding="utf-8")

    report, records = run_collection(
        jobs,
        addresses,
        workflows,
        session_factory,
        worker_count=workers,
        max_retries=max_retries,
        backoff_ms=backoff,
        out_dir=out_dir,
        limits=Limits(),
        extractor=extractor,
    )
    lines = [
        f"{report.total_jobs} jobs, {len(records)} plan records -> {out_dir}",
        "outcomes: "
        + ", ".join(f"{k}={v}" for k, v in sorted(report.by_outcome.items())),
    ]
    if report.flagged_states:
        lines.append(
            "flagged for regeneration: "
            + ", ".join(f"{app}/{sid}" for app, sid in report.flagged_states)
        )
    _emit(
        {
            "out_dir": str(out_dir),
            "records": len(records),
            "report": report.to_dict(),
        },
        args.json,
        lines,
    )
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    config = Config(args)
    boundary = Boundary(str(config.get("boundary")))
    summary = analyze_run(args.plans, args.report, args.income, args.out_dir, boundary)
    lines = [
        f"{summary['n_cbgs']} block groups, {summary['n_points']} plotted -> {summary['out_dir']}"
    ]
    for state, (exceeds, below) in sorted(summary["states"].items()):
        if exceeds is None:
            lines.append(f"  {state}: no block groups with known plans and income")
        else:
            lines.append(
                f"  {state}: {exceeds:.1f}% above the affordability threshold, "
                f"{below:.1f}% without a 100 Mbps plan"
            )
    _emit(summary, args.json, lines)
    return 0


def cmd_fixtures(args: argparse.Namespace) -> int:
    rows = {
        "apps": list(BUNDLED_APPS),
        "mocksites": {a: str(mocksite_path(a)) for a in BUNDLED_APPS},
        "workflows": {a: str(workflow_path(a)) for a in BUNDLED_APPS},
        "data": {n: str(data_path(n)) for n in ("bsl.csv", "coverage.csv", "income.csv")},
    }
    _emit(
        rows,
        args.json,
        [f"bundled apps: {', '.join(BUNDLED_APPS)}", f"data tables: {rows['data']}"],
    )
    return 0


# --- parser wiring ---


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--json", action="store_true", help="print a JSON summary instead of text")
    p.add_argument("--config", help="path to a bqt.toml (default: ./bqt.toml when present)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bqt",
        description="workflow automation and plan collection for broadband lookup sites",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    site = sub.add_parser("mocksite", help="render, demo, and mutate mock provider sites")
    site_sub = site.add_subparsers(dest="site_command", required=True)

    p = site_sub.add_parser("render", help="render one page to PNG plus ground-truth boxes")
    p.add_argument("--spec", help="site spec path")
    p.add_argument("--app", choices=BUNDLED_APPS, help="bundled site id")
    p.add_argument("--page", help="page id (default: the entry page)")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_mocksite_render)

    p = site_sub.add_parser("demo", help="record a demonstration walk through a site")
    p.add_argument("--spec", help="site spec path")
    p.add_argument("--app", choices=BUNDLED_APPS, help="bundled site id")
    p.add_argument(
        "--path",
        default="serviceable",
        choices=("serviceable", "not_serviceable", "unknown"),
    )
    p.add_argument("--address-id", help="oracle address to walk as (default: auto-pick)")
    p.add_argument("--street", default="742 Evergreen Terrace")
    p.add_argument("--city", default="Goleta")
    p.add_argument("--state", default="CA")
    p.add_argument("--zip", default="93117")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--name", help="demo file name (default: <app>-<path>.demo.json)")
    _add_common(p)
    p.set_defaults(func=cmd_mocksite_demo)

    p = site_sub.add_parser("mutate", help="apply a structural change to a site spec")
    p.add_argument("--spec", help="site spec path")
    p.add_argument("--app", choices=BUNDLED_APPS, help="bundled site id")
    p.add_argument(
        "--kind",
        required=True,
        choices=("rename_label", "move_element", "insert_interstitial_page", "reorder_plans"),
    )
    p.add_argument("--page")
    p.add_argument("--old")
    p.add_argument("--new")
    p.add_argument("--label")
    p.add_argument("--dx", type=int, default=0)
    p.add_argument("--dy", type=int, default=0)
    p.add_argument("--before")
    p.add_argument("--address-id", dest="address_id")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_mocksite_mutate)

    p = sub.add_parser("synthesize", help="compile a workflow from demonstrations")
    p.add_argument("--workflow", required=True, help="abstract workflow (.fsm.json)")
    p.add_argument("--demo", action="append", required=True, help="demonstration file (repeatable)")
    p.add_argument("--repo-dir", dest="repo_dir", help="state repository directory")
    p.add_argument("--out", required=True, help="compiled workflow output path")
    _add_common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("regen", help="re-synthesize one failed state from fresh evidence")
    p.add_argument("--workflow", required=True, help="compiled workflow (.fsm.json)")
    p.add_argument("--state", required=True, help="state id to regenerate")
    p.add_argument("--demo", action="append", required=True, help="fresh demonstration (repeatable)")
    p.add_argument("--repo-dir", dest="repo_dir")
    p.add_argument("--out", help="output path (default: rewrite --workflow in place)")
    _add_common(p)
    p.set_defaults(func=cmd_regen)

    p = sub.add_parser("sample", help="select block groups and sample addresses into jobs")
    p.add_argument("--bsl", required=True, help="locations table (CSV)")
    p.add_argument("--coverage", required=True, help="provider coverage table (CSV)")
    p.add_argument("--rate", type=float, help="sampling rate (default 0.10)")
    p.add_argument("--seed", type=int, help="sampling seed (default 1)")
    p.add_argument("--out", required=True, help="jobs file output path")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("run", help="execute sampled jobs and write the plan dataset")
    p.add_argument("--jobs", required=True, help="jobs file from 'bqt sample'")
    p.add_argument("--workflow", action="append", help="compiled workflow path (repeatable)")
    p.add_argument("--workflow-dir", help="directory of compiled *.fsm.json workflows")
    p.add_argument("--site", action="append", help="mock site spec path (repeatable)")
    p.add_argument("--site-dir", help="directory of *.mocksite.json site specs")
    p.add_argument("--backend", help="page backend (default mock)")
    p.add_argument("--workers", type=int, help="worker thread count (default 4)")
    p.add_argument("--max-retries", type=int, dest="max_retries")
    p.add_argument("--out-dir", required=True, help="run directory for dataset, report, traces")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="summarize a run into tables and figures")
    p.add_argument("--plans", required=True, help="plans.ndjson from a run")
    p.add_argument("--report", required=True, help="run_report.json from the same run")
    p.add_argument("--income", required=True, help="income table (CSV)")
    p.add_argument("--boundary", choices=("strict", "inclusive"))
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fixtures", help="show where the bundled example data lives")
    _add_common(p)
    p.set_defaults(func=cmd_fixtures)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("BQT_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            _load_toml(args.config)  # an explicit --config must exist, whoever consumes it
        return args.func(args)
    except (BqtError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
