"""Collection pipeline: from location tables to a plan dataset.

Block groups are selected by their share of subsidy-eligible locations,
addresses are sampled with a keyed-hash shuffle (reproducible under any
input ordering), and each (address, provider) job replays the provider's
workflow. Raw extraction fields normalize into plan records written as
sorted NDJSON so runs with different worker counts are byte-identical.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .canonical import canonical_json
from .errors import (
    EmptyInput,
    MalformedFieldName,
    MissingCoverage,
    SchemaViolation,
)
from .executor import (
    Limits,
    Outcome,
    RETRYABLE_OUTCOMES,
    SUCCESS_OUTCOMES,
    Session,
    WorkflowInput,
    WorkflowResult,
    run_workflow,
    save_trace,
)
from .fsm import WorkflowFSM
from .mocksite import EPOCH_MS

logger = logging.getLogger(__name__)

_GEOID_RE = re.compile(r"^\d{12}$")


@dataclass(frozen=True)
class BSL:
    """One broadband serviceable location."""

    address_id: str
    street: str
    city: str
    state: str
    zip: str
    cbg_geoid: str
    bead_eligible: bool

    def input_values(self) -> dict[str, str]:
        return {
            "street": self.street,
            "city": self.city,
            "state": self.state,
            "zip": self.zip,
        }


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise SchemaViolation(f"not a boolean: {raw!r}")


def load_bsls(path: str | Path) -> list[BSL]:
    rows: list[BSL] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"address_id", "street", "city", "state", "zip", "cbg_geoid", "bead_eligible"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = sorted(required - set(reader.fieldnames or []))
            raise SchemaViolation(f"location table missing columns: {missing}")
        for line in reader:
            geoid = line["cbg_geoid"].strip()
            if not _GEOID_RE.match(geoid):
                raise SchemaViolation(f"bad block group geoid: {geoid!r}")
            rows.append(
                BSL(
                    address_id=line["address_id"].strip(),
                    street=line["street"].strip(),
                    city=line["city"].strip(),
                    state=line["state"].strip(),
                    zip=line["zip"].strip(),
                    cbg_geoid=geoid,
                    bead_eligible=_parse_bool(line["bead_eligible"]),
                )
            )
    if not rows:
        raise EmptyInput(f"no locations in {path}")
    return rows


def load_coverage(path: str | Path) -> dict[str, list[str]]:
    """cbg_geoid -> provider app ids, de-duplicated, input order preserved."""
    out: dict[str, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"cbg_geoid", "app_id"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = sorted(required - set(reader.fieldnames or []))
            raise SchemaViolation(f"coverage table missing columns: {missing}")
        for line in reader:
            geoid = line["cbg_geoid"].strip()
            app = line["app_id"].strip()
            apps = out.setdefault(geoid, [])
            if app not in apps:
                apps.append(app)
    if not out:
        raise EmptyInput(f"no coverage rows in {path}")
    return out


def load_income(path: str | Path) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"cbg_geoid", "median_household_income_usd_year"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = sorted(required - set(reader.fieldnames or []))
            raise SchemaViolation(f"income table missing columns: {missing}")
        for line in reader:
            out[line["cbg_geoid"].strip()] = float(line["median_household_income_usd_year"])
    if not out:
        raise EmptyInput(f"no income rows in {path}")
    return out


# --- selection and sampling ---


def select_cbgs(bsls: Sequence[BSL]) -> list[str]:
    """Block groups where at least half the locations are subsidy-eligible.

    The comparison is integer (2 * eligible >= total) so boundary cases
    never hinge on float rounding.
    """
    totals: dict[str, int] = {}
    eligible: dict[str, int] = {}
    for b in bsls:
        totals[b.cbg_geoid] = totals.get(b.cbg_geoid, 0) + 1
        if b.bead_eligible:
            eligible[b.cbg_geoid] = eligible.get(b.cbg_geoid, 0) + 1
    return sorted(g for g, n in totals.items() if 2 * eligible.get(g, 0) >= n)


def _sample_key(seed: int, cbg: str, address_id: str) -> str:
    return hashlib.sha256(f"{seed}:{cbg}:{address_id}".encode("utf-8")).hexdigest()


def sample_addresses(bsls: Sequence[BSL], rate: float, seed: int) -> list[BSL]:
    """Sample ceil(rate * n) locations per block group.

    Locations are ordered by a per-(seed, cbg, address) hash, so the
    draw is a deterministic shuffle: independent of input order, stable
    across runs, and different seeds give different draws.
    """
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"sampling rate must be in (0, 1]: {rate}")
    by_cbg: dict[str, list[BSL]] = {}
    for b in bsls:
        by_cbg.setdefault(b.cbg_geoid, []).append(b)
    picked: list[BSL] = []
    for cbg in sorted(by_cbg):
        group = sorted(by_cbg[cbg], key=lambda b: _sample_key(seed, cbg, b.address_id))
        picked.extend(group[: math.ceil(rate * len(group))])
    return picked


@dataclass(frozen=True)
class QueryJob:
    address_id: str
    app_id: str
    cbg_geoid: str


def plan_jobs(sampled: Sequence[BSL], coverage: Mapping[str, Sequence[str]]) -> list[QueryJob]:
    """One job per (sampled address, provider covering its block group)."""
    jobs: list[QueryJob] = []
    for b in sampled:
        apps = coverage.get(b.cbg_geoid)
        if not apps:
            raise MissingCoverage(f"no providers known for block group {b.cbg_geoid}")
        for app in apps:
            jobs.append(QueryJob(b.address_id, app, b.cbg_geoid))
    return jobs


def save_jobs(
    jobs: Sequence[QueryJob],
    addresses: Mapping[str, BSL],
    path: str | Path,
    seed: int,
    rate: float,
) -> None:
    doc = {
        "seed": seed,
        "rate": rate,
        "jobs": [
            {
                "address_id": j.address_id,
                "app_id": j.app_id,
                "cbg_geoid": j.cbg_geoid,
            }
            for j in jobs
        ],
        "addresses": {
            addr_id: {
                "street": b.street,
                "city": b.city,
                "state": b.state,
                "zip": b.zip,
                "cbg_geoid": b.cbg_geoid,
                "bead_eligible": b.bead_eligible,
            }
            for addr_id, b in sorted(addresses.items())
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(doc) + "\n", encoding="utf-8")


def load_jobs(path: str | Path) -> tuple[list[QueryJob], dict[str, BSL], dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    jobs = [QueryJob(j["address_id"], j["app_id"], j["cbg_geoid"]) for j in doc["jobs"]]
    addresses = {
        addr_id: BSL(
            address_id=addr_id,
            street=a["street"],
            city=a["city"],
            state=a["state"],
            zip=a["zip"],
            cbg_geoid=a["cbg_geoid"],
            bead_eligible=bool(a.get("bead_eligible", False)),
        )
        for addr_id, a in doc.get("addresses", {}).items()
    }
    meta = {"seed": doc.get("seed"), "rate": doc.get("rate")}
    return jobs, addresses, meta


# --- plan records ---


@dataclass(frozen=True)
class PlanRecord:
    address_id: str
    app_id: str
    cbg_geoid: str
    plan_name: str
    download_mbps: Optional[float]
    upload_mbps: Optional[float]
    price_usd_month: Optional[float]
    collected_at: str

    def to_dict(self) -> dict:
        return {
            "address_id": self.address_id,
            "app_id": self.app_id,
            "cbg_geoid": self.cbg_geoid,
            "plan_name": self.plan_name,
            "download_mbps": self.download_mbps,
            "upload_mbps": self.upload_mbps,
            "price_usd_month": self.price_usd_month,
            "collected_at": self.collected_at,
        }


_REQUIRED_RECORD_KEYS = ("address_id", "app_id", "cbg_geoid", "plan_name", "collected_at")
_OPTIONAL_RECORD_KEYS = ("download_mbps", "upload_mbps", "price_usd_month")


def record_from_dict(d: Mapping) -> PlanRecord:
    for key in _REQUIRED_RECORD_KEYS:
        if key not in d or not isinstance(d[key], str):
            raise SchemaViolation(f"plan record needs string {key!r}: {dict(d)!r}")
    for key in _OPTIONAL_RECORD_KEYS:
        v = d.get(key)
        if v is not None and not isinstance(v, (int, float)):
            raise SchemaViolation(f"plan record {key!r} must be numeric or null")
    unknown = set(d) - set(_REQUIRED_RECORD_KEYS) - set(_OPTIONAL_RECORD_KEYS)
    if unknown:
        logger.warning("plan record has unknown keys %s; ignoring them", sorted(unknown))
    return PlanRecord(
        address_id=d["address_id"],
        app_id=d["app_id"],
        cbg_geoid=d["cbg_geoid"],
        plan_name=d["plan_name"],
        download_mbps=float(d["download_mbps"]) if d.get("download_mbps") is not None else None,
        upload_mbps=float(d["upload_mbps"]) if d.get("upload_mbps") is not None else None,
        price_usd_month=float(d["price_usd_month"]) if d.get("price_usd_month") is not None else None,
        collected_at=d["collected_at"],
    )


_FIELD_RE = re.compile(r"^plan_(\d+)_(name|down|up|price|download|upload)$")
_SPEED_RE = re.compile(
    r"([0-9]+(?:[.,][0-9]+)?)\s*(gbps|gigs?|g\b|mbps|megabits?|m\b)", re.IGNORECASE
)
_PRICE_RE = re.compile(r"\$\s*([0-9]+(?:\.[0-9]{1,2})?)")

_ATTR_CANON = {"down": "down", "download": "down", "up": "up", "upload": "up",
               "name": "name", "price": "price"}


def parse_speed(text: str) -> Optional[float]:
    """'300 Mbps' -> 300.0, '1 Gig' -> 1000.0; None when no unit parses."""
    m = _SPEED_RE.search(text)
    if not m:
        return None
    value = float(m.group(1).replace(",", "."))
    unit = m.group(2).lower()
    if unit.startswith("g"):
        value *= 1000.0
    return value


def parse_price(text: str) -> Optional[float]:
    """'$49.99/mo' -> 49.99; None when no dollar amount is present."""
    m = _PRICE_RE.search(text)
    return float(m.group(1)) if m else None


@dataclass(frozen=True)
class PlanFragment:
    plan_name: str
    download_mbps: Optional[float]
    upload_mbps: Optional[float]
    price_usd_month: Optional[float]


def normalize_plan(raw_fields: Sequence[tuple[str, str]]) -> list[PlanFragment]:
    """Group raw plan_<i>_<attr> fields into typed plan fragments.

    Unparseable speed or price text leaves the value unknown (None,
    never zero) and folds the raw text into the plan name so nothing is
    silently dropped. Field names outside the plan_<i>_<attr> shape
    raise MalformedFieldName.
    """
    grouped: dict[int, dict[str, str]] = {}
    for name, text in raw_fields:
        m = _FIELD_RE.match(name)
        if not m:
            raise MalformedFieldName(f"unrecognized raw field {name!r}")
        idx = int(m.group(1))
        attr = _ATTR_CANON[m.group(2)]
        grouped.setdefault(idx, {})[attr] = text.strip()

    fragments: list[PlanFragment] = []
    for idx in sorted(grouped):
        fields = grouped[idx]
        if not any(fields.values()):
            continue  # an entirely empty row is no plan at all
        name = fields.get("name", "")
        unparsed: list[str] = []

        def number(attr: str, parse: Callable[[str], Optional[float]]) -> Optional[float]:
            text = fields.get(attr, "")
            if not text:
                return None
            value = parse(text)
            if value is None:
                unparsed.append(text)
            return value

        down = number("down", parse_speed)
        up = number("up", parse_speed)
        price = number("price", parse_price)
        if unparsed:
            suffix = " ".join(f"[{t}]" for t in unparsed)
            name = f"{name} {suffix}".strip()
        fragments.append(PlanFragment(name or "unknown plan", down, up, price))
    return fragments


def persist_dataset(records: Sequence[PlanRecord], path: str | Path) -> None:
    """Write records as NDJSON with canonical lines in sorted order."""
    lines = sorted(canonical_json(r.to_dict()) for r in records)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_dataset(path: str | Path) -> list[PlanRecord]:
    records: list[PlanRecord] = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except ValueError as exc:
                raise SchemaViolation(f"{path}:{n}: not valid JSON: {exc}") from exc
            records.append(record_from_dict(doc))
    return records


# --- the collection run ---


@dataclass
class JobResult:
    job: QueryJob
    result: WorkflowResult
    attempts: int
    records: list[PlanRecord] = field(default_factory=list)


@dataclass
class RunReport:
    total_jobs: int
    by_outcome: dict[str, int]
    by_app: dict[str, dict[str, int]]
    by_cbg: dict[str, dict[str, int]]
    flagged_states: list[tuple[str, str]]
    retried_jobs: int
    duration_s: float

    def to_dict(self) -> dict:
        return {
            "total_jobs": self.total_jobs,
            "by_outcome": dict(sorted(self.by_outcome.items())),
            "by_app": {k: dict(sorted(v.items())) for k, v in sorted(self.by_app.items())},
            "by_cbg": {k: dict(sorted(v.items())) for k, v in sorted(self.by_cbg.items())},
            "flagged_states": sorted(list(p) for p in self.flagged_states),
            "retried_jobs": self.retried_jobs,
            "duration_s": self.duration_s,
        }


def _virtual_timestamp(virtual_ms: int) -> str:
    at = dt.datetime.fromtimestamp((EPOCH_MS + virtual_ms) / 1000.0, dt.timezone.utc)
    return at.isoformat(timespec="milliseconds").replace("+00:00", "Z")


SessionFactory = Callable[[str, str], Session]


def _run_job(
    job: QueryJob,
    address: BSL,
    fsm: WorkflowFSM,
    session_factory: SessionFactory,
    max_retries: int,
    backoff_ms: Sequence[int],
    limits: Limits,
    extractor=None,
) -> JobResult:
    values = {k: v for k, v in address.input_values().items() if k in fsm.input_schema}
    attempts = 0
    result: Optional[WorkflowResult] = None
    session: Optional[Session] = None
    while attempts <= max_retries:
        if attempts > 0 and backoff_ms:
            delay = backoff_ms[min(attempts - 1, len(backoff_ms) - 1)]
            if delay:
                time.sleep(delay / 1000.0)
        session = session_factory(job.app_id, job.address_id)
        result = run_workflow(
            fsm, session, WorkflowInput(job.address_id, values), limits, extractor
        )
        attempts += 1
        if result.outcome not in RETRYABLE_OUTCOMES:
            break
    assert result is not None and session is not None

    records: list[PlanRecord] = []
    if result.outcome is Outcome.PLANS_FOUND and result.raw_fields:
        collected_at = _virtual_timestamp(session.now_ms())
        for frag in normalize_plan(result.raw_fields):
            records.append(
                PlanRecord(
                    address_id=job.address_id,
                    app_id=job.app_id,
                    cbg_geoid=job.cbg_geoid,
                    plan_name=frag.plan_name,
                    download_mbps=frag.download_mbps,
                    upload_mbps=frag.upload_mbps,
                    price_usd_month=frag.price_usd_month,
                    collected_at=collected_at,
                )
            )
    return JobResult(job, result, attempts, records)


def run_collection(
    jobs: Sequence[QueryJob],
    addresses: Mapping[str, BSL],
    workflows: Mapping[str, WorkflowFSM],
    session_factory: SessionFactory,
    worker_count: int = 4,
    max_retries: int = 2,
    backoff_ms: Sequence[int] = (1000, 4000),
    out_dir: Optional[str | Path] = None,
    limits: Limits = Limits(),
    extractor=None,
    job_interval_ms: int = 0,
) -> tuple[RunReport, list[PlanRecord]]:
    """Run every job in a thread pool and aggregate the results.

    Jobs are independent, so the outputs (sorted NDJSON dataset, report,
    traces) are identical for any worker count. Only detection failures
    and timeouts are retried; definitive outcomes are not.
    ``job_interval_ms`` spaces out consecutive job starts against the
    same app, as politeness toward real sites; 0 (the default, right
    for mocks) disables pacing entirely.
    """
    if not jobs:
        raise EmptyInput("no jobs to run")
    missing_apps = sorted({j.app_id for j in jobs} - set(workflows))
    if missing_apps:
        raise MissingCoverage(f"no compiled workflow for: {missing_apps}")
    missing_addrs = sorted({j.address_id for j in jobs} - set(addresses))
    if missing_addrs:
        raise EmptyInput(f"jobs reference unknown addresses: {missing_addrs}")

    pace_lock = threading.Lock()
    next_start: dict[str, float] = {}

    def _pace(app_id: str) -> None:
        while True:
            with pace_lock:
                now = time.monotonic()
                at = next_start.get(app_id, now)
                if at <= now:
                    next_start[app_id] = now + job_interval_ms / 1000.0
                    return
            time.sleep(min(at - now, 0.05))

    def _one(job: QueryJob) -> JobResult:
        if job_interval_ms:
            _pace(job.app_id)
        return _run_job(
            job,
            addresses[job.address_id],
            workflows[job.app_id],
            session_factory,
            max_retries,
            backoff_ms,
            limits,
            extractor,
        )

    started = time.monotonic()
    ordered = list(jobs)
    with ThreadPoolExecutor(max_workers=max(worker_count, 1)) as pool:
        results = list(pool.map(_one, ordered))
    duration = time.monotonic() - started

    by_outcome: dict[str, int] = {}
    by_app: dict[str, dict[str, int]] = {}
    by_cbg: dict[str, dict[str, int]] = {}
    flagged: set[tuple[str, str]] = set()
    retried = 0
    records: list[PlanRecord] = []
    for jr in results:
        outcome = jr.result.outcome.value
        by_outcome[outcome] = by_outcome.get(outcome, 0) + 1
        app_counts = by_app.setdefault(jr.job.app_id, {})
        app_counts[outcome] = app_counts.get(outcome, 0) + 1
        cbg = by_cbg.setdefault(jr.job.cbg_geoid, {"attempted": 0, "succeeded": 0})
        cbg["attempted"] += 1
        if jr.result.outcome in SUCCESS_OUTCOMES:
            cbg["succeeded"] += 1
        if jr.result.outcome is Outcome.STATE_DETECTION_FAILURE and jr.result.failed_state:
            flagged.add((jr.job.app_id, jr.result.failed_state))
        if jr.attempts > 1:
            retried += 1
        records.extend(jr.records)

    report = RunReport(
        total_jobs=len(ordered),
        by_outcome=by_outcome,
        by_app=by_app,
        by_cbg=by_cbg,
        flagged_states=sorted(flagged),
        retried_jobs=retried,
        duration_s=round(duration, 3),
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        persist_dataset(records, out_dir / "plans.ndjson")
        (out_dir / "run_report.json").write_text(
            canonical_json(report.to_dict()) + "\n", encoding="utf-8"
        )
        traces = out_dir / "traces"
        for jr in results:
            save_trace(
                jr.result, traces / f"{jr.job.address_id}__{jr.job.app_id}.trace.json"
            )
    return report, records
